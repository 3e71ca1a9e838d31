"""Exception types shared across the toolkit."""


class SonogenError(Exception):
    """Base class for all toolkit errors."""


# -- data model ---------------------------------------------------------------

class DimensionMismatch(SonogenError):
    pass


class NotBinary(SonogenError):
    pass


class UnreadableFile(SonogenError):
    pass


class TooFewEntries(SonogenError):
    pass


class EllipseOutOfBounds(SonogenError):
    pass


class BadProportions(SonogenError):
    pass


# -- low-rank adapters --------------------------------------------------------

class BadRank(SonogenError):
    pass


class ShapeMismatch(SonogenError):
    pass


class AlreadyMerged(SonogenError):
    pass


class NotMerged(SonogenError):
    pass


# -- diffusion ----------------------------------------------------------------

class BadTimestep(SonogenError):
    pass


class EmptyDataset(SonogenError):
    pass


class NonFiniteLoss(SonogenError):
    pass


class UntrainedModel(SonogenError):
    pass


# -- extraction ---------------------------------------------------------------

class EmptyMask(SonogenError):
    pass


class TooFewPoints(SonogenError):
    pass


class DegenerateFit(SonogenError):
    pass


# -- segmentor ----------------------------------------------------------------

class BoxOutOfBounds(SonogenError):
    pass


class BothBatchesEmpty(SonogenError):
    pass


# -- harness ------------------------------------------------------------------

class InsufficientPool(SonogenError):
    pass


class NoRows(SonogenError):
    pass


# -- curation -----------------------------------------------------------------

class DuplicateId(SonogenError):
    pass


class NotFound(SonogenError):
    pass


class AlreadyDecided(SonogenError):
    pass


class InvalidEllipse(SonogenError):
    pass


class InvalidStatus(SonogenError):
    pass


class WriteFailure(SonogenError):
    pass
