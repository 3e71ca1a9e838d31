"""Ellipse extraction: turn the raw mask channel of a generated tri-channel
image into a filled elliptical ground-truth mask, with a quality gate that
routes dubious cases to human review."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .dataset import BinaryMask, TriChannelImage, decompose_tri_channel
from .ellipse import EllipseParams, fit_ellipse, rasterize_filled_ellipse
from .errors import DegenerateFit, EmptyMask, TooFewPoints

__all__ = [
    "ExtractionStatus",
    "ExtractionResult",
    "threshold_channel",
    "largest_component",
    "outer_contour",
    "extract",
    "fit_ellipse",
    "rasterize_filled_ellipse",
]

DEFAULT_THRESHOLD = 127
Q_HI = 0.90
Q_LO = 0.50

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class ExtractionStatus(str, Enum):
    accepted_auto = "accepted_auto"
    needs_review = "needs_review"
    rejected_auto = "rejected_auto"


@dataclass
class ExtractionResult:
    raw_channel: np.ndarray
    binary: BinaryMask
    ellipse: EllipseParams | None
    filled: BinaryMask | None
    quality: float
    status: ExtractionStatus


def threshold_channel(channel: np.ndarray, thr: int = DEFAULT_THRESHOLD) -> BinaryMask:
    """Strictly-greater-than threshold: pixel > thr -> 1."""
    channel = np.asarray(channel)
    return BinaryMask(pixels=(channel > thr).astype(np.uint8))


def largest_component(mask: BinaryMask) -> np.ndarray:
    """Largest 8-connected component as a binary array.

    Ties on pixel count go to the component whose bounding box starts at the
    smallest row, then smallest column, so the choice is total and stable.
    """
    px = mask.pixels
    if px.sum() == 0:
        raise EmptyMask("mask has no foreground pixels")
    labels, n = ndimage.label(px, structure=EIGHT_CONNECTED)
    sizes = ndimage.sum_labels(px, labels, index=range(1, n + 1))
    boxes = ndimage.find_objects(labels)
    ranked = sorted(
        range(n),
        key=lambda i: (-sizes[i], boxes[i][0].start, boxes[i][1].start),
    )
    return (labels == ranked[0] + 1).astype(np.uint8)


def outer_contour(component: np.ndarray) -> np.ndarray:
    """Sub-pixel outer silhouette of a binary blob as (x, y) points.

    Marching squares at level 0.5; the longest contour is the outer one, so
    interior holes of a ragged blob do not contaminate the fit.
    """
    from skimage import measure

    contours = measure.find_contours(component.astype(float), 0.5)
    if not contours:
        raise EmptyMask("no contour found")
    rc = max(contours, key=len)
    return np.column_stack([rc[:, 1], rc[:, 0]])


def dsc_arrays(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary arrays; 1.0 when both are empty."""
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def extract(tri: TriChannelImage, thr: int = DEFAULT_THRESHOLD,
            q_hi: float = Q_HI, q_lo: float = Q_LO) -> ExtractionResult:
    """Full pipeline: threshold, keep largest component, fit its outer contour,
    fill the fitted ellipse, grade self-consistency.

    Never raises; fit failures are encoded as rejected_auto with quality 0.
    The quality score is the Dice overlap between the filled fit and the
    largest thresholded component.
    """
    _, raw = decompose_tri_channel(tri)
    binary = threshold_channel(raw, thr=thr)
    try:
        component = largest_component(binary)
        pts = outer_contour(component)
        params = fit_ellipse(pts)
        filled_px = rasterize_filled_ellipse(params, tri.height, tri.width)
        quality = dsc_arrays(filled_px, component)
        if quality >= q_hi:
            status = ExtractionStatus.accepted_auto
        elif quality >= q_lo:
            status = ExtractionStatus.needs_review
        else:
            status = ExtractionStatus.rejected_auto
        return ExtractionResult(raw_channel=raw, binary=binary, ellipse=params,
                                filled=BinaryMask(pixels=filled_px), quality=quality,
                                status=status)
    except (EmptyMask, TooFewPoints, DegenerateFit, ValueError):
        return ExtractionResult(raw_channel=raw, binary=binary, ellipse=None,
                                filled=None, quality=0.0,
                                status=ExtractionStatus.rejected_auto)
