"""Data model and dataset plumbing.

Grayscale image / binary mask pairs with a trimester label, tri-channel
composition (mask carried as one plane of a 3-plane image), prompt rendering,
manifest files, 70:30 splitting, and a seeded procedural phantom generator
that stands in for real ultrasound data at desk scale.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from . import ellipse as el
from .errors import (
    BadProportions,
    DimensionMismatch,
    EllipseOutOfBounds,
    NotBinary,
    TooFewEntries,
    UnreadableFile,
)

log = logging.getLogger(__name__)

MIN_SIDE = 16
DEFAULT_MASK_PLANE = 2
MANIFEST_VERSION = 1


class Trimester(str, Enum):
    first = "first"
    second = "second"
    third = "third"

    @property
    def class_id(self) -> int:
        return ("first", "second", "third").index(self.value)


class Provenance(str, Enum):
    real = "real"
    synthetic_raw = "synthetic_raw"
    synthetic_curated = "synthetic_curated"


PROMPT_TEMPLATE = "An ultrasound image of a fetal head, {} trimester"


def render_prompt(trimester: Trimester) -> str:
    return PROMPT_TEMPLATE.format(Trimester(trimester).value)


def prompt_to_trimester(prompt: str) -> Trimester:
    """Inverse of render_prompt; raises ValueError on anything else."""
    for t in Trimester:
        if render_prompt(t) == prompt:
            return t
    raise ValueError(f"not a recognised prompt: {prompt!r}")


# -- core image types ----------------------------------------------------------


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image, H x W, values in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise DimensionMismatch(f"gray image must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise DimensionMismatch(f"image sides must be >= {MIN_SIDE}, got {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def normalized(self) -> np.ndarray:
        """Float32 view in [0, 1]."""
        return self.pixels.astype(np.float32) / 255.0


@dataclass(frozen=True)
class BinaryMask:
    """Strictly binary H x W mask with values in {0, 1}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {px.shape}")
        vals = np.unique(px)
        if not np.all(np.isin(vals, (0, 1))):
            raise NotBinary(f"mask contains values other than 0/1: {vals[:8]}")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass(frozen=True)
class TriChannelImage:
    """3 x H x W planes in [0, 255]; one plane carries the mask.

    Strict plane invariants (two identical gray planes, {0,255} mask plane)
    hold for composed inputs; sampled outputs are raw and only range-checked.
    """

    planes: np.ndarray
    mask_plane_index: int = DEFAULT_MASK_PLANE

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3 or p.shape[0] != 3:
            raise DimensionMismatch(f"expected (3, H, W) planes, got {p.shape}")
        if self.mask_plane_index not in (0, 1, 2):
            raise ValueError(f"mask_plane_index must be 0, 1 or 2, got {self.mask_plane_index}")
        if p.dtype != np.uint8:
            if p.min() < 0 or p.max() > 255:
                raise ValueError("plane values outside [0, 255]")
            p = p.astype(np.uint8)
        object.__setattr__(self, "planes", p)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class AnnotatedPair:
    image: GrayImage
    mask: BinaryMask
    trimester: Trimester
    provenance: Provenance
    id: str

    def __post_init__(self):
        if self.image.pixels.shape != self.mask.pixels.shape:
            raise DimensionMismatch(
                f"image {self.image.pixels.shape} vs mask {self.mask.pixels.shape}")


# -- tri-channel composition ---------------------------------------------------


def compose_tri_channel(image: GrayImage, mask: BinaryMask,
                        mask_plane_index: int = DEFAULT_MASK_PLANE) -> TriChannelImage:
    """Stack the gray content twice and the mask (scaled to 255) once."""
    if image.pixels.shape != mask.pixels.shape:
        raise DimensionMismatch(
            f"image {image.pixels.shape} vs mask {mask.pixels.shape}")
    planes = np.empty((3, image.height, image.width), dtype=np.uint8)
    gray_planes = [i for i in range(3) if i != mask_plane_index]
    for i in gray_planes:
        planes[i] = image.pixels
    planes[mask_plane_index] = mask.pixels * np.uint8(255)
    return TriChannelImage(planes=planes, mask_plane_index=mask_plane_index)


def decompose_tri_channel(tri: TriChannelImage) -> tuple[GrayImage, np.ndarray]:
    """Split back into gray content and the raw (unthresholded) mask channel.

    The mask channel of a sampled image is noisy, so it is returned as-is in
    [0, 255]; thresholding belongs to the extraction stage.
    """
    gray_planes = [i for i in range(3) if i != tri.mask_plane_index]
    gray = GrayImage(pixels=tri.planes[gray_planes[0]])
    raw_mask_channel = tri.planes[tri.mask_plane_index].copy()
    return gray, raw_mask_channel


# -- manifests -------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    trimester: Trimester
    provenance: Provenance

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "trimester": Trimester(self.trimester).value,
            "provenance": Provenance(self.provenance).value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(id=d["id"], image_path=d["image_path"], mask_path=d["mask_path"],
                   trimester=Trimester(d["trimester"]), provenance=Provenance(d["provenance"]))


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    mask_plane_index: int = DEFAULT_MASK_PLANE
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate ids in manifest")
        for sid, label in self.split.items():
            if label not in ("train", "val", "test"):
                raise ValueError(f"bad split label {label!r} for id {sid!r}")

    def ids_for(self, label: str) -> list[str]:
        return [e.id for e in self.entries if self.split.get(e.id) == label]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "mask_plane_index": self.mask_plane_index,
            "entries": [e.to_dict() for e in self.entries],
            "split": dict(self.split),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            entries=[ManifestEntry.from_dict(e) for e in d.get("entries", [])],
            split=dict(d.get("split", {})),
            seed=int(d.get("seed", 0)),
            mask_plane_index=int(d.get("mask_plane_index", DEFAULT_MASK_PLANE)),
            version=int(d.get("version", MANIFEST_VERSION)),
        )

    def save(self, path: str | Path):
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def missing_files(self) -> list[str]:
        """Referenced image/mask paths that do not exist on disk."""
        out = []
        for e in self.entries:
            for p in (e.image_path, e.mask_path):
                if not Path(p).exists():
                    out.append(p)
        return out


def atomic_write_json(path: str | Path, payload: dict):
    """Write-to-temp then rename so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(payload, f, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- PNG I/O ---------------------------------------------------------------------


def save_gray_png(path: str | Path, pixels: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def load_gray_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise UnreadableFile(str(path)) from exc


def save_tri_png(path: str | Path, tri: TriChannelImage):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rgb = np.moveaxis(tri.planes, 0, -1)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_tri_png(path: str | Path, mask_plane_index: int = DEFAULT_MASK_PLANE) -> TriChannelImage:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise UnreadableFile(str(path)) from exc
    return TriChannelImage(planes=np.moveaxis(rgb, -1, 0), mask_plane_index=mask_plane_index)


def save_pair(pair: AnnotatedPair, images_dir: str | Path, masks_dir: str | Path) -> ManifestEntry:
    image_path = str(Path(images_dir) / f"{pair.id}.png")
    mask_path = str(Path(masks_dir) / f"{pair.id}_mask.png")
    save_gray_png(image_path, pair.image.pixels)
    save_gray_png(mask_path, pair.mask.pixels * np.uint8(255))
    return ManifestEntry(id=pair.id, image_path=image_path, mask_path=mask_path,
                         trimester=pair.trimester, provenance=pair.provenance)


def load_pair(entry: ManifestEntry) -> AnnotatedPair:
    image = GrayImage(pixels=load_gray_png(entry.image_path))
    mask = BinaryMask(pixels=(load_gray_png(entry.mask_path) > 127).astype(np.uint8))
    return AnnotatedPair(image=image, mask=mask, trimester=entry.trimester,
                         provenance=entry.provenance, id=entry.id)


# -- ingestion ---------------------------------------------------------------------


ANNOTATION_SUFFIX = "_Annotation"


def ingest_hc18_style(dir_path: str | Path, annotation_mode: str = "filled_mask",
                      trimester: Trimester = Trimester.second) -> tuple[DatasetManifest, list[str]]:
    """Pair image PNGs with `<stem>_Annotation.png` files into a manifest.

    `ellipse_contour` annotations (thin outlines) are filled to solid masks;
    `filled_mask` annotations are binarized as-is. Images without a matching
    annotation are skipped and reported in the returned warning list.
    """
    if annotation_mode not in ("filled_mask", "ellipse_contour"):
        raise ValueError(f"unknown annotation_mode {annotation_mode!r}")
    dir_path = Path(dir_path)
    warnings: list[str] = []
    entries: list[ManifestEntry] = []
    images = sorted(p for p in dir_path.glob("*.png") if ANNOTATION_SUFFIX not in p.stem)
    for img_path in images:
        ann_path = img_path.with_name(f"{img_path.stem}{ANNOTATION_SUFFIX}.png")
        if not ann_path.exists():
            warnings.append(f"missing annotation for {img_path.name}")
            continue
        ann = (load_gray_png(ann_path) > 127).astype(np.uint8)
        if annotation_mode == "ellipse_contour":
            mask_px = fill_contour(ann)
        else:
            mask_px = ann
        # Validate dimensions up front so a bad file surfaces at ingest time.
        pair = AnnotatedPair(
            image=GrayImage(pixels=load_gray_png(img_path)),
            mask=BinaryMask(pixels=mask_px),
            trimester=trimester,
            provenance=Provenance.real,
            id=img_path.stem,
        )
        mask_path = img_path.with_name(f"{img_path.stem}_filled.png")
        if annotation_mode == "ellipse_contour":
            save_gray_png(mask_path, pair.mask.pixels * np.uint8(255))
        else:
            mask_path = ann_path
        entries.append(ManifestEntry(id=pair.id, image_path=str(img_path),
                                     mask_path=str(mask_path), trimester=trimester,
                                     provenance=Provenance.real))
    for w in warnings:
        log.warning("%s", w)
    return DatasetManifest(entries=entries), warnings


def fill_contour(contour: np.ndarray) -> np.ndarray:
    """Fill a thin closed outline: close small gaps, then flood from the centroid.

    The filled result is the union of the contour and the connected region of
    the complement that contains the contour centroid.
    """
    from scipy import ndimage

    closed = ndimage.binary_closing(contour.astype(bool), structure=np.ones((3, 3)))
    ys, xs = np.nonzero(closed)
    if ys.size == 0:
        raise NotBinary("empty contour annotation")
    cy = int(round(ys.mean()))
    cx = int(round(xs.mean()))
    complement, _ = ndimage.label(~closed)
    seed_label = complement[cy, cx]
    if seed_label == 0:
        # Centroid landed on the contour itself: fall back to hole filling.
        filled = ndimage.binary_fill_holes(closed)
    else:
        border_labels = set(np.concatenate([complement[0, :], complement[-1, :],
                                            complement[:, 0], complement[:, -1]]).tolist())
        if seed_label in border_labels:
            # Centroid is outside the outline (open or pathological contour).
            filled = ndimage.binary_fill_holes(closed)
        else:
            filled = closed | (complement == seed_label)
    return filled.astype(np.uint8)


# -- splitting -----------------------------------------------------------------------


def split_dataset(manifest: DatasetManifest, train_frac: float = 0.7,
                  val_count: int = 50, seed: int = 0) -> DatasetManifest:
    """Deterministic 70:30 train/test split with `val_count` val ids carved
    out of the test portion."""
    n = len(manifest.entries)
    if n < val_count + 1:
        raise TooFewEntries(f"need > {val_count} entries, got {n}")
    n_train = int(round(train_frac * n))
    n_test = n - n_train
    if n_test < val_count:
        raise TooFewEntries(
            f"test portion {n_test} smaller than val_count {val_count}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    ids = [manifest.entries[i].id for i in order]
    split = {}
    for i in ids[:n_train]:
        split[i] = "train"
    for i in ids[n_train:n_train + val_count]:
        split[i] = "val"
    for i in ids[n_train + val_count:]:
        split[i] = "test"
    return replace(manifest, split=split, seed=seed)


# -- trimester mixing ------------------------------------------------------------------


TRIMESTER_MIX = (0.16, 0.70, 0.14)


def sample_trimester_mix(n: int, proportions: tuple[float, float, float] = TRIMESTER_MIX,
                         seed: int = 0) -> list[Trimester]:
    """Seeded multinomial draw of n trimester labels."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = np.asarray(proportions, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise BadProportions(f"proportions must be 3 non-negatives summing to 1, got {proportions}")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, p)
    labels = ([Trimester.first] * counts[0] + [Trimester.second] * counts[1]
              + [Trimester.third] * counts[2])
    rng.shuffle(labels)
    return labels


# -- phantom generator --------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic skull-like phantom; fully determines the pair."""

    ellipse: el.EllipseParams
    speckle_intensity: float = 0.4
    band_thickness: int = 4
    background_level: int = 70
    seed: int = 0
    height: int = 128
    width: int = 128
    trimester: Trimester = Trimester.second

    def __post_init__(self):
        if not (0.0 <= self.speckle_intensity <= 1.0):
            raise ValueError("speckle_intensity must lie in [0, 1]")
        if self.band_thickness < 1:
            raise ValueError("band_thickness must be >= 1")
        if not (0 <= self.background_level <= 255):
            raise ValueError("background_level must lie in [0, 255]")
        half = self.band_thickness / 2.0
        ex, ey = el.ellipse_bbox_half_extents(self.ellipse.a + half, self.ellipse.b + half,
                                              self.ellipse.theta)
        if (self.ellipse.cx - ex < 0 or self.ellipse.cx + ex > self.width - 1
                or self.ellipse.cy - ey < 0 or self.ellipse.cy + ey > self.height - 1):
            raise EllipseOutOfBounds(
                f"ellipse band exceeds {self.height}x{self.width} canvas: {self.ellipse}")


BAND_LEVEL = 235


def generate_phantom(spec: PhantomSpec) -> AnnotatedPair:
    """Speckled background plus a bright elliptical band; mask is the filled ellipse."""
    from scipy import ndimage

    rng = np.random.default_rng(spec.seed)
    s = spec.speckle_intensity
    noise = rng.uniform(1.0 - s, 1.0 + s, size=(spec.height, spec.width))
    speckle = ndimage.uniform_filter(noise, size=3, mode="reflect")

    half = spec.band_thickness / 2.0
    e = spec.ellipse
    outer = el.rasterize_filled_ellipse(
        el.EllipseParams(e.cx, e.cy, e.a + half, e.b + half, e.theta), spec.height, spec.width)
    inner_a = max(e.a - half, 0.5)
    inner_b = max(e.b - half, 0.5)
    inner = el.rasterize_filled_ellipse(
        el.EllipseParams(e.cx, e.cy, max(inner_a, inner_b), min(inner_a, inner_b), e.theta),
        spec.height, spec.width)
    band = outer.astype(bool) & ~inner.astype(bool)

    level = np.full((spec.height, spec.width), float(spec.background_level))
    level[band] = BAND_LEVEL
    image = np.clip(level * speckle, 0, 255).astype(np.uint8)
    mask = el.rasterize_filled_ellipse(e, spec.height, spec.width)
    return AnnotatedPair(
        image=GrayImage(pixels=image),
        mask=BinaryMask(pixels=mask),
        trimester=spec.trimester,
        provenance=Provenance.real,
        id=f"phantom-{spec.seed:08d}",
    )


# Skull size grows with gestational age; ranges are fractions of the short side.
TRIMESTER_AXIS_FRAC = {
    Trimester.first: (0.10, 0.18),
    Trimester.second: (0.18, 0.28),
    Trimester.third: (0.26, 0.36),
}


def random_phantom_spec(rng: np.random.Generator, trimester: Trimester,
                        height: int = 128, width: int = 128) -> PhantomSpec:
    """Draw a phantom recipe with trimester-dependent skull size."""
    lo, hi = TRIMESTER_AXIS_FRAC[trimester]
    side = min(height, width)
    a = rng.uniform(lo, hi) * side
    b = a * rng.uniform(0.6, 0.95)
    theta = rng.uniform(0.0, math.pi)
    band = int(rng.integers(3, 6))
    ex, ey = el.ellipse_bbox_half_extents(a + band / 2.0 + 1, b + band / 2.0 + 1, theta)
    cx = rng.uniform(ex, width - 1 - ex)
    cy = rng.uniform(ey, height - 1 - ey)
    return PhantomSpec(
        ellipse=el.EllipseParams(cx=cx, cy=cy, a=a, b=b, theta=theta),
        speckle_intensity=rng.uniform(0.25, 0.5),
        band_thickness=band,
        background_level=int(rng.integers(50, 90)),
        seed=int(rng.integers(0, 2**31 - 1)),
        height=height,
        width=width,
        trimester=trimester,
    )


def make_phantom_dataset(count: int, seed: int, out_dir: str | Path,
                         height: int = 128, width: int = 128,
                         proportions: tuple[float, float, float] = TRIMESTER_MIX,
                         ) -> DatasetManifest:
    """Generate `count` phantoms on disk with the standard trimester mix."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    labels = sample_trimester_mix(count, proportions=proportions, seed=seed)
    entries = []
    for i, trimester in enumerate(labels):
        spec = random_phantom_spec(rng, trimester, height=height, width=width)
        pair = generate_phantom(spec)
        pair = replace(pair, id=f"phantom-{seed:04d}-{i:05d}")
        entries.append(save_pair(pair, out_dir / "images", out_dir / "masks"))
    manifest = DatasetManifest(entries=entries, seed=seed)
    manifest.save(out_dir / "manifest.json")
    return manifest
