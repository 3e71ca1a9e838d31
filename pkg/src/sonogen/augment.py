"""Weak and strong classical augmentation baselines.

Geometric transforms are applied identically to image and mask (mask
re-binarized at 0.5 after any interpolation); photometric transforms never
touch the mask. Every augmentation is a deterministic function of
(pair, seed): the per-call RNG is derived from the seed and the pair id.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dataset import AnnotatedPair, BinaryMask, GrayImage

__all__ = [
    "AugmentPolicy",
    "weak_policy",
    "strong_policy",
    "weak_augment",
    "strong_augment",
    "apply_policy",
]


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str  # "weak" or "strong"
    prob: float = 0.5  # independent application probability per transform
    rotation_deg: float = 15.0
    brightness: float = 0.2  # max |delta| as a fraction of dynamic range
    contrast: float = 0.2  # max |factor - 1|
    noise_sigma: tuple[float, float] = (0.0, 0.03)  # of dynamic range
    blur_kernels: tuple[int, ...] = (3, 5)
    jitter_gamma: tuple[float, float] = (0.7, 1.4)
    elastic_alpha: tuple[float, float] = (10.0, 40.0)
    elastic_sigma: tuple[float, float] = (4.0, 8.0)
    erase_frac: tuple[float, float] = (0.02, 0.10)
    seed: int = 0


def weak_policy(**overrides) -> AugmentPolicy:
    return AugmentPolicy(kind="weak", **overrides)


def strong_policy(**overrides) -> AugmentPolicy:
    return AugmentPolicy(kind="strong", rotation_deg=overrides.pop("rotation_deg", 30.0),
                         **overrides)


def policy_from_config(config: dict, kind: str) -> AugmentPolicy:
    """Build a policy from config keys `augment.weak.*` / `augment.strong.*`."""
    params = dict(config.get("augment", {}).get(kind, {}))
    for key in ("noise_sigma", "blur_kernels", "jitter_gamma", "elastic_alpha",
                "elastic_sigma", "erase_frac"):
        if key in params:
            params[key] = tuple(params[key])
    base = weak_policy if kind == "weak" else strong_policy
    return base(**params)


# -- primitive transforms -------------------------------------------------------


def flip_h(image: np.ndarray, mask: np.ndarray):
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def flip_v(image: np.ndarray, mask: np.ndarray):
    return image[::-1, :].copy(), mask[::-1, :].copy()


def rotate_pair(image: np.ndarray, mask: np.ndarray, angle_deg: float):
    """Rotate both arrays about the center; right angles on square inputs are
    exact (no interpolation)."""
    if angle_deg % 90 == 0 and image.shape[0] == image.shape[1]:
        k = int(angle_deg // 90) % 4
        return np.rot90(image, k).copy(), np.rot90(mask, k).copy()
    img = ndimage.rotate(image.astype(np.float64), angle_deg, reshape=False,
                         order=1, mode="constant", cval=0.0)
    msk = ndimage.rotate(mask.astype(np.float64), angle_deg, reshape=False,
                         order=1, mode="constant", cval=0.0)
    return np.clip(img, 0, 255).astype(np.uint8), (msk > 0.5).astype(np.uint8)


def brightness_contrast(image: np.ndarray, brightness_delta: float, contrast_factor: float):
    out = (image.astype(np.float64) - 128.0) * contrast_factor + 128.0
    out += brightness_delta * 255.0
    return np.clip(out, 0, 255).astype(np.uint8)


def box_blur(image: np.ndarray, kernel: int):
    return ndimage.uniform_filter(image.astype(np.float64), size=kernel,
                                  mode="reflect").round().clip(0, 255).astype(np.uint8)


def gaussian_noise(image: np.ndarray, sigma_frac: float, rng: np.random.Generator):
    noisy = image.astype(np.float64) + rng.normal(0.0, sigma_frac * 255.0, image.shape)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def gamma_jitter(image: np.ndarray, gamma: float):
    norm = np.clip(image.astype(np.float64) / 255.0, 0.0, 1.0)
    return np.clip(norm ** gamma * 255.0, 0, 255).astype(np.uint8)


def elastic_fields(shape, alpha: float, sigma: float, rng: np.random.Generator):
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="reflect") * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="reflect") * alpha
    return dx, dy


def elastic_deform(image: np.ndarray, mask: np.ndarray, dx: np.ndarray, dy: np.ndarray):
    """Warp image and mask with one shared displacement field."""
    rows, cols = np.mgrid[0:image.shape[0], 0:image.shape[1]]
    coords = [rows + dy, cols + dx]
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1,
                                  mode="reflect")
    msk = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1,
                                  mode="reflect")
    return np.clip(img, 0, 255).astype(np.uint8), (msk > 0.5).astype(np.uint8)


def random_erase(image: np.ndarray, frac: float, rng: np.random.Generator):
    """Zero one rectangle covering `frac` of the image area. Image only."""
    h, w = image.shape
    area = frac * h * w
    aspect = rng.uniform(0.5, 2.0)
    rh = int(round(np.sqrt(area * aspect)))
    rw = int(round(np.sqrt(area / aspect)))
    rh = max(1, min(rh, h))
    rw = max(1, min(rw, w))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    out = image.copy()
    out[top:top + rh, left:left + rw] = 0
    return out


# -- policy application ------------------------------------------------------------


def _pair_rng(pair: AnnotatedPair, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(pair.id.encode())]))


def apply_policy(pair: AnnotatedPair, policy: AugmentPolicy, seed: int) -> AnnotatedPair:
    if policy.kind == "weak":
        return _apply_weak(pair, policy, seed)
    if policy.kind == "strong":
        return _apply_strong(pair, policy, seed)
    raise ValueError(f"unknown policy kind {policy.kind!r}")


def weak_augment(pair: AnnotatedPair, seed: int, policy: AugmentPolicy | None = None,
                 ) -> AnnotatedPair:
    return _apply_weak(pair, policy or weak_policy(), seed)


def strong_augment(pair: AnnotatedPair, seed: int, policy: AugmentPolicy | None = None,
                   ) -> AnnotatedPair:
    return _apply_strong(pair, policy or strong_policy(), seed)


def _apply_weak(pair, policy, seed):
    rng = _pair_rng(pair, seed)
    img, msk = pair.image.pixels, pair.mask.pixels
    if rng.random() < policy.prob:
        img, msk = flip_h(img, msk)
    if rng.random() < policy.prob:
        img, msk = flip_v(img, msk)
    if rng.random() < policy.prob:
        angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        img, msk = rotate_pair(img, msk, angle)
    if rng.random() < policy.prob:
        delta = rng.uniform(-policy.brightness, policy.brightness)
        factor = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        img = brightness_contrast(img, delta, factor)
    if rng.random() < policy.prob:
        img = box_blur(img, int(rng.choice(policy.blur_kernels)))
    if rng.random() < policy.prob:
        img = gaussian_noise(img, rng.uniform(*policy.noise_sigma), rng)
    return replace(pair, image=GrayImage(pixels=img), mask=BinaryMask(pixels=msk))


def _apply_strong(pair, policy, seed):
    rng = _pair_rng(pair, seed)
    img, msk = pair.image.pixels, pair.mask.pixels
    if rng.random() < policy.prob:
        angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        img, msk = rotate_pair(img, msk, angle)
    if rng.random() < policy.prob:
        delta = rng.uniform(-policy.brightness, policy.brightness)
        factor = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        img = brightness_contrast(img, delta, factor)
        img = gamma_jitter(img, rng.uniform(*policy.jitter_gamma))
    if rng.random() < policy.prob:
        alpha = rng.uniform(*policy.elastic_alpha)
        sigma = rng.uniform(*policy.elastic_sigma)
        dx, dy = elastic_fields(img.shape, alpha, sigma, rng)
        img, msk = elastic_deform(img, msk, dx, dy)
    if rng.random() < policy.prob:
        img = random_erase(img, rng.uniform(*policy.erase_frac), rng)
    return replace(pair, image=GrayImage(pixels=img), mask=BinaryMask(pixels=msk))
