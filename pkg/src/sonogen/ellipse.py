"""Ellipse geometry: parameter container, direct least-squares fitting, rasterization.

Pixel coordinates follow image convention: x indexes columns, y indexes rows,
and a pixel's center sits at its integer coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, TooFewPoints

__all__ = [
    "EllipseParams",
    "fit_ellipse",
    "rasterize_filled_ellipse",
    "boundary_points",
    "ellipse_bbox_half_extents",
]


@dataclass(frozen=True)
class EllipseParams:
    """Center (cx, cy), semi-axes a >= b > 0, rotation theta in [0, pi)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"require a >= b > 0, got a={self.a}, b={self.b}")
        if not (0.0 <= self.theta < math.pi):
            raise ValueError(f"theta must lie in [0, pi), got {self.theta}")

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipseParams":
        return cls(cx=float(d["cx"]), cy=float(d["cy"]), a=float(d["a"]),
                   b=float(d["b"]), theta=float(d["theta"]))


def canonicalize(cx, cy, a, b, theta) -> EllipseParams:
    """Normalize to a >= b and theta in [0, pi); near-circles snap theta to 0."""
    if b > a:
        a, b = b, a
        theta += math.pi / 2.0
    theta = theta % math.pi
    if a - b <= 1e-7 * max(a, 1.0):
        theta = 0.0
    return EllipseParams(cx=float(cx), cy=float(cy), a=float(a), b=float(b), theta=float(theta))


def fit_ellipse(points: np.ndarray) -> EllipseParams:
    """Fit an ellipse to (x, y) points by direct least squares on the conic.

    Uses the numerically stable split-design formulation with the ellipse
    constraint 4ac - b^2 = 1, then converts the conic to geometric parameters.

    Raises TooFewPoints for < 5 points and DegenerateFit when the best conic
    is not an ellipse (e.g. collinear or wildly noisy input).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (n, 2) point array, got shape {pts.shape}")
    if pts.shape[0] < 5:
        raise TooFewPoints(f"ellipse fit needs >= 5 points, got {pts.shape[0]}")

    x = pts[:, 0]
    y = pts[:, 1]
    # Center the data for conditioning; undo the shift afterwards.
    mx, my = x.mean(), y.mean()
    x = x - mx
    y = y - my

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t_mat = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("singular scatter matrix (collinear points?)") from exc
    m = s1 + s2 @ t_mat
    # Premultiply by inv(C1) for constraint matrix C1 = [[0,0,2],[0,-1,0],[2,0,0]].
    m_red = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m_red)
    cond = 4.0 * eigvec[0] * eigvec[2] - eigvec[1] ** 2
    valid = np.where(np.isreal(eigval) & (cond > 0))[0]
    if valid.size == 0:
        raise DegenerateFit("no conic eigenvector satisfies the ellipse constraint")
    a1 = np.real(eigvec[:, valid[0]])
    conic = np.concatenate([a1, t_mat @ a1])  # [A, B, C, D, E, F] in centered coords

    params = _conic_to_params(conic)
    return canonicalize(params[0] + mx, params[1] + my, params[2], params[3], params[4])


def _conic_to_params(conic: np.ndarray):
    """Convert conic coefficients A..F to (cx, cy, a, b, theta)."""
    A, B, C, D, E, F = conic
    mat = np.array([[A, B / 2.0], [B / 2.0, C]])
    bvec = np.array([D, E])
    try:
        center = -0.5 * np.linalg.solve(mat, bvec)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("conic has no finite center") from exc
    # Constant term after translating to the center.
    c_new = center @ mat @ center + bvec @ center + F
    if c_new == 0:
        raise DegenerateFit("degenerate conic (zero constant term)")
    scaled = mat / (-c_new)
    eigval, eigvec = np.linalg.eigh(scaled)
    if np.any(eigval <= 0):
        raise DegenerateFit("conic is not an ellipse")
    # eigh returns ascending eigenvalues: first axis is the major one.
    axes = 1.0 / np.sqrt(eigval)
    theta = math.atan2(eigvec[1, 0], eigvec[0, 0])
    return center[0], center[1], axes[0], axes[1], theta


def rasterize_filled_ellipse(e: EllipseParams, height: int, width: int) -> np.ndarray:
    """Binary (height, width) mask of pixels whose centers lie inside the ellipse."""
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - e.cx
    dy = ys - e.cy
    ct, st = math.cos(e.theta), math.sin(e.theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    inside = (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0
    return inside.astype(np.uint8)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """(x, y) coordinates of mask pixels with at least one 4-neighbor outside."""
    from scipy import ndimage

    m = mask.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]),
                                    border_value=0)
    edge = m & ~eroded
    ys, xs = np.nonzero(edge)
    return np.column_stack([xs, ys]).astype(np.float64)


def ellipse_bbox_half_extents(a: float, b: float, theta: float) -> tuple[float, float]:
    """Half-width and half-height of the axis-aligned box enclosing the ellipse."""
    ex = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    ey = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    return ex, ey
