"""Projective 3x3 homography algebra.

Point convention used throughout the package: a homography ``H_ba`` maps a
point of patch_a to the matching point of patch_b, ``x_b ~ H_ba @ x_a``.
Warping patch_a "by" ``H_ba`` therefore produces an image in patch_b's frame,
and successive refinements compose by left multiplication,
``H_total = H_{n-1} @ ... @ H_0``.

Pixel coordinates are continuous: pixel ``(row i, col j)`` has its center at
``(j + 0.5, i + 0.5)`` and the image spans ``[0, W] x [0, H]``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateHomography,
    PointAtInfinity,
    SingularMatrix,
)

EPS = 1e-12

IDENTITY_FREE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


class Frame(enum.Enum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class Homography3:
    """A 3x3 projective matrix tagged with the coordinate frame it lives in."""

    matrix: np.ndarray
    frame: Frame = Frame.PIXEL

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, frame: Frame = Frame.PIXEL) -> Homography3:
        return cls(np.eye(3), frame)

    @classmethod
    def from_free(cls, free, frame: Frame = Frame.NORMALIZED) -> Homography3:
        """Build from the eight free elements (h11..h32); h33 is pinned to 1."""
        free = np.asarray(free, dtype=np.float64).ravel()
        if free.shape != (8,):
            raise ValueError(f"expected 8 free elements, got {free.shape}")
        return cls(np.append(free, 1.0), frame)

    @property
    def free(self) -> np.ndarray:
        """First eight row-major entries of the canonical matrix."""
        return canonical_matrix(self.matrix).ravel()[:8]

    def to_text(self) -> str:
        return format_homography(self)

    def __matmul__(self, other: Homography3) -> Homography3:
        return compose(self, other)


def translation(tx: float, ty: float, frame: Frame = Frame.PIXEL) -> Homography3:
    return Homography3([[1, 0, tx], [0, 1, ty], [0, 0, 1]], frame)


def scaling(sx: float, sy: float, frame: Frame = Frame.PIXEL) -> Homography3:
    return Homography3(np.diag([sx, sy, 1.0]), frame)


@dataclass(frozen=True)
class PixelNormalizer:
    """Maps pixel coordinates of a ``width x height`` image onto ``[-1, 1]^2``."""

    width: float
    height: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[2.0 / self.width, 0.0, -1.0],
                         [0.0, 2.0 / self.height, -1.0],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array([[self.width / 2.0, 0.0, self.width / 2.0],
                         [0.0, self.height / 2.0, self.height / 2.0],
                         [0.0, 0.0, 1.0]])


# -- raw matrix helpers (used by the batched training code) ------------------

def canonical_matrix(m: np.ndarray) -> np.ndarray:
    """Divide a (..., 3, 3) stack by its bottom-right entries."""
    m = np.asarray(m, dtype=np.float64)
    d = m[..., 2:3, 2:3]
    if np.any(np.abs(d) <= EPS):
        raise DegenerateHomography("|m33| <= 1e-12, cannot canonicalize")
    return m / d


def free_to_matrix(free: np.ndarray) -> np.ndarray:
    """(..., 8) free elements to (..., 3, 3) matrices with h33 = 1."""
    free = np.asarray(free)
    ones = np.ones(free.shape[:-1] + (1,), dtype=free.dtype)
    return np.concatenate([free, ones], axis=-1).reshape(free.shape[:-1] + (3, 3))


def normalize_matrix(h: np.ndarray, width: float, height: float) -> np.ndarray:
    """Pixel-frame (..., 3, 3) stack to the canonical normalized frame."""
    n = PixelNormalizer(width, height)
    return canonical_matrix(n.matrix @ h @ n.inverse)


def denormalize_matrix(h: np.ndarray, width: float, height: float) -> np.ndarray:
    n = PixelNormalizer(width, height)
    return canonical_matrix(n.inverse @ h @ n.matrix)


# -- operations on Homography3 -------------------------------------------------

def canonicalize(h: Homography3) -> Homography3:
    return Homography3(canonical_matrix(h.matrix), h.frame)


def _expect_frame(h: Homography3, frame: Frame):
    if h.frame is not frame:
        raise ValueError(f"expected a {frame.value}-frame homography, got {h.frame.value}")


def normalize_homography(h: Homography3, n: PixelNormalizer) -> Homography3:
    """Conjugate a pixel-frame homography into normalized coordinates, M H M^-1."""
    _expect_frame(h, Frame.PIXEL)
    return Homography3(canonical_matrix(n.matrix @ h.matrix @ n.inverse), Frame.NORMALIZED)


def denormalize_homography(h: Homography3, n: PixelNormalizer) -> Homography3:
    _expect_frame(h, Frame.NORMALIZED)
    return Homography3(canonical_matrix(n.inverse @ h.matrix @ n.matrix), Frame.PIXEL)


def compose(h2: Homography3, h1: Homography3) -> Homography3:
    """Apply ``h1`` first, then ``h2``: returns canonical ``h2 @ h1``."""
    if h1.frame is not h2.frame:
        raise ValueError("cannot compose homographies from different frames")
    return Homography3(canonical_matrix(h2.matrix @ h1.matrix), h1.frame)


def fold(stages) -> Homography3:
    """Compose per-stage homographies given in application order (stage 0 first)."""
    stages = list(stages)
    if not stages:
        raise ValueError("need at least one stage")
    total = stages[0]
    for h in stages[1:]:
        total = compose(h, total)
    return total


def invert(h: Homography3) -> Homography3:
    m = canonical_matrix(h.matrix)
    if abs(np.linalg.det(m)) <= EPS:
        raise SingularMatrix("|det| <= 1e-12")
    return Homography3(canonical_matrix(np.linalg.inv(m)), h.frame)


def apply_points(h, pts) -> np.ndarray:
    """Map an (N, 2) array of points; ``h`` may be a Homography3 or a 3x3 array."""
    m = h.matrix if isinstance(h, Homography3) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    d = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + m[2, 2]
    if np.any(np.abs(d) <= EPS):
        raise PointAtInfinity("point maps to infinity")
    x = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / d
    y = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / d
    return np.stack([x, y], axis=1)


def apply_point(h, p) -> tuple[float, float]:
    x, y = apply_points(h, [p])[0]
    return float(x), float(y)


def patch_corners(width: float, height: float) -> np.ndarray:
    """Corner quad of a ``width x height`` image: TL, TR, BR, BL (positive signed area)."""
    return np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d <= EPS:
        raise DegenerateConfiguration("points are coincident")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_configuration(pts: np.ndarray, tol: float = 1e-9):
    t = _hartley(pts)
    q = pts @ t[:2, :2].T + t[:2, 2]
    n = len(q)
    dist = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=-1)
    if np.any(dist[np.triu_indices(n, 1)] <= tol):
        raise DegenerateConfiguration("duplicate points")
    if n == 4:
        for i, j, k in itertools.combinations(range(4), 3):
            a, b = q[j] - q[i], q[k] - q[i]
            if abs(a[0] * b[1] - a[1] * b[0]) <= tol:
                raise DegenerateConfiguration("three collinear points")
    elif np.linalg.svd(q - q.mean(axis=0), compute_uv=False)[-1] <= tol:
        raise DegenerateConfiguration("all points collinear")


def dlt_solve(src, dst) -> Homography3:
    """Least-squares homography with ``dst ~ H @ src`` from >= 4 correspondences.

    Both point sets are Hartley-normalized before building the 2N x 9 system,
    whose null vector is taken from the SVD.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same number of points")
    if len(src) < 4:
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {len(src)}")
    _check_configuration(src)
    _check_configuration(dst)

    t1, t2 = _hartley(src), _hartley(dst)
    p = src @ t1[:2, :2].T + t1[:2, 2]
    q = dst @ t2[:2, :2].T + t2[:2, 2]
    n = len(p)
    a = np.zeros((2 * n, 9))
    x, y, u, v = p[:, 0], p[:, 1], q[:, 0], q[:, 1]
    a[0::2, 0], a[0::2, 1], a[0::2, 2] = x, y, 1.0
    a[0::2, 6], a[0::2, 7], a[0::2, 8] = -u * x, -u * y, -u
    a[1::2, 3], a[1::2, 4], a[1::2, 5] = x, y, 1.0
    a[1::2, 6], a[1::2, 7], a[1::2, 8] = -v * x, -v * y, -v
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.solve(t2, hn @ t1)
    return Homography3(canonical_matrix(h), Frame.PIXEL)


def offsets_to_homography(base, offsets) -> Homography3:
    """4-point parameterization to 3x3: the homography moving ``base`` to ``base + offsets``."""
    base = np.asarray(base, dtype=np.float64).reshape(4, 2)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    return dlt_solve(base, base + offsets)


def mean_corner_error(h_est, h_gt, corners) -> float:
    """Mean Euclidean distance between the corners mapped by each homography."""
    a = apply_points(h_est, corners)
    b = apply_points(h_gt, corners)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def format_homography(h: Homography3) -> str:
    """Nine row-major numbers, canonical (last = 1), whitespace separated."""
    return " ".join(repr(float(v)) for v in canonical_matrix(h.matrix).ravel())


def parse_homography(text: str, frame: Frame = Frame.PIXEL) -> Homography3:
    vals = [float(t) for t in text.split()]
    if len(vals) != 9:
        raise ValueError(f"expected 9 numbers, got {len(vals)}")
    return canonicalize(Homography3(vals, frame))
