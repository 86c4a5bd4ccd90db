"""Differentiable spatial-transformer warping.

Images are float arrays shaped ``(H, W)`` or ``(B, H, W)``. Sampling grids hold
normalized source coordinates ``(u, v)`` in ``[-1, 1]`` and are shaped
``(h, w, 2)`` or ``(B, h, w, 2)``. Normalized -1 and +1 sit on the outer image
edges; output pixels are evaluated at their centers.

Every function here is batched over a leading axis and works in whatever
float dtype it is given, so gradient checks can run in float64 while
training runs in float32.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, PointAtInfinity
from .geometry import EPS, Homography3

ImagePatch = np.ndarray


def _matrix(g) -> np.ndarray:
    return g.matrix if isinstance(g, Homography3) else np.asarray(g)


def target_coords(out_w: int, out_h: int, dtype=np.float64):
    """Normalized coordinates of output pixel centers, as two 1-D axes."""
    tx = (2.0 * (np.arange(out_w, dtype=np.float64) + 0.5) / out_w - 1.0).astype(dtype)
    ty = (2.0 * (np.arange(out_h, dtype=np.float64) + 0.5) / out_h - 1.0).astype(dtype)
    return tx, ty


def _projective(m, out_w, out_h):
    tx, ty = target_coords(out_w, out_h, m.dtype)
    tx, ty = tx[None, :], ty[:, None]
    m = m[..., None, None]
    x = m[..., 0, 0, :, :] * tx + m[..., 0, 1, :, :] * ty + m[..., 0, 2, :, :]
    y = m[..., 1, 0, :, :] * tx + m[..., 1, 1, :, :] * ty + m[..., 1, 2, :, :]
    d = m[..., 2, 0, :, :] * tx + m[..., 2, 1, :, :] * ty + m[..., 2, 2, :, :]
    return x, y, d


def grid_generate(g, out_w: int, out_h: int) -> np.ndarray:
    """Projective action of ``g`` on every output pixel's normalized target coordinate."""
    m = _matrix(g)
    if m.dtype.kind != "f":
        m = m.astype(np.float64)
    x, y, d = _projective(m, out_w, out_h)
    if np.any(np.abs(d) <= EPS):
        raise PointAtInfinity("grid denominator vanishes")
    return np.stack([x / d, y / d], axis=-1)


def grid_generate_backward(g, out_w: int, out_h: int, grad_grid: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. all nine entries of ``g`` given d(loss)/d(grid)."""
    m = _matrix(g)
    x, y, d = _projective(m, out_w, out_h)
    u, v = x / d, y / d
    gu = grad_grid[..., 0] / d
    gv = grad_grid[..., 1] / d
    gw = -(gu * u + gv * v)
    tx, ty = target_coords(out_w, out_h, m.dtype)
    out = np.empty(m.shape, dtype=np.result_type(m, grad_grid))
    for r, gr in enumerate((gu, gv, gw)):
        out[..., r, 0] = (gr * tx[None, :]).sum(axis=(-2, -1))
        out[..., r, 1] = (gr * ty[:, None]).sum(axis=(-2, -1))
        out[..., r, 2] = gr.sum(axis=(-2, -1))
    return out


def _flatten(src, grid):
    src = np.asarray(src)
    grid = np.asarray(grid)
    single = src.ndim == 2
    if single:
        src = src[None]
    if grid.ndim == 3:
        grid = np.broadcast_to(grid[None], (src.shape[0],) + grid.shape)
    if grid.shape[0] != src.shape[0]:
        raise DimensionMismatch("batch sizes of image and grid differ")
    return src, grid, single


def _corners(src, grid):
    _, hs, ws = src.shape
    px = (grid[..., 0] + 1.0) * (0.5 * ws) - 0.5
    py = (grid[..., 1] + 1.0) * (0.5 * hs) - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return x0, y0, fx, fy


def _taps(x0, y0, hs, ws):
    """Clipped indices and validity masks for the four bilinear neighbours."""
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < ws) & (yi >= 0) & (yi < hs)
            yield dx, dy, np.clip(xi, 0, ws - 1), np.clip(yi, 0, hs - 1), ok


def bilinear_sample(src: ImagePatch, grid: np.ndarray) -> ImagePatch:
    """Bilinear interpolation of ``src`` at every grid location, zero outside the image."""
    src, grid, single = _flatten(src, grid)
    b, hs, ws = src.shape
    x0, y0, fx, fy = _corners(src, grid)
    bi = np.arange(b).reshape((b,) + (1,) * (grid.ndim - 2))
    out = np.zeros(grid.shape[:-1], dtype=np.result_type(src, grid))
    for dx, dy, xi, yi, ok in _taps(x0, y0, hs, ws):
        w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
        out += np.where(ok, w * src[bi, yi, xi], 0.0)
    return out[0] if single else out


def bilinear_sample_backward(src: ImagePatch, grid: np.ndarray, upstream: np.ndarray):
    """Exact gradients of :func:`bilinear_sample` w.r.t. the image and the grid.

    Returns ``(grad_src, grad_grid)`` with the shapes of ``src`` and ``grid``.
    """
    single = np.asarray(src).ndim == 2
    src, grid, _ = _flatten(src, grid)
    upstream = np.asarray(upstream).reshape(grid.shape[:-1])
    b, hs, ws = src.shape
    x0, y0, fx, fy = _corners(src, grid)
    bi = np.broadcast_to(np.arange(b).reshape((b,) + (1,) * (grid.ndim - 2)), x0.shape)
    dtype = np.result_type(src, grid, upstream)
    grad_src = np.zeros(src.shape, dtype=dtype)
    dpx = np.zeros(x0.shape, dtype=dtype)
    dpy = np.zeros(x0.shape, dtype=dtype)
    for dx, dy, xi, yi, ok in _taps(x0, y0, hs, ws):
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        val = np.where(ok, src[bi, yi, xi], 0.0)
        np.add.at(grad_src, (bi[ok], yi[ok], xi[ok]), (wx * wy * upstream)[ok])
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        dpx += sx * wy * val
        dpy += sy * wx * val
    grad_grid = np.stack([dpx * upstream * (0.5 * ws), dpy * upstream * (0.5 * hs)], axis=-1)
    if single:
        return grad_src[0], grad_grid[0]
    return grad_src, grad_grid


def _inverse(m: np.ndarray) -> np.ndarray:
    return np.linalg.inv(m)


def warp_patch(src: ImagePatch, h_norm) -> ImagePatch:
    """Warp ``src`` by a normalized homography into the destination frame.

    With ``x_b ~ H x_a``, the output pixel at ``x`` takes the value of ``src``
    at ``H^-1 x``; warping patch_a by H_ba therefore lands in patch_b's frame.
    """
    src = np.asarray(src)
    m = _matrix(h_norm)
    if m.dtype.kind != "f":
        m = m.astype(np.float64)
    grid = grid_generate(_inverse(m), src.shape[-1], src.shape[-2])
    return bilinear_sample(src, grid)


def warp_patch_backward(src: ImagePatch, h_norm, upstream: np.ndarray):
    """Gradients of :func:`warp_patch` w.r.t. ``src`` and the nine entries of ``h_norm``."""
    src = np.asarray(src)
    m = _matrix(h_norm)
    inv = _inverse(m)
    w, h = src.shape[-1], src.shape[-2]
    grid = grid_generate(inv, w, h)
    grad_src, grad_grid = bilinear_sample_backward(src, grid, upstream)
    grad_inv = grid_generate_backward(inv, w, h, grad_grid)
    inv_t = np.swapaxes(inv, -1, -2)
    grad_h = -(inv_t @ grad_inv @ inv_t)
    return grad_src, grad_h


def warp_image(img: np.ndarray, h_pixel) -> np.ndarray:
    """Full-frame warp with a pixel-frame homography; output has the input's size."""
    img = np.asarray(img)
    hgt, wid = img.shape[-2:]
    m = _matrix(h_pixel).astype(np.float64)
    mn = np.array([[2.0 / wid, 0, -1.0], [0, 2.0 / hgt, -1.0], [0, 0, 1.0]])
    mn_inv = np.array([[wid / 2.0, 0, wid / 2.0], [0, hgt / 2.0, hgt / 2.0], [0, 0, 1.0]])
    return warp_patch(img, mn @ m @ mn_inv)


def l1_photometric(a: ImagePatch, b: ImagePatch):
    """Mean absolute difference and its subgradient w.r.t. ``a`` (0 at ties).

    Batched inputs yield one loss per leading index, each averaged over its own
    pixels.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    diff = a - b
    n = a.shape[-1] * a.shape[-2]
    loss = np.abs(diff).sum(axis=(-2, -1)) / n
    grad = np.sign(diff) / n
    if a.ndim == 2:
        return float(loss), grad
    return loss, grad
