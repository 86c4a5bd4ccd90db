import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def hbar_oracle():
    return json.loads((FIXTURES / "hbar_oracle.json").read_text())


def four_point_h(src, dst):
    """Exact homography through four correspondences via a plain 8x8 solve (h33 = 1)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    return np.append(np.linalg.solve(np.array(a, float), np.array(b, float)), 1.0).reshape(3, 3)


def random_homography(rng, w=128, h=128, spread=0.25):
    """Pixel-frame H moving the image corners by up to ``spread`` of the image size."""
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], float)
    off = rng.uniform(-spread, spread, (4, 2)) * [w, h]
    return four_point_h(src, src + off)


def random_hbar(rng, spread=0.25):
    """Normalized-frame homography with moderate perspective."""
    return _norm(random_homography(rng, 64, 64, spread), 64)


def _norm(hp, side):
    m = np.array([[2 / side, 0, -1], [0, 2 / side, -1], [0, 0, 1.0]])
    h = m @ hp @ np.linalg.inv(m)
    return h / h[2, 2]


def naive_bilinear(src, grid):
    """Per-pixel loop reference: zero outside, pixel centers at integer + 0.5."""
    hs, ws = src.shape
    out = np.zeros(grid.shape[:2])
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            x = (grid[i, j, 0] + 1) * ws / 2 - 0.5
            y = (grid[i, j, 1] + 1) * hs / 2 - 0.5
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            acc = 0.0
            for yy in (y0, y0 + 1):
                for xx in (x0, x0 + 1):
                    if 0 <= xx < ws and 0 <= yy < hs:
                        acc += (1 - abs(x - xx)) * (1 - abs(y - yy)) * src[yy, xx]
            out[i, j] = acc
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


def central_diff(f, x, idx, h=1e-6):
    """Central-difference derivatives of scalar ``f`` w.r.t. ``x.flat[idx]`` (x modified in place)."""
    out = []
    for k in idx:
        old = x.flat[k]
        x.flat[k] = old + h
        fp = f()
        x.flat[k] = old - h
        fm = f()
        x.flat[k] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)
