"""Synthetic patch-pair datasets with ground-truth normalized homographies.

A sample is cut from a grayscale source image: a square patch at a random
rectangle, the same rectangle cut from the image warped by a random
4-corner perturbation, the perturbation's normalized homography, and
patch_a warped by that homography (the photometric target).
"""
from __future__ import annotations

import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import CorruptDataset, EmptyCorpus, ResampleExhausted, UnreadableImage
from .imageio import from_u8, quantize, read_image, to_u8
from .warp import warp_image, warp_patch

MASK64 = (1 << 64) - 1
MAX_ATTEMPTS = 100
SAMPLES_PER_IMAGE = 3


@dataclass(frozen=True)
class DataConfig:
    image_w: int = 320
    image_h: int = 240
    patch: int = 128
    margin: int = 32
    max_offset: float = 32.0
    min_area: float = 1000.0

    @classmethod
    def full(cls) -> DataConfig:
        return cls()

    @classmethod
    def desk(cls) -> DataConfig:
        """The full-scale geometry scaled by 1/4; normalized homographies keep the same law."""
        return cls(image_w=80, image_h=60, patch=32, margin=8, max_offset=8.0,
                   min_area=1000.0 / 16)

    @classmethod
    def for_patch(cls, patch: int) -> DataConfig:
        if patch == 128:
            return cls.full()
        s = patch / 128
        return cls(image_w=round(320 * s), image_h=round(240 * s), patch=patch,
                   margin=round(32 * s), max_offset=32.0 * s, min_area=1000.0 * s * s)


@dataclass
class SampleRecord:
    patch_a: np.ndarray
    patch_b: np.ndarray
    hbar: np.ndarray
    patch_a_t: np.ndarray
    rect: tuple
    offsets: np.ndarray
    image_index: int = 0


# -- seeding ---------------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def sample_seed(master_seed: int, image_index: int, sample_index: int) -> int:
    return splitmix64((master_seed ^ ((image_index * 2654435761 + sample_index) & MASK64)) & MASK64)


def texture_seed(master_seed: int, image_index: int) -> int:
    return splitmix64((master_seed * 0x9E3779B97F4A7C15 + image_index + 1) & MASK64)


# -- source images -----------------------------------------------------------------

def _resize_axis(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Pixel-center aligned bilinear resize with edge clamping."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def to_gray(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        return raw
    if raw.ndim == 3 and raw.shape[2] in (1, 2):
        return raw[..., 0]
    if raw.ndim == 3 and raw.shape[2] >= 3:
        return 0.299 * raw[..., 0] + 0.587 * raw[..., 1] + 0.114 * raw[..., 2]
    raise UnreadableImage(f"unsupported image shape {raw.shape}")


def prepare_image(raw: np.ndarray, width: int = 320, height: int = 240) -> np.ndarray:
    """Rec.601 luma then bilinear resize to the working resolution."""
    gray = to_gray(raw)
    if gray.shape[0] < 8 or gray.shape[1] < 8:
        raise UnreadableImage(f"image too small: {gray.shape}")
    return np.clip(resize_bilinear(gray, width, height), 0.0, 1.0)


def synth_texture(seed: int, w: int = 320, h: int = 240, waves: int = 16) -> np.ndarray:
    """Band-limited random texture: a sum of oriented sinusoids scaled to [0, 1].

    Spatial frequencies are drawn relative to the image width (1 to 8 cycles
    across it) so the texture looks the same at every working resolution.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    xx /= w
    yy /= w
    img = np.zeros((h, w))
    for _ in range(waves):
        cycles = rng.uniform(1.0, 8.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.sin(2 * np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def load_image_dir(directory, width: int = 320, height: int = 240) -> list:
    """Prepared images for every PGM/PNG/JPEG file in ``directory``, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise EmptyCorpus(f"{directory} is not a directory")
    files = sorted(p for p in d.iterdir()
                   if p.suffix.lower() in (".pgm", ".png", ".jpg", ".jpeg"))
    if not files:
        raise EmptyCorpus(f"no images in {directory}")
    return [prepare_image(read_image(p), width, height) for p in files]


def synthetic_corpus(count: int, master_seed: int, cfg: DataConfig) -> list:
    return [synth_texture(texture_seed(master_seed, i), cfg.image_w, cfg.image_h)
            for i in range(count)]


# -- samples ---------------------------------------------------------------------

def _quad_ok(quad: np.ndarray, min_area: float) -> bool:
    nxt = np.roll(quad, -1, axis=0)
    area = 0.5 * np.sum(quad[:, 0] * nxt[:, 1] - nxt[:, 0] * quad[:, 1])
    e1 = nxt - quad
    e2 = np.roll(e1, -1, axis=0)
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    convex = np.all(cross > 0) or np.all(cross < 0)
    return bool(convex and abs(area) >= min_area)


def draw_geometry(rng: np.random.Generator, cfg: DataConfig):
    """Draw a legal rectangle and non-degenerate corner offsets.

    Returns ``(x0, y0, offsets)`` with offsets shaped ``(4, 2)`` in TL, TR, BR,
    BL order.
    """
    s = cfg.patch
    corners = geo.patch_corners(s, s)
    for _ in range(MAX_ATTEMPTS):
        x0 = int(rng.integers(cfg.margin, cfg.image_w - cfg.margin - s + 1))
        y0 = int(rng.integers(cfg.margin, cfg.image_h - cfg.margin - s + 1))
        off = rng.uniform(-cfg.max_offset, cfg.max_offset, size=(4, 2))
        if _quad_ok(corners + off, cfg.min_area):
            return x0, y0, off
    raise ResampleExhausted(f"{MAX_ATTEMPTS} degenerate perturbations in a row")


def hbar_from_offsets(offsets, patch: int) -> np.ndarray:
    """Eight free elements of the normalized patch-frame homography."""
    h = geo.offsets_to_homography(geo.patch_corners(patch, patch), offsets)
    return geo.normalize_homography(h, geo.PixelNormalizer(patch, patch)).free


def generate_sample(img: np.ndarray, rng: np.random.Generator, cfg: DataConfig = DataConfig(),
                    offsets=None, image_index: int = 0) -> SampleRecord:
    """One training tuple; pass ``offsets`` to force a perturbation instead of drawing it."""
    img = quantize(img)
    if img.shape != (cfg.image_h, cfg.image_w):
        raise ValueError(f"image is {img.shape}, expected {(cfg.image_h, cfg.image_w)}")
    s = cfg.patch
    if offsets is None:
        x0, y0, off = draw_geometry(rng, cfg)
    else:
        x0 = int(rng.integers(cfg.margin, cfg.image_w - cfg.margin - s + 1))
        y0 = int(rng.integers(cfg.margin, cfg.image_h - cfg.margin - s + 1))
        off = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    h_patch = geo.offsets_to_homography(geo.patch_corners(s, s), off)
    shift = geo.translation(x0, y0)
    h_img = geo.compose(shift, geo.compose(h_patch, geo.invert(shift)))
    image_b = warp_image(img, h_img.matrix)
    hbar = geo.normalize_homography(h_patch, geo.PixelNormalizer(s, s))
    patch_a = img[y0:y0 + s, x0:x0 + s].copy()
    patch_b = quantize(image_b[y0:y0 + s, x0:x0 + s])
    patch_a_t = quantize(warp_patch(patch_a, hbar.matrix))
    return SampleRecord(patch_a, patch_b, hbar.free, patch_a_t, (x0, y0),
                        off.ravel().copy(), image_index)


# -- datasets ----------------------------------------------------------------------

@dataclass
class Dataset:
    """Columnar storage of many records; patches are kept as 8-bit arrays."""

    patch_a: np.ndarray
    patch_b: np.ndarray
    patch_a_t: np.ndarray
    hbar: np.ndarray
    offsets: np.ndarray
    rect: np.ndarray
    image_index: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.hbar)

    @property
    def side(self) -> int:
        return self.patch_a.shape[-1]

    @classmethod
    def from_records(cls, records, meta=None) -> Dataset:
        records = list(records)
        if not records:
            raise EmptyCorpus("no records")
        return cls(
            patch_a=np.stack([to_u8(r.patch_a) for r in records]),
            patch_b=np.stack([to_u8(r.patch_b) for r in records]),
            patch_a_t=np.stack([to_u8(r.patch_a_t) for r in records]),
            hbar=np.stack([np.asarray(r.hbar, dtype=np.float64) for r in records]),
            offsets=np.stack([np.asarray(r.offsets, dtype=np.float64) for r in records]),
            rect=np.array([r.rect for r in records], dtype=np.int64),
            image_index=np.array([r.image_index for r in records], dtype=np.int64),
            meta=dict(meta or {}),
        )

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(from_u8(self.patch_a[i]), from_u8(self.patch_b[i]),
                            self.hbar[i].copy(), from_u8(self.patch_a_t[i]),
                            tuple(int(v) for v in self.rect[i]), self.offsets[i].copy(),
                            int(self.image_index[i]))

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.patch_a[idx], self.patch_b[idx], self.patch_a_t[idx],
                       self.hbar[idx], self.offsets[idx], self.rect[idx],
                       self.image_index[idx], dict(self.meta))

    def float_patches(self, idx=None, dtype=np.float32):
        sel = slice(None) if idx is None else np.asarray(idx)
        scale = dtype(1.0 / 255.0) if dtype is np.float32 else 1.0 / 255.0
        return tuple(arr[sel].astype(dtype) * scale
                     for arr in (self.patch_a, self.patch_b, self.patch_a_t))

    def has_target(self) -> np.ndarray:
        return ~np.any(np.isnan(self.hbar), axis=1)


def generate_dataset(images, samples_per_image: int = SAMPLES_PER_IMAGE, master_seed: int = 0,
                     cfg: DataConfig = DataConfig(), threads: int = 1) -> Dataset:
    """Deterministic dataset: record order is (image_index, sample_index)."""
    images = list(images)
    if not images:
        raise EmptyCorpus("no source images")

    def per_image(i):
        return [generate_sample(images[i], np.random.default_rng(sample_seed(master_seed, i, k)),
                                cfg, image_index=i)
                for k in range(samples_per_image)]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(per_image, range(len(images))))
    else:
        chunks = [per_image(i) for i in range(len(images))]
    meta = {"master_seed": master_seed, "samples_per_image": samples_per_image}
    return Dataset.from_records([r for c in chunks for r in c], meta)


MAGIC = b"HSTN"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, len(ds), ds.side))
    for i in range(len(ds)):
        buf.write(ds.patch_a[i].tobytes())
        buf.write(ds.patch_b[i].tobytes())
        buf.write(ds.patch_a_t[i].tobytes())
        buf.write(ds.hbar[i].astype("<f8").tobytes())
        buf.write(ds.offsets[i].astype("<f8").tobytes())
        buf.write(struct.pack("<IIQ", int(ds.rect[i, 0]), int(ds.rect[i, 1]),
                              int(ds.image_index[i])))
    return buf.getvalue()


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptDataset(f"cannot read {path}: {exc}") from exc
    return dataset_from_bytes(data)


def dataset_from_bytes(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise CorruptDataset("file shorter than header")
    magic, version, count, side = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptDataset(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptDataset(f"unsupported version {version}")
    if count == 0 or side == 0:
        raise CorruptDataset("empty dataset")
    npx = side * side
    rec_size = 3 * npx + 16 * 8 + 16
    if len(data) != _HEADER.size + count * rec_size:
        raise CorruptDataset(f"expected {count} records of {rec_size} bytes, "
                             f"file has {len(data) - _HEADER.size} payload bytes")
    dt = np.dtype([("a", "u1", npx), ("b", "u1", npx), ("t", "u1", npx),
                   ("hbar", "<f8", 8), ("off", "<f8", 8), ("rect", "<u4", 2), ("img", "<u8")])
    rec = np.frombuffer(data, dt, count, _HEADER.size)
    return Dataset(
        patch_a=rec["a"].reshape(count, side, side).copy(),
        patch_b=rec["b"].reshape(count, side, side).copy(),
        patch_a_t=rec["t"].reshape(count, side, side).copy(),
        hbar=rec["hbar"].astype(np.float64),
        offsets=rec["off"].astype(np.float64),
        rect=rec["rect"].astype(np.int64),
        image_index=rec["img"].astype(np.int64),
    )


# -- statistics ----------------------------------------------------------------------

ELEMENT_NAMES = ("h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32")
HIST_BINS = 64


@dataclass
class DatasetStats:
    count: int
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    edges: np.ndarray   # (8, bins + 1)
    counts: np.ndarray  # (8, bins)


def dataset_stats(hbar, bins: int = HIST_BINS) -> DatasetStats:
    """Per-element moments and histograms over the observed range of each element.

    Accepts a :class:`Dataset` or an ``(N, 8)`` array. Population standard
    deviation (ddof 0). A zero-width range puts every count in the first bin.
    """
    h = hbar.hbar if isinstance(hbar, Dataset) else np.asarray(hbar, dtype=np.float64)
    h = h[~np.any(np.isnan(h), axis=1)]
    if h.ndim != 2 or h.shape[1] != 8 or len(h) == 0:
        raise CorruptDataset("need at least one record with 8 target elements")
    lo, hi = h.min(axis=0), h.max(axis=0)
    edges = np.empty((8, bins + 1))
    counts = np.zeros((8, bins), dtype=np.int64)
    for k in range(8):
        if hi[k] > lo[k]:
            counts[k], edges[k] = np.histogram(h[:, k], bins=bins, range=(lo[k], hi[k]))
        else:
            edges[k] = lo[k]
            counts[k, 0] = len(h)
    return DatasetStats(len(h), h.mean(axis=0), h.std(axis=0), lo, hi, edges, counts)


def stats_csv(stats: DatasetStats) -> str:
    lines = ["element,bin_lo,bin_hi,count"]
    for k, name in enumerate(ELEMENT_NAMES):
        for b in range(stats.counts.shape[1]):
            lines.append(f"{name},{stats.edges[k, b]!r},{stats.edges[k, b + 1]!r},"
                         f"{stats.counts[k, b]}")
    return "\n".join(lines) + "\n"


def stats_summary(stats: DatasetStats) -> str:
    rows = [f"{'element':>7} {'mean':>10} {'std':>10} {'min':>10} {'max':>10}"]
    for k, name in enumerate(ELEMENT_NAMES):
        rows.append(f"{name:>7} {stats.mean[k]:10.5f} {stats.std[k]:10.5f} "
                    f"{stats.min[k]:10.5f} {stats.max[k]:10.5f}")
    return "\n".join(rows)


def stats_svg(stats: DatasetStats) -> str:
    """A 2x4 panel of per-element histograms as a standalone SVG document."""
    pw, ph, pad = 220, 150, 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{4 * pw}" height="{2 * ph}" '
           f'font-family="sans-serif" font-size="11">']
    for k, name in enumerate(ELEMENT_NAMES):
        ox, oy = (k % 4) * pw, (k // 4) * ph
        c = stats.counts[k]
        top = max(int(c.max()), 1)
        bw = (pw - 2 * pad) / len(c)
        out.append(f'<text x="{ox + pad}" y="{oy + 14}">{name}  mean={stats.mean[k]:.4f} '
                   f'std={stats.std[k]:.4f}</text>')
        for b, n in enumerate(c):
            if n == 0:
                continue
            hgt = (ph - 2 * pad) * n / top
            out.append(f'<rect x="{ox + pad + b * bw:.2f}" y="{oy + ph - pad - hgt:.2f}" '
                       f'width="{bw:.2f}" height="{hgt:.2f}" fill="steelblue"/>')
        out.append(f'<text x="{ox + pad}" y="{oy + ph - 12}">{stats.min[k]:.3f}</text>')
        out.append(f'<text x="{ox + pw - pad}" y="{oy + ph - 12}" text-anchor="end">'
                   f'{stats.max[k]:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def identity_baseline(max_offset: float) -> float:
    """Expected corner error of the identity predictor for uniform corner offsets."""
    return max_offset * (math.sqrt(2.0) + math.asinh(1.0)) / 3.0
