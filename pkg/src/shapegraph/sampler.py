"""Sparse point clouds from pixel sets via mini-batch k-means.

The pipeline for one image is::

    extract_shape -> canonical frame -> minibatch_kmeans -> normalize_cloud

The canonical frame centres the pixel coordinates exactly (integer
arithmetic for pixel input) and divides by the largest radius before
clustering. The k-means seed is derived from the quantised canonical
coordinates, so translated, inverted or coordinate-scaled copies of a shape
run the same k-means on the same numbers.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import BadMagic, GrayImage, LabeledDataset, Truncated, pack_meta, unpack_meta
from .shape import PixelSet, extract_shape

CACHE_MAGIC = b"SPC1"
_QUANT = 1e9  # canonical coordinates are snapped to a 1e-9 grid


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    s: int = 20
    batch_size: int = 32
    iters: int | None = None  # None -> 100 for s <= 50, else 300
    seed: int | None = None  # None -> content-derived

    def __post_init__(self):
        if self.s < 1 or self.batch_size < 1 or (self.iters is not None and self.iters < 1):
            raise ValueError(f"invalid sampler config {self}")

    @property
    def n_iters(self) -> int:
        if self.iters is not None:
            return self.iters
        return 100 if self.s <= 50 else 300


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (S, 2) float64
    normalized: bool = False
    degenerate: bool = False

    def __len__(self):
        return len(self.points)


def _as_points(pixels) -> np.ndarray:
    if isinstance(pixels, PixelSet):
        return pixels.coords
    return np.asarray(pixels).reshape(-1, 2)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick k initial centres from ``points`` with D^2 weighting."""
    n = len(points)
    centers = np.empty((k, 2), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def minibatch_kmeans(pixels, cfg: SamplerConfig, rng: np.random.Generator | int | None = None) -> PointCloud:
    """Mini-batch k-means (Sculley 2010) returning ``cfg.s`` centres.

    Each batch is assigned to the current centres, then every centre moves
    with per-centre learning rate 1/n_c, n_c its cumulative assignment count.
    Applying that update to the m batch points of a centre in turn equals
    one running-mean step ``c <- (n*c + sum(x)) / (n + m)``, which is what
    is computed here.

    After the last batch every centre is set once to the mean of the full
    set of points nearest to it.

    With no more points than ``cfg.s``, the points themselves are returned,
    padded with copies of their mean up to ``cfg.s`` rows.
    """
    pts = _as_points(pixels).astype(np.float64)
    n = len(pts)
    if n == 0:
        raise EmptyInput("no points to sample")
    k = cfg.s
    if n <= k:
        pad = np.repeat(pts.mean(axis=0, keepdims=True), k - n, axis=0)
        return PointCloud(np.concatenate([pts, pad]))

    if rng is None:
        rng = cfg.seed if cfg.seed is not None else content_seed(pts)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    centers = kmeans_plusplus(pts, k, rng)
    counts = np.zeros(k, dtype=np.float64)
    draws = rng.integers(n, size=(cfg.n_iters, cfg.batch_size))
    for rows in draws:
        batch = pts[rows]
        d2 = (batch[:, None, 0] - centers[None, :, 0]) ** 2 + (batch[:, None, 1] - centers[None, :, 1]) ** 2
        assign = d2.argmin(axis=1)
        m = np.bincount(assign, minlength=k).astype(np.float64)
        sx = np.bincount(assign, weights=batch[:, 0], minlength=k)
        sy = np.bincount(assign, weights=batch[:, 1], minlength=k)
        hit = m > 0
        new_counts = counts[hit] + m[hit]
        centers[hit, 0] = (counts[hit] * centers[hit, 0] + sx[hit]) / new_counts
        centers[hit, 1] = (counts[hit] * centers[hit, 1] + sy[hit]) / new_counts
        counts[hit] = new_counts

    # closing full-data centroid update: exact mean for s=1, never raises SSE
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    m = np.bincount(assign, minlength=k)
    hit = m > 0
    for dim in range(2):
        centers[hit, dim] = np.bincount(assign, weights=pts[:, dim], minlength=k)[hit] / m[hit]
    return PointCloud(centers)


def sse(points: np.ndarray, centers: np.ndarray) -> float:
    """Within-cluster sum of squared distances to the nearest centre."""
    points = np.asarray(points, dtype=np.float64)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def normalize_cloud(cloud: PointCloud | np.ndarray) -> PointCloud:
    """Centre at the column mean and scale the farthest point to norm 1."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    pts = pts.astype(np.float64)
    centred = pts - pts.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius == 0:
        return PointCloud(np.zeros_like(centred), normalized=True, degenerate=True)
    return PointCloud(centred / radius, normalized=True)


def canonical_frame(pixels) -> np.ndarray:
    """Centre, scale to unit max radius and snap to the 1e-9 grid.

    Integer input is centred as ``n*c - sum(c)`` so the result does not
    depend on where the shape sits in the image.
    """
    pts = _as_points(pixels)
    if np.issubdtype(pts.dtype, np.integer):
        pts = pts.astype(np.int64)
        centred = (len(pts) * pts - pts.sum(axis=0)).astype(np.float64)
    else:
        pts = pts.astype(np.float64)
        centred = pts - pts.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius > 0:
        centred = centred / radius
    return np.rint(centred * _QUANT) / _QUANT


def content_seed(points: np.ndarray) -> int:
    q = np.rint(np.asarray(points, dtype=np.float64) * _QUANT).astype("<i8")
    return int.from_bytes(hashlib.blake2b(q.tobytes(), digest_size=8).digest(), "little")


def sample_points(pixels, cfg: SamplerConfig) -> PointCloud:
    """Cluster a pixel set (or raw (n, 2) coordinates) into a normalised cloud."""
    if len(_as_points(pixels)) == 0:
        raise EmptyInput("no points to sample")
    frame = canonical_frame(pixels)
    seed = cfg.seed if cfg.seed is not None else content_seed(frame)
    return normalize_cloud(minibatch_kmeans(frame, cfg, np.random.default_rng(seed)))


def sample_shape(img: GrayImage, cfg: SamplerConfig) -> PointCloud:
    return sample_points(extract_shape(img), cfg)


def _sample_chunk(args):
    images, cfg = args
    return np.stack([sample_shape(im, cfg).points for im in images])


def sample_dataset(dataset: LabeledDataset, cfg: SamplerConfig, jobs: int = 1) -> np.ndarray:
    """Sample every image; returns a (n, S, 2) float32 array in dataset order."""
    images = list(dataset.images)
    if jobs <= 1 or len(images) < 64:
        return _sample_chunk((images, cfg)).astype(np.float32)
    chunks = [images[i : i + 256] for i in range(0, len(images), 256)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_sample_chunk, [(c, cfg) for c in chunks]))
    return np.concatenate(parts).astype(np.float32)


# --------------------------------------------------------------------------
# SPC1 cache: "SPC1", u32 count, u32 s, then per item u32 label + s*2 f32, little-endian

def write_cloud_cache(path, clouds: np.ndarray, labels, meta: dict | None = None) -> None:
    clouds = np.asarray(clouds, dtype="<f4")
    labels = np.asarray(labels, dtype="<u4")
    if clouds.ndim != 3 or clouds.shape[2] != 2:
        raise ValueError(f"clouds must be (count, s, 2), got {clouds.shape}")
    if len(labels) != len(clouds):
        raise ValueError("one label per cloud required")
    count, s, _ = clouds.shape
    rec = np.dtype([("label", "<u4"), ("pts", "<f4", (s, 2))])
    body = np.empty(count, dtype=rec)
    body["label"] = labels
    body["pts"] = clouds
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", count, s))
        fh.write(body.tobytes())
        fh.write(pack_meta(meta))


def read_cloud_cache(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise Truncated(f"{path}: {len(raw)} bytes is shorter than the header")
    if raw[:4] != CACHE_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}, expected {CACHE_MAGIC!r}")
    count, s = struct.unpack("<II", raw[4:12])
    rec = np.dtype([("label", "<u4"), ("pts", "<f4", (s, 2))])
    if len(raw) - 12 < count * rec.itemsize:
        raise Truncated(f"{path}: body holds {len(raw) - 12} bytes, need {count * rec.itemsize}")
    body = np.frombuffer(raw, dtype=rec, count=count, offset=12)
    unpack_meta(raw[12 + count * rec.itemsize :], path)
    return body["pts"].astype(np.float32), body["label"].astype(np.int64)


def read_cache_meta(path) -> dict | None:
    raw = Path(path).read_bytes()
    count, s = struct.unpack("<II", raw[4:12])
    return unpack_meta(raw[12 + count * (4 + 8 * s) :], path)
