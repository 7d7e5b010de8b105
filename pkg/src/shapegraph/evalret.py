"""Retrieval scoring (MAP@k), the SSIM baseline, and the transformation suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import GrayImage, TransformSpec, apply_draw, draw_transform, transform_rng, translation_clips
from .dgcnn import DgcnnModel, predict
from .sampler import SamplerConfig, sample_shape

SSIM_WINDOW = 7
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


class KTooLarge(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalIndex:
    embeddings: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels)
        if emb.ndim != 2 or len(emb) != len(labels):
            raise ValueError(f"embeddings {emb.shape} and labels {labels.shape} disagree")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        ids = np.arange(len(emb)) if self.ids is None else np.asarray(self.ids)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.labels)


@dataclass
class MapReport:
    map_at: dict = field(default_factory=dict)  # k -> MAP
    per_query: dict = field(default_factory=dict)  # k -> precision@k per query


def _ranked_neighbours(score_rows: np.ndarray, queries: np.ndarray, kmax: int, larger_is_closer: bool) -> np.ndarray:
    """Top-kmax candidates per query row, self excluded, ties to the lower index."""
    s = -score_rows if larger_is_closer else score_rows.copy()
    s[np.arange(len(queries)), queries] = np.inf
    return np.argsort(s, axis=1, kind="stable")[:, :kmax]


def _map_from_neighbours(labels: np.ndarray, queries: np.ndarray, nbrs: np.ndarray, ks: Sequence[int]) -> MapReport:
    hits = labels[nbrs] == labels[queries][:, None]
    report = MapReport()
    for k in ks:
        prec = hits[:, :k].mean(axis=1)
        report.per_query[k] = prec
        report.map_at[k] = float(prec.mean()) if len(prec) else float("nan")
    return report


def _check_k(ks: Sequence[int], n: int):
    if min(ks) < 1 or max(ks) >= n:
        raise KTooLarge(f"k values {list(ks)} need 1 <= k < N={n}")


def map_at_k(index: RetrievalIndex, queries: Iterable[int] | None = None, k: int | Sequence[int] = 10) -> MapReport:
    """Mean over queries of the fraction of the k nearest items sharing the query label.

    Neighbours are ranked by l2 distance between embeddings; the query
    itself is never a candidate and equal distances favour the lower id.
    By default every item is a query.
    """
    ks = [k] if np.isscalar(k) else list(k)
    n = len(index)
    _check_k(ks, n)
    queries = np.arange(n) if queries is None else np.asarray(list(queries), dtype=np.int64)
    order = np.argsort(index.ids, kind="stable")
    emb = index.embeddings[order]
    labels = index.labels[order]
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    q = pos[queries]
    kmax = max(ks)
    e_dim = emb.shape[1]
    step = max(1, (1 << 23) // max(1, n * e_dim))
    nbrs = []
    for lo in range(0, len(q), step):
        qs = q[lo : lo + step]
        diff = emb[qs, None, :] - emb[None, :, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        nbrs.append(_ranked_neighbours(d2, qs, kmax, larger_is_closer=False))
    nbrs = np.concatenate(nbrs) if nbrs else np.zeros((0, kmax), np.int64)
    return _map_from_neighbours(labels, q, nbrs, ks)


# --------------------------------------------------------------------------
# SSIM

def _pix(img) -> np.ndarray:
    return np.asarray(img.data if isinstance(img, GrayImage) else img, dtype=np.float64)


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all stride-1 uniform windows fully inside the image."""
    pa, pb = _pix(a), _pix(b)
    if pa.shape != pb.shape:
        raise DimMismatch(f"ssim: {pa.shape} vs {pb.shape}")
    win = min(window, *pa.shape)
    wa = sliding_window_view(pa, (win, win))
    wb = sliding_window_view(pb, (win, win))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def ssim_matrix(images: Sequence, window: int = SSIM_WINDOW) -> np.ndarray:
    """All-pairs SSIM for equally sized images, one window position at a time."""
    stack = np.stack([_pix(im) for im in images])
    n, h, w = stack.shape
    win = min(window, h, w)
    flat = stack.reshape(n, h * w)
    grid = np.arange(h * w).reshape(h, w)
    offsets = grid[:win, :win].ravel()
    total = np.zeros((n, n))
    count = 0
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            cols = flat[:, offsets + grid[y, x]]
            mu = cols.mean(axis=1)
            var = (cols * cols).mean(axis=1) - mu * mu
            cov = cols @ cols.T / cols.shape[1] - np.outer(mu, mu)
            num = (2 * np.outer(mu, mu) + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (mu[:, None] ** 2 + mu[None, :] ** 2 + SSIM_C1) * (var[:, None] + var[None, :] + SSIM_C2)
            total += num / den
            count += 1
    out = total / count
    return (out + out.T) / 2


def ssim_retrieval_map(images: Sequence, labels, k: int | Sequence[int] = 10) -> MapReport:
    """MAP@k when neighbours are the images with the highest SSIM to the query."""
    ks = [k] if np.isscalar(k) else list(k)
    labels = np.asarray(labels)
    _check_k(ks, len(labels))
    sim = ssim_matrix(images)
    q = np.arange(len(labels))
    return _map_from_neighbours(labels, q, _ranked_neighbours(sim, q, max(ks), larger_is_closer=True), ks)


# --------------------------------------------------------------------------
# invariance suite

def standard_transform_specs(seed: int = 0) -> list[TransformSpec]:
    """Scale in (0.2, 1], rotation within +-90 deg, shifts up to 9 px, scale with rotation, and inversion."""
    return [
        TransformSpec(scale_lo=0.2, scale_hi=1.0, rng_seed=seed, name="scale"),
        TransformSpec(rotation_deg=90.0, rng_seed=seed, name="rotation"),
        TransformSpec(translate_px=9, rng_seed=seed, name="translation"),
        TransformSpec(rotation_deg=90.0, scale_lo=0.2, scale_hi=1.0, rng_seed=seed, name="scale+rotation"),
        TransformSpec(invert=True, rng_seed=seed, name="inversion"),
    ]


@dataclass
class InvarianceRow:
    name: str
    n: int
    excluded: int
    clean_acc: float
    acc: float

    @property
    def delta(self) -> float:
        return self.acc - self.clean_acc


def transform_dataset(images: Sequence[GrayImage], spec: TransformSpec) -> tuple[list, np.ndarray]:
    """Transform every image; also flags items whose translation would clip ink."""
    out, clipped = [], np.zeros(len(images), dtype=bool)
    for i, img in enumerate(images):
        d = draw_transform(spec, transform_rng(spec, i))
        staged = apply_draw(img, replace(d, dx=0, dy=0, invert=False))
        clipped[i] = (d.dx or d.dy) and translation_clips(staged, d.dx, d.dy)
        out.append(apply_draw(img, d))
    return out, clipped


def invariance_suite(
    model: DgcnnModel,
    images: Sequence[GrayImage],
    labels,
    specs: Sequence[TransformSpec],
    sampler: SamplerConfig,
    clean_clouds: np.ndarray | None = None,
    exclude_clipped: bool = True,
) -> list[InvarianceRow]:
    """Accuracy of the full extract -> sample -> classify pipeline per transformation.

    Items whose random translation would push ink out of the frame are left
    out (when ``exclude_clipped``) and the clean accuracy in the same row is
    computed on the same remaining items, so deltas compare like with like.
    """
    labels = np.asarray(labels)
    if clean_clouds is None:
        clean_clouds = np.stack([sample_shape(im, sampler).points for im in images]).astype(np.float32)
    clean_pred = predict(model, clean_clouds).argmax(axis=1)
    rows = []
    for spec in specs:
        moved, clipped = transform_dataset(images, spec)
        keep = ~clipped if exclude_clipped else np.ones(len(images), dtype=bool)
        idx = np.flatnonzero(keep)
        clouds = np.stack([sample_shape(moved[i], sampler).points for i in idx]).astype(np.float32)
        pred = predict(model, clouds).argmax(axis=1)
        rows.append(
            InvarianceRow(
                name=spec.name or repr(spec),
                n=len(idx),
                excluded=int((~keep).sum()),
                clean_acc=float((clean_pred[idx] == labels[idx]).mean()),
                acc=float((pred == labels[idx]).mean()),
            )
        )
    return rows


# --------------------------------------------------------------------------
# report files

def write_report(path, header: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """CSV preceded by ``# key: value`` lines describing the run."""
    with open(path, "w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def write_embeddings_csv(path, index: RetrievalIndex) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"e{i}" for i in range(index.embeddings.shape[1])])
        for i, lab, e in zip(index.ids, index.labels, index.embeddings):
            w.writerow([int(i), int(lab)] + [f"{v:.7g}" for v in e])


def svg_line_chart(path, series: dict, xlabel: str = "k", ylabel: str = "MAP", width: int = 480, height: int = 320) -> None:
    """Minimal SVG line chart; ``series`` maps a name to a list of (x, y) points."""
    pad = 48
    xs = [x for pts in series.values() for x, _ in pts]
    if not xs:
        return
    x0, x1 = min(xs), max(xs)
    x1 = x1 if x1 > x0 else x0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" text-anchor="middle">{ylabel}</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 6}" y="{sy(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick}</text>')
    for x in sorted(set(xs)):
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x}</text>')
    for i, (name, pts) in enumerate(series.items()):
        c = colours[i % len(colours)]
        path_pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path_pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" fill="{c}" text-anchor="end" font-size="11">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
