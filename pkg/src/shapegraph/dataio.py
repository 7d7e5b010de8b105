"""Dataset readers (IDX, PGM/PBM, CSV manifests) and image transformations."""

from __future__ import annotations

import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(Exception):
    """Base class for malformed or missing input data."""


class BadMagic(DataError):
    pass


class CountMismatch(DataError):
    pass


class Truncated(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class MissingFile(DataError):
    pass


class EmptyManifest(DataError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image stored as a (height, width) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class LabeledDataset:
    images: tuple
    labels: np.ndarray
    class_count: int
    class_names: tuple = field(default=())

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise EmptyManifest("dataset is empty")
        if len(labels) != len(self.images):
            raise CountMismatch(f"{len(self.images)} images but {len(labels)} labels")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        labels.setflags(write=False)
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.images)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = [int(i) for i in indices]
        return LabeledDataset(
            tuple(self.images[i] for i in idx), self.labels[idx], self.class_count, self.class_names
        )


# --------------------------------------------------------------------------
# trailing metadata for binary artifacts

META_MAGIC = b"META"


def pack_meta(meta: dict | None) -> bytes:
    """Optional block appended after a binary payload: "META", u32 length, UTF-8 JSON."""
    if not meta:
        return b""
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return META_MAGIC + struct.pack("<I", len(body)) + body


def unpack_meta(tail: bytes, path="<bytes>") -> dict | None:
    """Parse the bytes after a payload; empty means no metadata."""
    if not tail:
        return None
    if tail[:4] != META_MAGIC or len(tail) < 8:
        raise Truncated(f"{path}: {len(tail)} unexpected bytes after the payload")
    (n,) = struct.unpack_from("<I", tail, 4)
    if len(tail) != 8 + n:
        raise Truncated(f"{path}: metadata block claims {n} bytes, {len(tail) - 8} present")
    return json.loads(tail[8:].decode())


# --------------------------------------------------------------------------
# IDX

def _open(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(raw: bytes, n_words: int, path) -> tuple:
    if len(raw) < 4 * n_words:
        raise Truncated(f"{path}: header is {len(raw)} bytes, need {4 * n_words}")
    return struct.unpack(">" + "I" * n_words, raw[: 4 * n_words])


def read_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file into a (count, rows, cols) uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    magic, count, rows, cols = _read_header(raw, 4, path)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"{path}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = count * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise Truncated(f"{path}: {len(body)} pixel bytes, header promises {need}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    magic, count = _read_header(raw, 2, path)
    if magic != IDX_LABEL_MAGIC:
        raise BadMagic(f"{path}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    body = raw[8:]
    if len(body) < count:
        raise Truncated(f"{path}: {len(body)} label bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8, count=count).copy()


def read_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair (MNIST container) as a LabeledDataset.

    ``class_count`` defaults to ``max(label) + 1``. Gzipped files are read
    transparently when the name ends in ``.gz``.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatch(f"image count {len(images)} != label count {len(labels)}")
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(tuple(GrayImage(im) for im in images), labels, class_count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    if len(images) != len(labels):
        raise CountMismatch(f"image count {len(images)} != label count {len(labels)}")
    count, rows, cols = images.shape
    img_bytes = struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols) + images.tobytes()
    lbl_bytes = struct.pack(">II", IDX_LABEL_MAGIC, count) + labels.tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lbl_bytes)):
        path = Path(path)
        if path.suffix == ".gz":
            # mtime=0 keeps the archive byte-reproducible
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)


# --------------------------------------------------------------------------
# PGM / PBM

def _pnm_tokens(raw: bytes, n: int, pos: int, path) -> tuple[list[int], int]:
    """Read ``n`` whitespace-separated integer header tokens, skipping comments."""
    out = []
    size = len(raw)
    while len(out) < n:
        while pos < size and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < size and raw[pos : pos + 1] == b"#":
            while pos < size and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < size and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise Truncated(f"{path}: header ended early")
        try:
            out.append(int(raw[start:pos]))
        except ValueError:
            raise UnsupportedFormat(f"{path}: bad header token {raw[start:pos]!r}") from None
    return out, pos


def read_pgm(path) -> GrayImage:
    """Decode a P1/P2/P4/P5 portable any-map into a GrayImage.

    Bitmaps follow the PBM convention (1 = ink) and are mapped to 0 for ink
    and 255 for the background.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    magic = raw[:2]
    if magic not in (b"P1", b"P2", b"P4", b"P5"):
        raise UnsupportedFormat(f"{path}: magic {magic!r} is not P1/P2/P4/P5")
    bitmap = magic in (b"P1", b"P4")
    (width, height), pos = _pnm_tokens(raw, 2, 2, path)
    maxval = 1
    if not bitmap:
        (maxval,), pos = _pnm_tokens(raw, 1, pos, path)
        if not 0 < maxval <= 255:
            raise UnsupportedFormat(f"{path}: maxval {maxval} outside 1..255")
    if width < 1 or height < 1:
        raise UnsupportedFormat(f"{path}: bad dimensions {width}x{height}")
    n = width * height

    if magic == b"P5":
        body = raw[pos + 1 :]
        if len(body) < n:
            raise Truncated(f"{path}: {len(body)} pixel bytes, need {n}")
        pix = np.frombuffer(body, dtype=np.uint8, count=n).reshape(height, width)
    elif magic == b"P4":
        row_bytes = (width + 7) // 8
        body = raw[pos + 1 :]
        if len(body) < row_bytes * height:
            raise Truncated(f"{path}: {len(body)} bitmap bytes, need {row_bytes * height}")
        packed = np.frombuffer(body, dtype=np.uint8, count=row_bytes * height).reshape(height, row_bytes)
        bits = np.unpackbits(packed, axis=1)[:, :width]
        pix = np.where(bits == 1, 0, 255).astype(np.uint8)
    elif magic == b"P2":
        vals = raw[pos:].split()
        if len(vals) < n:
            raise Truncated(f"{path}: {len(vals)} samples, need {n}")
        pix = np.array([int(v) for v in vals[:n]], dtype=np.int64).reshape(height, width)
        if pix.max(initial=0) > maxval:
            raise UnsupportedFormat(f"{path}: sample exceeds maxval {maxval}")
    else:
        # P1 samples may be packed without separators
        digits = [c for c in raw[pos:].decode("ascii", "replace") if c in "01"]
        if len(digits) < n:
            raise Truncated(f"{path}: {len(digits)} bits, need {n}")
        bits = np.array([int(c) for c in digits[:n]], dtype=np.uint8).reshape(height, width)
        pix = np.where(bits == 1, 0, 255).astype(np.uint8)

    if not bitmap and maxval != 255:
        pix = np.rint(pix.astype(np.float64) * 255.0 / maxval)
    return GrayImage(pix.astype(np.uint8))


def write_pgm(path, img: GrayImage) -> None:
    header = f"P5 {img.width} {img.height} 255\n".encode()
    Path(path).write_bytes(header + img.data.tobytes())


# --------------------------------------------------------------------------
# manifests

def read_manifest_dir(manifest) -> LabeledDataset:
    """Load images listed in a ``path,label`` CSV.

    Paths are relative to the manifest's directory; label strings get ids in
    order of first appearance.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise MissingFile(str(manifest))
    root = manifest.parent
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise EmptyManifest(f"{manifest}: expected header 'path,label'")
        rows = list(reader)
    if not rows:
        raise EmptyManifest(f"{manifest}: no rows")

    names: dict[str, int] = {}
    images, labels = [], []
    for lineno, row in enumerate(rows, start=2):
        img_path = root / row["path"]
        if not img_path.exists():
            raise MissingFile(f"{manifest}:{lineno}: {row['path']} not found")
        images.append(read_pgm(img_path))
        labels.append(names.setdefault(row["label"], len(names)))
    return LabeledDataset(tuple(images), np.array(labels), len(names), tuple(names))


# --------------------------------------------------------------------------
# transforms

@dataclass(frozen=True)
class TransformSpec:
    """Ranges for the random test-time transformations.

    Rotation is drawn from [-rotation_deg, rotation_deg], each translation
    axis from the integers in [-translate_px, translate_px], and the scale
    factor from (scale_lo, scale_hi].
    """

    rotation_deg: float = 0.0
    translate_px: int = 0
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    invert: bool = False
    rng_seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.scale_lo <= 0 or self.scale_hi < self.scale_lo:
            raise ValueError(f"invalid scale range ({self.scale_lo}, {self.scale_hi}]")
        if self.rotation_deg < 0 or self.translate_px < 0:
            raise ValueError("rotation and translation ranges must be non-negative")


@dataclass(frozen=True)
class TransformDraw:
    angle_deg: float
    dx: int
    dy: int
    scale: float
    invert: bool


def draw_transform(spec: TransformSpec, rng: np.random.Generator) -> TransformDraw:
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg) if spec.rotation_deg else 0.0
    t = spec.translate_px
    dx, dy = (int(v) for v in rng.integers(-t, t + 1, size=2)) if t else (0, 0)
    if spec.scale_hi > spec.scale_lo:
        # uniform on (lo, hi]: flip the half-open [0, 1) draw
        scale = spec.scale_hi - (spec.scale_hi - spec.scale_lo) * rng.random()
    else:
        scale = spec.scale_hi
    return TransformDraw(float(angle), dx, dy, float(scale), spec.invert)


def transform_rng(spec: TransformSpec, index: int) -> np.random.Generator:
    """Per-item generator so that draws depend only on (seed, item index)."""
    return np.random.default_rng([spec.rng_seed, index])


def modal_intensity(img: GrayImage) -> int:
    return int(np.argmax(np.bincount(img.data.ravel(), minlength=256)))


def shift_image(pix: np.ndarray, dx: int, dy: int, fill: int) -> np.ndarray:
    """Integer translation; content leaving the frame is dropped."""
    h, w = pix.shape
    out = np.full_like(pix, fill)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = pix[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return out


def translation_clips(img: GrayImage, dx: int, dy: int) -> bool:
    """True when shifting by (dx, dy) pushes a non-background pixel out of frame."""
    ys, xs = np.nonzero(img.data != modal_intensity(img))
    if len(xs) == 0:
        return False
    return bool(
        xs.min() + dx < 0 or xs.max() + dx >= img.width or ys.min() + dy < 0 or ys.max() + dy >= img.height
    )


def apply_draw(img: GrayImage, draw: TransformDraw) -> GrayImage:
    pix = img.data
    fill = modal_intensity(img)
    if draw.angle_deg != 0.0 or draw.scale != 1.0:
        h, w = pix.shape
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        a = math.radians(draw.angle_deg)
        # output (row, col) -> input (row, col); positive angle turns content counter-clockwise
        rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        matrix = rot / draw.scale
        offset = centre - matrix @ centre
        warped = ndimage.affine_transform(
            pix.astype(np.float64), matrix, offset=offset, order=1, mode="constant", cval=float(fill)
        )
        pix = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    if draw.dx or draw.dy:
        pix = shift_image(pix, draw.dx, draw.dy, fill)
    if draw.invert:
        pix = 255 - pix
    return GrayImage(pix)


def apply_transform(img: GrayImage, spec: TransformSpec, rng: np.random.Generator | int) -> GrayImage:
    """Apply one random draw of ``spec`` to ``img``.

    ``rng`` is a Generator or an item index; an index derives the generator
    from ``spec.rng_seed`` so the result is reproducible per item. The order
    is scale and rotation about the centre (bilinear, modal-intensity fill),
    then integer translation, then inversion. The canvas size never changes.
    """
    if not isinstance(rng, np.random.Generator):
        rng = transform_rng(spec, int(rng))
    return apply_draw(img, draw_transform(spec, rng))


def invert(img: GrayImage) -> GrayImage:
    return GrayImage(255 - img.data)


# --------------------------------------------------------------------------
# synthetic line drawings

SHAPE_CLASSES = ("circle", "triangle", "square", "plus", "star", "zigzag")


def _outline(name: str) -> list[np.ndarray]:
    """Polylines of a unit-size outline centred on the origin."""
    def ring(n, r=1.0, phase=0.0):
        a = phase + np.linspace(0, 2 * np.pi, n + 1)
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    if name == "circle":
        return [ring(48)]
    if name == "triangle":
        return [ring(3, phase=np.pi / 2)]
    if name == "square":
        return [ring(4, phase=np.pi / 4)]
    if name == "plus":
        return [np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([[0.0, -1.0], [0.0, 1.0]])]
    if name == "star":
        a = np.pi / 2 + np.arange(11) * 4 * np.pi / 5
        return [np.stack([np.cos(a), np.sin(a)], axis=1)]
    if name == "zigzag":
        xs = np.linspace(-1, 1, 5)
        return [np.stack([xs, np.array([-0.6, 0.6, -0.6, 0.6, -0.6])], axis=1)]
    raise ValueError(f"unknown shape class {name!r}")


def draw_polylines(lines: Sequence[np.ndarray], size: int, thickness: float) -> np.ndarray:
    """Boolean ink mask of the given (x, y) polylines stroked with ``thickness``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    best = np.full(len(grid), np.inf)
    for pts in lines:
        for p, q in zip(pts[:-1], pts[1:]):
            d = q - p
            t = np.clip(((grid - p) @ d) / max(d @ d, 1e-12), 0.0, 1.0)
            best = np.minimum(best, np.hypot(*(grid - (p + t[:, None] * d)).T))
    return (best <= thickness / 2).reshape(size, size)


def synthetic_shapes(n_per_class: int, size: int = 64, seed: int = 0,
                     classes: Sequence[str] = SHAPE_CLASSES) -> LabeledDataset:
    """Line drawings of simple shapes with random pose, stroke and polarity.

    Each drawing gets a random rotation, a radius between 15% and 45% of the
    canvas, a random position that keeps it inside the frame, a stroke width
    of 1.5 to 3.5 px, and either dark ink on a light ground or the reverse.
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_per_class):
        for label, name in enumerate(classes):
            radius = rng.uniform(0.15, 0.45) * size
            width = rng.uniform(1.5, 3.5)
            a = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            room = max(0.0, size / 2 - radius - width)
            centre = size / 2 - 0.5 + rng.uniform(-room, room, size=2)
            lines = [centre + radius * (pts @ rot.T) for pts in _outline(name)]
            ink = draw_polylines(lines, size, width)
            ground, stroke = int(rng.integers(200, 256)), int(rng.integers(0, 60))
            if rng.random() < 0.5:
                ground, stroke = 255 - ground, 255 - stroke
            images.append(GrayImage(np.where(ink, stroke, ground).astype(np.uint8)))
            labels.append(label)
    return LabeledDataset(tuple(images), np.array(labels), len(classes), tuple(classes))
