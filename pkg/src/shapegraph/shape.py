"""Shape/background segmentation with Otsu's threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import GrayImage


class DegenerateHistogram(ValueError):
    pass


class EmptyForeground(ValueError):
    pass


@dataclass(frozen=True)
class PixelSet:
    """Foreground pixel coordinates as an (n, 2) int array of (x=col, y=row)."""

    coords: np.ndarray
    source_dims: tuple  # (width, height)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, PixelSet):
            return NotImplemented
        return self.source_dims == other.source_dims and bool(np.array_equal(self.coords, other.coords))

    __hash__ = None


def otsu_threshold(img: GrayImage) -> int:
    """Return the threshold t in [0, 255) maximising between-class variance.

    Pixels <= t form class 0. The objective n0*n1*(mu0 - mu1)**2 is compared
    as an exact rational so equal scores really tie; ties go to the smaller t.
    """
    hist = np.bincount(img.data.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("image has a single intensity value")
    counts = [int(v) for v in np.cumsum(hist)]
    sums = [int(v) for v in np.cumsum(hist * np.arange(256))]
    n_total, s_total = counts[-1], sums[-1]

    # omega0*omega1*(mu0-mu1)^2 = (s0*n1 - s1*n0)^2 / (N^2 * n0 * n1); N^2 is common
    best_t, best_num, best_den = 0, 0, 1
    for t in range(255):
        n0 = counts[t]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s0 = sums[t]
        num = (s0 * n1 - (s_total - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def foreground_mask(img: GrayImage) -> np.ndarray:
    """Boolean mask of the minority Otsu class (the darker class on an exact split)."""
    t = otsu_threshold(img)
    dark = img.data <= t
    n_dark = int(dark.sum())
    n_light = dark.size - n_dark
    return dark if n_dark <= n_light else ~dark


def extract_shape(img: GrayImage) -> PixelSet:
    """Foreground coordinates in row-major scan order.

    Taking the minority class as foreground makes the result identical for
    an image and its inversion (unless the split is exactly half/half).
    """
    mask = foreground_mask(img)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyForeground("minority class is empty")
    return PixelSet(np.stack([xs, ys], axis=1), (img.width, img.height))
