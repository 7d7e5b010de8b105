from pathlib import Path

import numpy as np
import pytest

from shapegraph.dataio import GrayImage

DATA = Path(__file__).resolve().parents[1] / "data"
MNIST_IMAGES = DATA / "mnist10k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist10k-labels-idx1-ubyte.gz"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist():
    from shapegraph.dataio import read_idx

    return read_idx(MNIST_IMAGES, MNIST_LABELS)


def blob_image(h=28, w=28, bright=True, seed=0, margin=10):
    """A random compact blob away from the border, on a constant background."""
    r = np.random.default_rng(seed)
    pix = np.zeros((h, w), dtype=np.uint8)
    cy, cx = h // 2, w // 2
    for _ in range(6):
        y = cy + r.integers(-3, 4)
        x = cx + r.integers(-3, 4)
        pix[y - 2 : y + 2, x - 1 : x + 2] = r.integers(150, 256)
    pix[cy, cx] = 255
    if not bright:
        pix = 255 - pix
    return GrayImage(pix)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
