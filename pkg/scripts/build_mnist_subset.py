"""Convert the digit bundle of the npm ``mnist`` package (v1.1.0) to IDX files.

The bundle holds 10,000 MNIST digits as intensities scaled to [0, 1] and
rounded to three decimals, which recovers the original bytes exactly after
multiplying by 255 and rounding. Items are shuffled with a fixed seed so any
prefix is roughly class balanced.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/
"""

import argparse
import json
from pathlib import Path

import numpy as np

from shapegraph.dataio import write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=1998)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.array(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        pix = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(images))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(
        args.out_dir / "mnist10k-images-idx3-ubyte.gz",
        args.out_dir / "mnist10k-labels-idx1-ubyte.gz",
        images[order],
        labels[order],
    )
    print(f"wrote {len(images)} digits, per class {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
