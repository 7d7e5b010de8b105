"""
From a digit image to a point cloud
===================================

Walks one MNIST digit through thresholding, shape extraction and
mini-batch k-means sampling, then shows that shifting or inverting the
image leaves the sampled cloud unchanged to the last bit.
"""

from pathlib import Path

import numpy as np

from shapegraph.dataio import TransformSpec, apply_transform, invert, read_idx
from shapegraph.sampler import SamplerConfig, sample_shape
from shapegraph.shape import extract_shape, foreground_mask, otsu_threshold

DATA = Path(__file__).resolve().parents[1] / "data"
ds = read_idx(DATA / "mnist10k-images-idx3-ubyte.gz", DATA / "mnist10k-labels-idx1-ubyte.gz")
img = ds.images[0]
print("label:", ds.labels[0], "size:", img.data.shape)

# Otsu picks the cut maximising between-class variance; the smaller class
# is the shape, whichever side of the cut it lies on
t = otsu_threshold(img)
mask = foreground_mask(img)
print(f"threshold {t}, foreground pixels {mask.sum()}")
for row in mask[::2]:
    print("".join("#" if v else "." for v in row))

# the shape is the set of foreground pixel coordinates
shape = extract_shape(img)
print("pixel set:", shape.coords.shape)

# twenty k-means centres, centred and scaled into the unit disc
cloud = sample_shape(img, SamplerConfig(s=20))
print("cloud radius:", np.sqrt((cloud.points**2).sum(1)).max())


def plot(points, size=21):
    grid = [["."] * size for _ in range(size)]
    for x, y in points:
        grid[int(round((y + 1) * (size - 1) / 2))][int(round((x + 1) * (size - 1) / 2))] = "o"
    print("\n".join(" ".join(r) for r in grid))


plot(cloud.points)

# shift by a few pixels (nothing leaves the frame) and invert the intensities
moved = apply_transform(img, TransformSpec(translate_px=3, rng_seed=1), 0)
for name, other in (("shifted", moved), ("inverted", invert(img))):
    same = np.array_equal(sample_shape(other, SamplerConfig(s=20)).points, cloud.points)
    print(f"{name} image gives the identical cloud: {same}")
