"""
Accuracy under test-time transformations
========================================

Loads a checkpoint (default ``desk_model.dgw`` from train_desk_model.py)
and reruns extraction, sampling and classification on transformed copies
of the 1K test digits. Translation and inversion change nothing by
construction; rescaling only changes the pixels that survive resampling;
rotation has to be absorbed by what the network learned.
"""

import sys
from pathlib import Path

from shapegraph.dataio import TransformSpec, read_idx
from shapegraph.dgcnn import load_model
from shapegraph.evalret import invariance_suite, standard_transform_specs
from shapegraph.sampler import SamplerConfig

ckpt = sys.argv[1] if len(sys.argv) > 1 else "desk_model.dgw"
model = load_model(ckpt)

DATA = Path(__file__).resolve().parents[1] / "data"
ds = read_idx(DATA / "mnist10k-images-idx3-ubyte.gz", DATA / "mnist10k-labels-idx1-ubyte.gz")
test_ds = ds.subset(range(5000, 6000))

specs = standard_transform_specs(seed=0) + [TransformSpec(scale_lo=0.5, scale_hi=1.0, name="scale[0.5,1]")]
rows = invariance_suite(model, test_ds.images, test_ds.labels, specs, SamplerConfig(s=20))

# shifted digits whose ink would leave the 28x28 frame are skipped, and the
# clean accuracy beside them is measured on the same items
print(f"{'transform':16s} {'n':>5s} {'clean':>7s} {'acc':>7s} {'delta':>7s}")
for r in rows:
    print(f"{r.name:16s} {r.n:5d} {r.clean_acc:7.4f} {r.acc:7.4f} {r.delta:+7.4f}")
