import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ssim_scalar
from shapegraph.dataio import GrayImage, TransformSpec, synthetic_shapes
from shapegraph.dgcnn import DgcnnModel, ModelConfig
from shapegraph.evalret import (
    SSIM_C1,
    DimMismatch,
    KTooLarge,
    RetrievalIndex,
    invariance_suite,
    map_at_k,
    ssim,
    ssim_matrix,
    ssim_retrieval_map,
    svg_line_chart,
    write_embeddings_csv,
    write_report,
)
from shapegraph.sampler import SamplerConfig


# --- MAP ------------------------------------------------------------------

def test_map_hand_fixture():
    # query 0 (label 0) neighbours by distance: 1(0) 2(1) 3(0) -> [1,0,1]
    # query 4 (label 2) neighbours: 5(1) 6(1) 7(3) -> [0,0,0]
    emb = np.array([[0.0], [1.0], [2.0], [3.0], [100.0], [101.0], [102.0], [103.0]])
    labels = np.array([0, 0, 1, 0, 2, 1, 1, 3])
    rep = map_at_k(RetrievalIndex(emb, labels), [0, 4], 3)
    assert rep.map_at[3] == (2 / 3 + 0) / 2
    assert list(rep.per_query[3]) == [2 / 3, 0.0]


def test_map_perfect_clusters():
    emb = np.repeat(np.arange(4.0)[:, None] * 100, 12, axis=0) + np.random.default_rng(0).random((48, 1))
    labels = np.repeat(np.arange(4), 12)
    rep = map_at_k(RetrievalIndex(emb, labels), None, [10, 11])
    assert rep.map_at == {10: 1.0, 11: 1.0}


def test_map_ties_prefer_lower_id():
    emb = np.zeros((4, 2))
    labels = np.array([0, 1, 0, 0])
    rep = map_at_k(RetrievalIndex(emb, labels), [0], 1)
    assert rep.map_at[1] == 0.0  # item 1 wins the tie
    rep = map_at_k(RetrievalIndex(emb, labels, ids=np.array([0, 3, 1, 2])), [0], 1)
    assert rep.map_at[1] == 1.0  # row 2 now carries the lowest competing id


def test_map_query_order_invariant(rng):
    emb = rng.standard_normal((30, 5))
    labels = rng.integers(0, 3, 30)
    idx = RetrievalIndex(emb, labels)
    q = rng.permutation(30)
    a = map_at_k(idx, q, 5).map_at[5]
    b = map_at_k(idx, q[::-1], 5).map_at[5]
    assert a == pytest.approx(b, abs=1e-15)
    assert 0.0 <= a <= 1.0


def test_map_k_too_large():
    with pytest.raises(KTooLarge):
        map_at_k(RetrievalIndex(np.zeros((5, 2)), np.zeros(5)), None, 5)


def test_index_rejects_nonfinite():
    with pytest.raises(ValueError):
        RetrievalIndex(np.array([[np.nan]]), np.array([0]))


# --- SSIM -----------------------------------------------------------------

def test_ssim_identical_is_one(rng):
    a = rng.integers(0, 256, (12, 10)).astype(np.uint8)
    assert ssim(a, a) == 1.0


def test_ssim_constant_extremes():
    a = GrayImage(np.zeros((9, 9), np.uint8))
    b = GrayImage(np.full((9, 9), 255, np.uint8))
    assert ssim(a, b) == pytest.approx(SSIM_C1 / (255**2 + SSIM_C1), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_scalar_oracle(seed):
    r = np.random.default_rng(seed)
    a = r.integers(0, 256, (8, 8))
    b = r.integers(0, 256, (8, 8))
    assert abs(ssim(a, b) - ssim_scalar(a, b)) < 1e-6


def test_ssim_oracle_on_digit(mnist):
    a, b = mnist.images[0], mnist.images[1]
    assert abs(ssim(a, b) - ssim_scalar(a.data, b.data)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, 256, (2, 10, 11))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_dim_mismatch():
    with pytest.raises(DimMismatch):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_ssim_matrix_matches_pairwise(rng):
    imgs = [rng.integers(0, 256, (9, 8)) for _ in range(5)]
    m = ssim_matrix(imgs)
    for i in range(5):
        for j in range(5):
            assert m[i, j] == pytest.approx(ssim(imgs[i], imgs[j]), abs=1e-9)
    assert np.array_equal(m, m.T)


def test_ssim_retrieval_identical_images():
    img = np.random.default_rng(2).integers(0, 256, (10, 10))
    rep = ssim_retrieval_map([img] * 6, np.zeros(6, int), [1, 5])
    assert rep.map_at == {1: 1.0, 5: 1.0}


# --- suite and reports ----------------------------------------------------

def test_invariance_suite_exact_rows(mnist):
    items = mnist.subset(range(40))
    model = DgcnnModel.init(ModelConfig(num_classes=10, k=3, widths=(16, 16), hidden=32), seed=0)
    specs = [
        TransformSpec(translate_px=9, rng_seed=5, name="translation"),
        TransformSpec(invert=True, name="inversion"),
    ]
    rows = invariance_suite(model, items.images, items.labels, specs, SamplerConfig(s=12))
    by = {r.name: r for r in rows}
    assert by["inversion"].n == 40 and by["inversion"].delta == 0.0
    assert by["translation"].n + by["translation"].excluded == 40
    assert by["translation"].excluded > 0 and by["translation"].delta == 0.0


def test_report_and_exports(tmp_path):
    write_report(tmp_path / "r.csv", {"config_hash": "abc", "k": "10,20"}, ["k", "map"], [(10, 0.5), (20, 0.25)])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:3] == ["# config_hash: abc", "# k: 10,20", "k,map"]
    assert lines[3] == "10,0.500000"
    idx = RetrievalIndex(np.array([[0.5, 1.0], [2.0, 3.0]]), np.array([1, 0]))
    write_embeddings_csv(tmp_path / "e.csv", idx)
    assert (tmp_path / "e.csv").read_text().splitlines()[1] == "0,1,0.5,1"
    svg_line_chart(tmp_path / "c.svg", {"a": [(10, 0.5), (20, 0.7)]})
    assert (tmp_path / "c.svg").read_text().startswith("<svg")


def test_synthetic_corpus():
    d = synthetic_shapes(3, size=48, seed=1)
    assert len(d) == 18 and d.class_count == 6
    assert np.array_equal(np.bincount(d.labels), [3] * 6)
    again = synthetic_shapes(3, size=48, seed=1)
    assert all(a == b for a, b in zip(d.images, again.images))
    dark_ground = [np.median(im.data) < 128 for im in d.images]
    assert any(dark_ground) and not all(dark_ground)
