import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from shapegraph.dataio import (
    BadMagic, CountMismatch, EmptyManifest, GrayImage, MissingFile, Truncated, TransformSpec,
    UnsupportedFormat, apply_transform, invert, modal_intensity, read_idx, read_manifest_dir,
    read_pgm, shift_image, translation_clips, write_idx, write_pgm,
)

from conftest import MNIST_IMAGES, MNIST_LABELS, blob_image


def test_mnist_bundle_loads(mnist):
    assert len(mnist) == 10000
    assert mnist.class_count == 10
    assert mnist.images[0].data.shape == (28, 28)
    assert set(np.unique(mnist.labels)) == set(range(10))


def test_single_zero_image(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((1, 28, 28)), [0])
    ds = read_idx(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 1 and not ds.images[0].data.any()


def test_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 10, 2, 2) + bytes(40))
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 9) + bytes(9))
    with pytest.raises(CountMismatch):
        read_idx(tmp_path / "i", tmp_path / "l")


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + bytes(1))
    (tmp_path / "bad").write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + bytes(4))
    with pytest.raises(BadMagic):
        read_idx(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "short").write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes(3))
    with pytest.raises(Truncated):
        read_idx(tmp_path / "short", tmp_path / "l")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(Truncated):
        read_idx(tmp_path / "tiny", tmp_path / "l")


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9))), st.booleans())
def test_idx_round_trip(tmp_path_factory, pix, gz):
    d = tmp_path_factory.mktemp("idx")
    suffix = ".gz" if gz else ""
    labels = np.arange(len(pix)) % 3
    write_idx(d / f"i{suffix}", d / f"l{suffix}", pix, labels)
    ds = read_idx(d / f"i{suffix}", d / f"l{suffix}")
    assert np.array_equal(np.stack([im.data for im in ds.images]), pix)
    assert np.array_equal(ds.labels, labels)


def test_pgm_p5(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 10, 200, 255]))
    img = read_pgm(tmp_path / "a.pgm")
    assert img.data.tolist() == [[0, 10], [200, 255]]


def test_pgm_p2_with_comment(tmp_path):
    (tmp_path / "a.pgm").write_text("P2\n# made by hand\n3 1\n255\n1 2 3\n")
    assert read_pgm(tmp_path / "a.pgm").data.tolist() == [[1, 2, 3]]


def test_pgm_low_maxval_rescaled(tmp_path):
    (tmp_path / "a.pgm").write_text("P2 2 1 15 0 15\n")
    assert read_pgm(tmp_path / "a.pgm").data.tolist() == [[0, 255]]


def test_pbm_ink_is_dark(tmp_path):
    (tmp_path / "a.pbm").write_text("P1\n3 1\n1 0 1\n")
    assert read_pgm(tmp_path / "a.pbm").data.tolist() == [[0, 255, 0]]
    # P4: 10 bits wide, padded to two bytes per row
    (tmp_path / "b.pbm").write_bytes(b"P4\n10 1\n" + bytes([0b10000000, 0b01000000]))
    row = read_pgm(tmp_path / "b.pbm").data[0]
    assert row.tolist() == [0] + [255] * 8 + [0]


def test_pgm_errors(tmp_path):
    (tmp_path / "a").write_bytes(b"P7 2 2 255\n" + bytes(4))
    with pytest.raises(UnsupportedFormat):
        read_pgm(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"P5 2 2 255\n" + bytes(3))
    with pytest.raises(Truncated):
        read_pgm(tmp_path / "b")


def test_pgm_round_trip(tmp_path, rng):
    img = GrayImage(rng.integers(0, 256, (5, 7)))
    write_pgm(tmp_path / "x.pgm", img)
    assert read_pgm(tmp_path / "x.pgm") == img


def _write_manifest(tmp_path, rows):
    for name in {r[0] for r in rows}:
        if not name.startswith("missing"):
            write_pgm(tmp_path / name, blob_image())
    (tmp_path / "m.csv").write_text("path,label\n" + "".join(f"{p},{l}\n" for p, l in rows))
    return tmp_path / "m.csv"


def test_manifest_label_mapping(tmp_path):
    ds = read_manifest_dir(_write_manifest(tmp_path, [("x.pgm", "a"), ("y.pgm", "b"), ("z.pgm", "a")]))
    assert ds.class_count == 2
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.class_names == ("a", "b")


def test_manifest_missing_file_names_row(tmp_path):
    m = _write_manifest(tmp_path, [("x.pgm", "a"), ("missing.pgm", "b")])
    with pytest.raises(MissingFile, match="missing.pgm"):
        read_manifest_dir(m)


def test_manifest_empty(tmp_path):
    (tmp_path / "m.csv").write_text("path,label\n")
    with pytest.raises(EmptyManifest):
        read_manifest_dir(tmp_path / "m.csv")


def test_nine_class_manifest(tmp_path):
    rows = [(f"{c}_{i}.pgm", c) for c in "abcdefghi" for i in range(2)]
    assert read_manifest_dir(_write_manifest(tmp_path, rows)).class_count == 9


# --- transforms ---

def test_zero_spec_is_identity(mnist):
    spec = TransformSpec()
    for i in range(20):
        assert apply_transform(mnist.images[i], spec, i) == mnist.images[i]


def test_invert_swaps_binary_values():
    img = GrayImage(np.array([[0, 255], [255, 0]]))
    out = apply_transform(img, TransformSpec(invert=True), 0)
    assert out.data.tolist() == [[255, 0], [0, 255]]


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_double_inversion_identity(pix):
    img = GrayImage(pix)
    assert invert(invert(img)) == img


def test_draws_reproducible_and_in_range(mnist):
    spec = TransformSpec(rotation_deg=90, translate_px=9, scale_lo=0.2, scale_hi=1.0, rng_seed=5)
    img = mnist.images[7]
    assert apply_transform(img, spec, 3) == apply_transform(img, spec, 3)
    assert apply_transform(img, spec, 3) != apply_transform(img, spec, 4)
    from shapegraph.dataio import draw_transform, transform_rng

    for i in range(200):
        d = draw_transform(spec, transform_rng(spec, i))
        assert -90 <= d.angle_deg <= 90
        assert -9 <= d.dx <= 9 and -9 <= d.dy <= 9
        assert 0.2 < d.scale <= 1.0


def test_rotation_keeps_size_and_fills_background(mnist):
    img = mnist.images[0]
    out = apply_transform(img, TransformSpec(rotation_deg=45, rng_seed=1), 0)
    assert out.data.shape == img.data.shape
    assert out.data[0, 0] == 0  # MNIST background is 0
    dark = invert(img)
    out = apply_transform(dark, TransformSpec(rotation_deg=45, rng_seed=1), 0)
    assert out.data[0, 0] == 255


def test_quarter_turn_matches_rot90():
    # odd size so the centre is a pixel and a 90 degree turn is a permutation
    pix = np.zeros((9, 9), np.uint8)
    pix[1:4, 2] = 200
    pix[6, 5:8] = 90
    from shapegraph.dataio import TransformDraw, apply_draw

    out = apply_draw(GrayImage(pix), TransformDraw(90.0, 0, 0, 1.0, False))
    assert np.array_equal(out.data, np.rot90(pix))


def test_shift_and_clip_detection():
    pix = np.zeros((6, 6), np.uint8)
    pix[2, 3] = 9
    out = shift_image(pix, 2, -1, 0)
    assert out[1, 5] == 9 and out.sum() == 9
    img = GrayImage(pix)
    assert not translation_clips(img, 2, -2)
    assert translation_clips(img, 3, 0)
    assert modal_intensity(img) == 0


def test_transform_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec(scale_lo=0)
    with pytest.raises(ValueError):
        TransformSpec(scale_lo=1.0, scale_hi=0.5)
    with pytest.raises(ValueError):
        TransformSpec(rotation_deg=-1)
