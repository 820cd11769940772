"""IDX container parsing and the synthetic bimodal dataset."""

import struct

import numpy as np
import pytest

from muse.data import (IdxParseError, IdxTensor, batch_iter, load_mnist_pair,
                       make_synthetic_bars, parse_idx, render_bar, serialize_idx)


def _idx_bytes(magic, dims, payload):
    raw = struct.pack(">I", magic)
    raw += struct.pack(f">{len(dims)}I", *dims)
    return raw + bytes(payload)


def test_parse_idx_hand_built_images():
    # two 2x3 "images"
    payload = list(range(12))
    raw = _idx_bytes(0x00000803, (2, 2, 3), payload)
    t = parse_idx(raw)
    assert t.magic == 0x00000803
    assert t.dims == (2, 2, 3)
    assert t.payload.shape == (2, 2, 3)
    assert t.payload[1, 1, 2] == 11


def test_parse_idx_labels_vector():
    t = parse_idx(_idx_bytes(0x00000801, (4,), [7, 0, 3, 9]))
    assert t.dims == (4,)
    np.testing.assert_array_equal(t.payload, [7, 0, 3, 9])


def test_serialize_roundtrip_byte_exact():
    t = IdxTensor(0x00000803, (2, 2, 2), np.arange(8, dtype=np.uint8).reshape(2, 2, 2))
    raw = serialize_idx(t)
    back = parse_idx(raw)
    assert serialize_idx(back) == raw


@pytest.mark.parametrize("raw,fragment", [
    (b"\x00\x08", "byte 0"),                              # truncated header
    (_idx_bytes(0x01000803, (1,), [0]), "magic"),         # nonzero lead bytes
    (_idx_bytes(0x00000903, (1,), [0]), "type code"),     # not unsigned byte
    (_idx_bytes(0x00000803, (2, 2, 2), [0] * 5), "5"),    # payload too short
])
def test_parse_idx_errors_name_the_problem(raw, fragment):
    with pytest.raises(IdxParseError) as err:
        parse_idx(raw)
    assert fragment in str(err.value)


def test_load_mnist_pair_from_synthetic_idx(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3, 4], dtype=np.uint8)
    (tmp_path / "img.idx").write_bytes(
        serialize_idx(IdxTensor(0x00000803, (5, 4, 4), images)))
    (tmp_path / "lab.idx").write_bytes(
        serialize_idx(IdxTensor(0x00000801, (5,), labels)))
    ds = load_mnist_pair(tmp_path / "img.idx", tmp_path / "lab.idx", limit=4)
    assert len(ds) == 4
    assert ds.modalities["image"].shape == (4, 16)
    assert ds.modalities["image"].max() <= 1.0
    np.testing.assert_allclose(ds.modalities["label"].sum(axis=1), 1.0)
    assert ds.modalities["label"][2, 2] == 1.0
    assert ds.meta["image_shape"] == (4, 4)


def test_load_mnist_pair_count_mismatch(tmp_path):
    (tmp_path / "img.idx").write_bytes(
        serialize_idx(IdxTensor(0x00000803, (2, 2, 2),
                                np.zeros((2, 2, 2), dtype=np.uint8))))
    (tmp_path / "lab.idx").write_bytes(
        serialize_idx(IdxTensor(0x00000801, (3,), np.zeros(3, dtype=np.uint8))))
    with pytest.raises(IdxParseError, match="mismatch"):
        load_mnist_pair(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_render_bar_symmetry_and_range():
    img = render_bar(0.3, 16)
    assert img.shape == (16, 16)
    assert img.min() >= 0.0 and img.max() <= 1.0
    # a bar is invariant under a half turn
    np.testing.assert_allclose(render_bar(0.3 + np.pi, 16), img, atol=1e-12)
    # the center pixel lies on every bar
    assert render_bar(1.1, 17)[8, 8] == pytest.approx(1.0)


def test_make_synthetic_bars_shapes_and_angle_code():
    ds = make_synthetic_bars(50, image_size=16, noise_sd=0.0, seed=1)
    assert len(ds) == 50
    assert ds.modalities["image"].shape == (50, 256)
    assert ds.modalities["angle"].shape == (50, 2)
    thetas = ds.meta["thetas"]
    np.testing.assert_allclose(ds.modalities["angle"][:, 0], np.cos(2 * thetas))
    np.testing.assert_allclose(ds.modalities["angle"][:, 1], np.sin(2 * thetas))


def test_make_synthetic_bars_deterministic():
    a = make_synthetic_bars(20, seed=5)
    b = make_synthetic_bars(20, seed=5)
    np.testing.assert_array_equal(a.modalities["image"], b.modalities["image"])
    np.testing.assert_array_equal(a.modalities["angle"], b.modalities["angle"])
    c = make_synthetic_bars(20, seed=6)
    assert not np.array_equal(a.modalities["angle"], c.modalities["angle"])


def test_subset_keeps_alignment():
    ds = make_synthetic_bars(30, seed=0)
    sub = ds.subset(np.array([3, 7, 11]))
    assert len(sub) == 3
    np.testing.assert_array_equal(sub.modalities["image"][1],
                                  ds.modalities["image"][7])


def test_batch_iter_covers_all_rows_and_is_deterministic():
    ds = make_synthetic_bars(25, seed=0)
    batches = list(batch_iter(ds, 8, shuffle_seed=4))
    sizes = [b["image"].shape[0] for b in batches]
    assert sizes == [8, 8, 8, 1]
    again = list(batch_iter(ds, 8, shuffle_seed=4))
    for b1, b2 in zip(batches, again):
        np.testing.assert_array_equal(b1["angle"], b2["angle"])
    stacked = np.concatenate([b["angle"] for b in batches])
    assert stacked.shape == ds.modalities["angle"].shape
    # shuffled: same multiset of rows, different order than unshuffled
    plain = np.concatenate([b["angle"] for b in batch_iter(ds, 8)])
    assert not np.array_equal(stacked, plain)
    np.testing.assert_allclose(np.sort(stacked, axis=0), np.sort(plain, axis=0))


def test_batch_iter_rejects_bad_batch_size():
    ds = make_synthetic_bars(10, seed=0)
    with pytest.raises(ValueError):
        next(batch_iter(ds, 0))
