import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volres.dataset import (
    MODELNET40_COUNTS,
    Split,
    batch_iter,
    decode_voxel_cache,
    encode_voxel_cache,
    modelnet40_mismatches,
    read_voxel_cache,
    scan_modelnet,
    write_voxel_cache,
)
from volres.errors import DataError, FormatError
from volres.mesh import normalize_mesh

from meshgen import box, octahedron, write_tree


def test_reference_table_totals():
    assert len(MODELNET40_COUNTS) == 40
    assert sum(t for t, _ in MODELNET40_COUNTS.values()) == 9843
    assert sum(t for _, t in MODELNET40_COUNTS.values()) == 2468


def test_scan_fixture_tree(tmp_path):
    write_tree(tmp_path, {"chair": (2, 1), "lamp": (2, 1)})
    (tmp_path / "README").write_text("not a class")
    idx = scan_modelnet(tmp_path)
    assert idx.classes == ["chair", "lamp"]
    assert idx.split_sizes() == {"train": 4, "test": 2}
    assert idx.class_counts("test") == {"chair": 1, "lamp": 1}
    assert [e.label for e in idx.split("train")] == [0, 0, 1, 1]
    assert len(modelnet40_mismatches(idx)) > 0


def test_scan_missing_root(tmp_path):
    with pytest.raises(DataError):
        scan_modelnet(tmp_path / "nope")


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 5),
    dims=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
    seed=st.integers(0, 2**16),
)
def test_voxel_cache_round_trip(n, dims, seed):
    rng = np.random.default_rng(seed)
    grids = (rng.random((n,) + dims) < 0.3).astype(np.uint8)
    labels = rng.integers(0, 40, n)
    g, y = decode_voxel_cache(encode_voxel_cache(grids, labels))
    np.testing.assert_array_equal(g, grids)
    np.testing.assert_array_equal(y, labels)


def test_voxel_cache_layout_is_lsb_first():
    grid = np.zeros((1, 2, 2, 2), np.uint8)
    grid[0, 0, 0, 0] = 1
    grid[0, 1, 1, 1] = 1
    blob = encode_voxel_cache(grid, [3])
    assert blob[24:28] == (3).to_bytes(4, "little")
    assert blob[28] == 0b1000_0001


def test_voxel_cache_corruption(tmp_path):
    blob = encode_voxel_cache(np.ones((2, 3, 3, 3), np.uint8), [0, 1])
    with pytest.raises(FormatError):
        decode_voxel_cache(blob[:-1])
    with pytest.raises(FormatError):
        decode_voxel_cache(b"JUNK" + blob[4:])
    with pytest.raises(DataError):
        read_voxel_cache(tmp_path / "missing.voxl")
    write_voxel_cache(tmp_path / "a.voxl", np.ones((2, 3, 3, 3), np.uint8), [0, 1])
    assert read_voxel_cache(tmp_path / "a.voxl")[0].shape == (2, 3, 3, 3)


def test_batch_count_for_full_train_split():
    split = Split(np.zeros((9843, 2, 2, 2), np.uint8), np.zeros(9843, np.int64))
    sizes = [len(y) for _, y in batch_iter(split, 64, seed=0, epoch=1)]
    assert len(sizes) == 154 and sizes[:-1] == [64] * 153 and sizes[-1] == 51


def test_batches_cover_every_sample_once():
    split = Split(np.zeros((23, 2, 2, 2), np.uint8), np.arange(23))
    seen = np.concatenate([y for _, y in batch_iter(split, 5, seed=1, epoch=2)])
    assert sorted(seen) == list(range(23))


def test_shuffle_depends_on_seed_and_epoch():
    split = Split(np.zeros((50, 1, 1, 1), np.uint8), np.arange(50))

    def order(seed, epoch):
        return np.concatenate([y for _, y in batch_iter(split, 7, seed=seed, epoch=epoch)])

    np.testing.assert_array_equal(order(3, 1), order(3, 1))
    assert not np.array_equal(order(3, 1), order(3, 2))
    assert not np.array_equal(order(3, 1), order(4, 1))


def test_batch_tensor_layout():
    rng = np.random.default_rng(0)
    grids = (rng.random((4, 30, 30, 30)) < 0.1).astype(np.uint8)
    x, y = next(batch_iter(Split(grids, np.arange(4)), 4, shuffle=False, dtype=np.float64))
    assert x.shape == (4, 1, 30, 30, 30) and x.dtype == np.float64
    np.testing.assert_array_equal(x[:, 0], grids)


def test_empty_split_and_bad_batch_size():
    with pytest.raises(DataError):
        next(batch_iter(Split(np.zeros((0, 2, 2, 2), np.uint8), []), 4))
    with pytest.raises(DataError):
        next(batch_iter(Split(np.zeros((1, 2, 2, 2), np.uint8), [0]), 0))


def test_augmentation_changes_grids_between_epochs():
    meshes = [normalize_mesh(box((0, 0, 0), (1.0, 0.6 + 0.003 * i, 0.3))) for i in range(100)]
    split = Split(np.zeros((100, 30, 30, 30), np.uint8), np.zeros(100, np.int64), meshes=meshes)
    differ = sum(not np.array_equal(split.augmented(i, 0, 1), split.augmented(i, 0, 2)) for i in range(100))
    assert differ >= 99


def test_augmentation_is_reproducible():
    split = Split(np.zeros((1, 30, 30, 30), np.uint8), [0], meshes=[normalize_mesh(octahedron())])
    a = next(batch_iter(split, 1, augment=True, seed=5, epoch=3))[0]
    b = next(batch_iter(split, 1, augment=True, seed=5, epoch=3))[0]
    np.testing.assert_array_equal(a, b)


def test_augmentation_needs_meshes():
    split = Split(np.zeros((1, 30, 30, 30), np.uint8), [0])
    with pytest.raises(DataError):
        next(batch_iter(split, 1, augment=True))
