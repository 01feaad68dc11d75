import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stflow.core import (
    EdgeSet,
    ShapeError,
    SystemMeta,
    TrajectoryBatch,
    from_increments,
    load_dataset,
    save_dataset,
    to_increments,
)


def test_to_increments_definition():
    assert np.array_equal(to_increments(np.array([0.0, 1.0, 3.0])), [1.0, 2.0])


def test_to_increments_constant_positions():
    assert np.array_equal(to_increments(np.array([5.0, 5.0, 5.0])), [0.0, 0.0])


def test_to_increments_rejects_single_frame():
    with pytest.raises(ShapeError):
        to_increments(np.array([1.0]))


def test_from_increments_basic():
    assert np.array_equal(from_increments(np.array([1.0, 2.0]), 0.0), [0.0, 1.0, 3.0])


def test_from_increments_empty():
    assert np.array_equal(from_increments(np.empty(0), 7.0), [7.0])


def test_round_trip_batched():
    rng = np.random.default_rng(0)
    pos = rng.standard_normal((2, 7, 4, 3))
    inc = to_increments(pos)
    back = from_increments(inc, pos[:, 0], anchor_index=0)
    assert np.max(np.abs(back - pos)) < 1e-12


def test_round_trip_interior_anchor():
    rng = np.random.default_rng(1)
    pos = rng.standard_normal((1, 9, 2, 3))
    inc = to_increments(pos, anchor_index=4)
    back = from_increments(inc, pos[:, 4], anchor_index=4)
    assert np.max(np.abs(back - pos)) < 1e-12


@settings(max_examples=50)
@given(arrays(np.float64, (5, 3), elements=st.floats(-100, 100)))
def test_round_trip_property(pos):
    back = from_increments(to_increments(pos), pos[0])
    assert np.max(np.abs(back - pos)) < 1e-10


def _toy_batch(B=2, T=6, N=3, d=3, c=2, seed=0):
    rng = np.random.default_rng(seed)
    return TrajectoryBatch(
        rng.standard_normal((B, T, N, d)),
        c,
        {"masses": rng.uniform(0.5, 2.0, (B, N))},
    )


def test_frame_mask_matches_cond_len():
    batch = _toy_batch(c=2, T=6)
    assert batch.frame_mask.tolist() == [True, True, False, False, False, False]


def test_batch_rejects_nonfinite():
    pos = np.zeros((1, 3, 2, 3))
    pos[0, 1, 0, 0] = np.nan
    with pytest.raises(ValueError):
        TrajectoryBatch(pos, 1)


def test_batch_rejects_bad_cond_len():
    with pytest.raises(ValueError):
        TrajectoryBatch(np.zeros((1, 3, 2, 3)), 3)


def test_permute_nodes_round_trip():
    batch = _toy_batch(seed=3)
    perm = np.array([2, 0, 1])
    inverse = np.argsort(perm)
    back = batch.permute_nodes(perm).permute_nodes(inverse)
    assert np.array_equal(back.positions, batch.positions)
    assert np.array_equal(back.node_static["masses"], batch.node_static["masses"])


def test_permute_nodes_square_static_both_axes():
    rng = np.random.default_rng(5)
    adj = rng.integers(0, 2, (1, 4, 4)).astype(float)
    adj = np.triu(adj, 1) + np.triu(adj, 1).transpose(0, 2, 1)
    batch = TrajectoryBatch(rng.standard_normal((1, 5, 4, 3)), 1, {"spring_adj": adj})
    perm = np.array([3, 1, 0, 2])
    permuted = batch.permute_nodes(perm)
    for i in range(4):
        for j in range(4):
            assert permuted.node_static["spring_adj"][0, i, j] == adj[0, perm[i], perm[j]]


def test_edge_set_rejects_self_loops():
    with pytest.raises(ValueError):
        EdgeSet(np.array([0, 1]), np.array([0, 2]), np.zeros((2, 1)), n_nodes=3)


def test_edge_set_rejects_out_of_range():
    with pytest.raises(ValueError):
        EdgeSet(np.array([0]), np.array([5]), np.zeros((1, 1)), n_nodes=3)


def test_system_meta_dim_rules():
    with pytest.raises(ValueError):
        SystemMeta("ethucy", 3)
    with pytest.raises(ValueError):
        SystemMeta("gravity", 2)
    assert SystemMeta("ethucy", 2).d == 2


def test_dataset_round_trip_bit_exact(tmp_path):
    splits = {"train": [_toy_batch(seed=7)], "test": [_toy_batch(seed=8, B=1)]}
    meta = SystemMeta("gravity", 3)
    save_dataset(tmp_path / "ds", splits, meta, generator={"seed": 7}, seed=7)
    bundle = load_dataset(tmp_path / "ds")
    assert bundle.meta == meta
    for split, batches in splits.items():
        loaded = bundle.splits[split][0]
        assert np.array_equal(loaded.positions, batches[0].positions)
        assert loaded.positions.dtype == batches[0].positions.dtype
        assert np.array_equal(loaded.node_static["masses"], batches[0].node_static["masses"])
        assert loaded.cond_len == batches[0].cond_len

    # Saving the reloaded bundle elsewhere reproduces the array files byte for byte.
    save_dataset(tmp_path / "ds2", bundle.splits, bundle.meta, generator={"seed": 7}, seed=7)
    for name in ("train.g0.positions.npy", "test.g0.positions.npy"):
        assert (tmp_path / "ds" / name).read_bytes() == (tmp_path / "ds2" / name).read_bytes()
