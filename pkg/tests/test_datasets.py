import numpy as np
import pytest

from stflow.core import IngestError
from stflow.datasets import (
    GeneratorConfig,
    charged_accel,
    gen_charged,
    gen_gravity,
    gen_springs,
    generate_nbody,
    gravity_accel,
    leapfrog,
    load_ethucy,
    load_md17,
    momentum,
    springs_accel,
    total_energy,
)


def small_cfg(system, **kw):
    defaults = dict(n_train=6, n_val=3, n_test=3, seed=0)
    defaults.update(kw)
    return GeneratorConfig.defaults(system, **defaults)


# ---------------------------------------------------------------------------
# Integrator-level physics checks
# ---------------------------------------------------------------------------


def test_gravity_two_equal_masses_mirror_symmetric():
    pos = np.array([[[1.0, 0, 0], [-1.0, 0, 0]]])
    vel = np.zeros((1, 2, 3))
    masses = np.ones((1, 2))
    traj, _ = leapfrog(pos, vel, lambda p: gravity_accel(p, masses, 1.0, 0.1), 1e-3, 2000, 100)
    assert np.max(np.abs(traj[:, :, 0] + traj[:, :, 1])) < 1e-12


def test_gravity_single_body_moves_in_straight_line():
    pos = np.array([[[0.2, -0.1, 0.4]]])
    vel = np.array([[[0.3, 0.1, -0.2]]])
    traj, _ = leapfrog(pos, vel, lambda p: gravity_accel(p, np.ones((1, 1)), 1.0, 0.1), 1e-3, 1000, 100)
    times = 1e-3 * 100 * np.arange(traj.shape[1])
    expected = pos[0, 0] + times[:, None] * vel[0, 0]
    assert np.max(np.abs(traj[0, :, 0] - expected)) < 1e-9


def test_gravity_momentum_conserved():
    rng = np.random.default_rng(0)
    pos = rng.standard_normal((2, 6, 3))
    vel = 0.5 * rng.standard_normal((2, 6, 3))
    masses = rng.uniform(0.2, 1.5, (2, 6))
    _, vels = leapfrog(pos, vel, lambda p: gravity_accel(p, masses, 1.0, 0.1), 1e-3, 3000, 100)
    p = momentum(vels, masses)  # (B, frames, 3)
    scale = np.abs(masses[..., None] * vels[:, 0]).sum(axis=-2)
    drift = np.abs(p - p[:, :1]).max(axis=1)
    assert np.max(drift / np.maximum(scale, 1e-12)) < 1e-6


def test_spring_pair_period_matches_closed_form():
    # Two unit masses, one spring k=0.1, at rest, displaced from rest length 0:
    # the separation oscillates with period 2*pi*sqrt(m_red / k).
    k, m_red = 0.1, 0.5
    period = 2 * np.pi * np.sqrt(m_red / k)
    pos = np.array([[[1.0, 0, 0], [-1.0, 0, 0]]])
    vel = np.zeros((1, 2, 3))
    masses = np.ones((1, 2))
    adj = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    dt = 1e-3
    steps = int(0.3 * period / dt)
    traj, _ = leapfrog(pos, vel, lambda p: springs_accel(p, masses, adj, k), dt, steps, 1)
    sep = traj[0, :, 0, 0] - traj[0, :, 1, 0]
    crossing = np.nonzero(np.diff(np.sign(sep)))[0][0]
    # Linear interpolation to the sub-step zero crossing; that is a quarter period.
    frac = sep[crossing] / (sep[crossing] - sep[crossing + 1])
    t_quarter = dt * (crossing + frac)
    assert 4 * t_quarter == pytest.approx(period, rel=0.01)


def test_springs_zero_stiffness_is_force_free():
    rng = np.random.default_rng(1)
    pos = rng.standard_normal((1, 4, 3))
    vel = rng.standard_normal((1, 4, 3))
    masses = np.ones((1, 4))
    adj = np.ones((1, 4, 4)) - np.eye(4)
    traj, _ = leapfrog(pos, vel, lambda p: springs_accel(p, masses, adj, 0.0), 1e-3, 500, 100)
    times = 1e-3 * 100 * np.arange(traj.shape[1])
    expected = pos[:, None] + times[None, :, None, None] * vel[:, None]
    assert np.max(np.abs(traj - expected)) < 1e-9


def test_charged_like_pair_separation_increases_after_closest_approach():
    pos = np.array([[[1.0, 0, 0], [-1.0, 0, 0]]])
    vel = np.array([[[-0.3, 0, 0], [0.3, 0, 0]]])
    masses = np.ones((1, 2))
    charges = np.array([[1.0, 1.0]])
    traj, _ = leapfrog(
        pos, vel, lambda p: charged_accel(p, masses, charges, 1.0, 0.5), 1e-3, 8000, 40
    )
    sep = np.linalg.norm(traj[0, :, 0] - traj[0, :, 1], axis=-1)
    closest = sep.argmin()
    assert closest > 0
    assert np.all(np.diff(sep[closest:]) > 0)


def test_charged_zero_charges_move_straight():
    rng = np.random.default_rng(2)
    pos = rng.standard_normal((1, 3, 3))
    vel = rng.standard_normal((1, 3, 3))
    traj, _ = leapfrog(
        pos, vel,
        lambda p: charged_accel(p, np.ones((1, 3)), np.zeros((1, 3)), 1.0, 0.5),
        1e-3, 500, 100,
    )
    times = 1e-3 * 100 * np.arange(traj.shape[1])
    expected = pos[:, None] + times[None, :, None, None] * vel[:, None]
    assert np.max(np.abs(traj - expected)) < 1e-9


def test_charged_opposite_pair_stays_finite():
    pos = np.array([[[0.5, 0, 0], [-0.5, 0, 0]]])
    vel = np.array([[[0, 0.4, 0], [0, -0.4, 0]]])
    traj, _ = leapfrog(
        pos, vel,
        lambda p: charged_accel(p, np.ones((1, 2)), np.array([[1.0, -1.0]]), 1.0, 0.5),
        1e-3, 10_000, 100,
    )
    assert np.all(np.isfinite(traj))
    assert np.max(np.abs(traj)) < 1e3


# ---------------------------------------------------------------------------
# Generator contracts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("gen,system", [(gen_gravity, "gravity"), (gen_springs, "springs"),
                                        (gen_charged, "charged")])
def test_generation_deterministic_and_finite(gen, system):
    cfg = small_cfg(system)
    splits_a, meta, _ = gen(cfg)
    splits_b, _, _ = gen(small_cfg(system))
    assert meta.dataset_kind == system
    for split in ("train", "val", "test"):
        a, b = splits_a[split][0], splits_b[split][0]
        assert np.array_equal(a.positions, b.positions)
        assert np.all(np.isfinite(a.positions))
        assert a.positions.shape[1] == cfg.T
        assert a.cond_len == cfg.cond_len


def test_generation_split_shapes_and_disjointness():
    cfg = small_cfg("springs")
    splits, _, _ = gen_springs(cfg)
    assert splits["train"][0].n_traj == 6
    assert splits["val"][0].n_traj == 3
    assert splits["test"][0].n_traj == 3
    # Sub-seeding by global index keeps the splits disjoint.
    pools = [splits[s][0].positions[:, 0] for s in ("train", "val", "test")]
    for i in range(3):
        for j in range(i + 1, 3):
            for a in pools[i]:
                assert not any(np.array_equal(a, b) for b in pools[j])


def test_springs_adjacency_symmetric_zero_diagonal():
    splits, _, _ = gen_springs(small_cfg("springs"))
    adj = splits["train"][0].node_static["spring_adj"]
    assert np.array_equal(adj, adj.transpose(0, 2, 1))
    assert np.all(np.diagonal(adj, axis1=1, axis2=2) == 0)
    assert set(np.unique(adj)) <= {0.0, 1.0}


def test_charged_charges_are_plus_minus_one():
    splits, _, _ = gen_charged(small_cfg("charged"))
    charges = splits["train"][0].node_static["charges"]
    assert set(np.unique(charges)) <= {-1.0, 1.0}


def test_energy_drift_within_bound():
    # Audit the generator's energy contract by re-simulating a batch with the
    # same integrator settings and checking the sampled-frame energy series.
    from stflow.datasets import _accel_fn, _initial_conditions, _trajectory_rng

    for system in ("gravity", "springs"):
        cfg = small_cfg(system)
        pos0, vel0, static = [], [], None
        for idx in range(4):
            p, v, st = _initial_conditions(cfg, _trajectory_rng(cfg.seed, idx, 0))
            pos0.append(p)
            vel0.append(v)
            if static is None:
                static = {k: [] for k in st}
            for k, a in st.items():
                static[k].append(a)
        static = {k: np.stack(v) for k, v in static.items()}
        traj, vels = leapfrog(
            np.stack(pos0), np.stack(vel0), _accel_fn(cfg, static), cfg.dt,
            (cfg.T - 1) * cfg.sample_stride, cfg.sample_stride,
        )
        energy = np.stack(
            [total_energy(cfg, traj[:, t], vels[:, t], static) for t in range(cfg.T)], axis=1
        )
        drift = np.abs(energy - energy[:, :1]).max(axis=1)
        rel = drift / np.maximum(np.abs(energy[:, 0]), 1e-9)
        assert np.all(rel < cfg.energy_drift_tol), f"{system}: {rel}"


def test_generation_batch_matches_serial():
    # Vectorizing the integrator over trajectories must agree bit-exactly with
    # integrating each trajectory alone (per-trajectory sub-seeding depends on it).
    from stflow.datasets import _accel_fn, _initial_conditions, _trajectory_rng

    cfg = small_cfg("charged")
    ics = [_initial_conditions(cfg, _trajectory_rng(cfg.seed, i, 0)) for i in range(3)]
    static = {k: np.stack([st[k] for _, _, st in ics]) for k in ics[0][2]}
    batch_traj, _ = leapfrog(
        np.stack([p for p, _, _ in ics]), np.stack([v for _, v, _ in ics]),
        _accel_fn(cfg, static), cfg.dt, 400, cfg.sample_stride,
    )
    for i, (p, v, st) in enumerate(ics):
        solo_static = {k: a[None] for k, a in st.items()}
        solo_traj, _ = leapfrog(p[None], v[None], _accel_fn(cfg, solo_static),
                                cfg.dt, 400, cfg.sample_stride)
        assert np.array_equal(solo_traj[0], batch_traj[i])


def test_defaults_follow_benchmark_sizes():
    cfg = GeneratorConfig.defaults("gravity")
    assert (cfg.n_train, cfg.n_val, cfg.n_test) == (3000, 2000, 2000)
    assert (cfg.T, cfg.cond_len, cfg.n_nodes) == (30, 10, 10)
    assert GeneratorConfig.defaults("springs").n_nodes == 5
    assert GeneratorConfig.defaults("charged").n_nodes == 5


# ---------------------------------------------------------------------------
# MD17-style ingestion
# ---------------------------------------------------------------------------

ETHANOL_Z = np.array([6, 6, 8, 1, 1, 1, 1, 1, 1])


def _write_md17(tmp_path, n_frames, z=ETHANOL_Z, name="ethanol.npz"):
    rng = np.random.default_rng(42)
    base = rng.standard_normal((len(z), 3))
    drift = 0.01 * rng.standard_normal((n_frames, len(z), 3)).cumsum(axis=0)
    path = tmp_path / name
    np.savez(path, R=base[None] + drift, z=z)
    return path


def test_md17_single_window(tmp_path):
    # 300 frames / stride 10 = 30 retained frames: exactly one window of T=30.
    path = _write_md17(tmp_path, 300)
    splits, meta, info = load_md17(path, "ethanol")
    assert info["n_windows"] == 1
    assert meta.dataset_kind == "md17"
    total = sum(b.n_traj for s in splits.values() for b in s)
    assert total == 1


def test_md17_window_arithmetic(tmp_path):
    # 60 retained frames, stride 10, T=30: starts 0, 10, 20, 30 -> 4 windows.
    path = _write_md17(tmp_path, 600)
    splits, _, info = load_md17(path, "ethanol")
    assert info["n_windows"] == 4


def test_md17_ethanol_has_nine_atoms(tmp_path):
    path = _write_md17(tmp_path, 300)
    splits, meta, _ = load_md17(path, "ethanol")
    batch = next(b for s in splits.values() for b in s)
    assert batch.n_nodes == 9
    assert batch.node_static["atom_onehot"].shape[-1] == len(meta.atom_types)


def test_md17_chronological_split_fractions(tmp_path):
    path = _write_md17(tmp_path, 3000 + 290)  # 299 retained frames -> 27 windows
    splits, _, info = load_md17(path, "ethanol")
    n = info["n_windows"]
    assert splits["train"][0].n_traj == int(0.7 * n)
    assert splits["val"][0].n_traj == int(0.15 * n)
    total = sum(b.n_traj for s in splits.values() for b in s)
    assert total == n


def test_md17_unknown_molecule(tmp_path):
    path = _write_md17(tmp_path, 300)
    with pytest.raises(IngestError, match="caffeine"):
        load_md17(path, "caffeine")


def test_md17_missing_fields(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, other=np.zeros(3))
    with pytest.raises(IngestError, match="bad.npz"):
        load_md17(path, "ethanol")


def test_md17_atom_count_mismatch(tmp_path):
    path = _write_md17(tmp_path, 300, z=np.array([6, 6, 8]), name="short.npz")
    with pytest.raises(IngestError, match="9 atoms"):
        load_md17(path, "ethanol")


def test_md17_windows_centered_on_observed_frames(tmp_path):
    path = _write_md17(tmp_path, 300)
    splits, _, _ = load_md17(path, "ethanol")
    batch = next(b for s in splits.values() for b in s)
    obs_mean = batch.positions[:, :10].mean(axis=(1, 2))
    assert np.max(np.abs(obs_mean)) < 1e-12
    assert batch.node_static["window_center"].shape == (batch.n_traj, 3)


# ---------------------------------------------------------------------------
# ETH/UCY-style ingestion
# ---------------------------------------------------------------------------


def _write_ethucy(tmp_path, presence: dict[int, range], name="scene.txt"):
    """presence: pedestrian id -> range of frame indices (frame id = 10 * index)."""
    lines = []
    for ped, frames in presence.items():
        for f in frames:
            lines.append(f"{10 * f:.1f}\t{ped:.1f}\t{0.1 * f + ped:.2f}\t{0.05 * f:.2f}")
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def test_ethucy_single_complete_pedestrian(tmp_path):
    path = _write_ethucy(tmp_path, {1: range(20)})
    splits, meta, info = load_ethucy(path)
    assert meta.d == 2
    assert info["n_windows"] == 1
    batch = splits["all"][0]
    assert (batch.n_traj, batch.n_frames, batch.n_nodes) == (1, 20, 1)
    assert batch.cond_len == 8


def test_ethucy_incomplete_pedestrian_dropped(tmp_path):
    # 19 frames of presence cannot complete any 20-frame window.
    path = _write_ethucy(tmp_path, {1: range(19)})
    splits, _, info = load_ethucy(path)
    assert info["n_windows"] == 0
    assert splits["all"] == []


def test_ethucy_partial_pedestrian_excluded_from_window(tmp_path):
    # Pedestrian 2 misses the last frame of the only window, so N = 1.
    path = _write_ethucy(tmp_path, {1: range(20), 2: range(19)})
    splits, _, info = load_ethucy(path)
    assert info["n_windows"] == 1
    assert splits["all"][0].n_nodes == 1


def test_ethucy_window_count_arithmetic(tmp_path):
    # Two pedestrians co-present for 25 frames, stride 1: 25 - 20 + 1 = 6 windows.
    path = _write_ethucy(tmp_path, {1: range(25), 2: range(25)})
    splits, _, info = load_ethucy(path)
    assert info["n_windows"] == 6
    batch = splits["all"][0]
    assert batch.n_nodes == 2
    assert batch.n_traj == 6


def test_ethucy_malformed_rows_skipped(tmp_path):
    path = _write_ethucy(tmp_path, {1: range(20)})
    with open(path, "a") as fh:
        fh.write("not a row\n1 2\n")
    with pytest.warns(UserWarning, match="skipped 2"):
        splits, _, info = load_ethucy(path)
    assert info["n_windows"] == 1
