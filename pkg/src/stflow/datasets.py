"""Synthetic N-body benchmark generators and external-file ingestion.

The three synthetic families (gravity, springs, charged) share a leapfrog
integrator and per-trajectory sub-seeding: trajectory i of a run is fully
determined by (seed, i, attempt), so parallel and serial generation agree
bit-exactly. Trajectories whose integration goes non-finite or whose energy
drifts beyond the configured bound are regenerated with a fresh attempt index.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import IngestError, ShapeError, SystemMeta, TrajectoryBatch

NBODY_SYSTEMS = ("gravity", "springs", "charged")

MD17_ATOM_COUNTS = {
    "aspirin": 21,
    "benzene": 12,
    "ethanol": 9,
    "malonaldehyde": 9,
    "naphthalene": 18,
    "salicylic": 16,
    "toluene": 15,
    "uracil": 12,
}


@dataclass
class GeneratorConfig:
    system: str = "springs"
    n_train: int = 3000
    n_val: int = 2000
    n_test: int = 2000
    n_nodes: int = 5
    T: int = 30
    cond_len: int = 10
    dt: float = 1e-3
    sample_stride: int = 100
    G: float = 1.0
    spring_k: float = 0.1
    spring_prob: float = 0.5
    coulomb_c: float = 1.0
    softening: float = 0.1
    box_size: float | None = None
    damping: float = 0.0
    mass_range: tuple[float, float] = (1.0, 1.0)
    position_scale: float = 1.0
    velocity_scale: float = 0.5
    energy_drift_tol: float = 0.05
    max_attempts: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.system not in NBODY_SYSTEMS:
            raise ValueError(f"system must be one of {NBODY_SYSTEMS}")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        if not 0 <= self.cond_len < self.T:
            raise ValueError("cond_len out of range")

    @classmethod
    def defaults(cls, system: str, **overrides) -> "GeneratorConfig":
        base = {
            "gravity": dict(n_nodes=10, sample_stride=100, softening=0.1,
                            mass_range=(0.1, 1.0), position_scale=1.5),
            "springs": dict(n_nodes=5, sample_stride=200, mass_range=(0.5, 2.0)),
            "charged": dict(n_nodes=5, sample_stride=100, softening=0.5,
                            mass_range=(1.0, 1.0)),
        }[system]
        base.update(overrides)
        return cls(system=system, **base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mass_range"] = list(self.mass_range)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "mass_range" in d:
            d["mass_range"] = tuple(d["mass_range"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Forces and integration
# ---------------------------------------------------------------------------


def gravity_accel(pos, masses, G, eps):
    """Softened Newtonian gravity; pos (B,N,d), masses (B,N)."""
    diff = pos[:, None, :, :] - pos[:, :, None, :]  # [b, i, j] = x_j - x_i
    inv_r3 = (np.sum(diff * diff, axis=-1) + eps * eps) ** -1.5
    return G * np.sum(masses[:, None, :, None] * diff * inv_r3[..., None], axis=2)


def springs_accel(pos, masses, adjacency, k):
    """Hooke forces with zero rest length on connected pairs; adjacency (B,N,N)."""
    diff = pos[:, :, None, :] - pos[:, None, :, :]  # [b, i, j] = x_i - x_j
    force = -k * np.sum(adjacency[..., None] * diff, axis=2)
    return force / masses[..., None]


def charged_accel(pos, masses, charges, C, eps):
    """Softened Coulomb force; like charges repel."""
    diff = pos[:, :, None, :] - pos[:, None, :, :]  # [b, i, j] = x_i - x_j
    inv_r3 = (np.sum(diff * diff, axis=-1) + eps * eps) ** -1.5
    qq = charges[:, :, None] * charges[:, None, :]
    force = C * np.sum((qq * inv_r3)[..., None] * diff, axis=2)
    return force / masses[..., None]


def _accel_fn(cfg: GeneratorConfig, static: dict):
    if cfg.system == "gravity":
        return lambda pos: gravity_accel(pos, static["masses"], cfg.G, cfg.softening)
    if cfg.system == "springs":
        return lambda pos: springs_accel(pos, static["masses"], static["spring_adj"], cfg.spring_k)
    return lambda pos: charged_accel(pos, static["masses"], static["charges"], cfg.coulomb_c, cfg.softening)


def leapfrog(pos, vel, accel_fn, dt, n_steps, sample_stride, damping=0.0, box_size=None):
    """Velocity-Verlet integration; returns positions and velocities at sampled frames.

    Samples step 0 and every sample_stride-th step thereafter. pos and vel are
    (B, N, d) and are not mutated.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    n_frames = n_steps // sample_stride + 1
    out_pos = np.empty((pos.shape[0], n_frames, *pos.shape[1:]))
    out_vel = np.empty_like(out_pos)
    out_pos[:, 0], out_vel[:, 0] = pos, vel
    acc = accel_fn(pos)
    for step in range(1, n_steps + 1):
        if damping:
            acc = acc - damping * vel
        vel = vel + 0.5 * dt * acc
        pos = pos + dt * vel
        if box_size is not None:
            pos, vel = _reflect(pos, vel, box_size)
        acc = accel_fn(pos)
        if damping:
            acc = acc - damping * vel
        vel = vel + 0.5 * dt * acc
        if step % sample_stride == 0:
            out_pos[:, step // sample_stride] = pos
            out_vel[:, step // sample_stride] = vel
    return out_pos, out_vel


def _reflect(pos, vel, box_size):
    half = box_size / 2.0
    over = pos > half
    under = pos < -half
    pos = np.where(over, box_size - pos, pos)
    pos = np.where(under, -box_size - pos, pos)
    vel = np.where(over | under, -vel, vel)
    return pos, vel


def total_energy(cfg: GeneratorConfig, pos, vel, static):
    """Kinetic plus potential energy per trajectory; pos/vel (B,N,d)."""
    m = static["masses"]
    ke = 0.5 * np.sum(m * np.sum(vel * vel, axis=-1), axis=-1)
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    iu = np.triu_indices(pos.shape[1], k=1)
    if cfg.system == "gravity":
        pair = -cfg.G * (m[:, :, None] * m[:, None, :]) / np.sqrt(r2 + cfg.softening**2)
    elif cfg.system == "springs":
        pair = 0.5 * cfg.spring_k * static["spring_adj"] * r2
    else:
        qq = static["charges"][:, :, None] * static["charges"][:, None, :]
        pair = cfg.coulomb_c * qq / np.sqrt(r2 + cfg.softening**2)
    return ke + pair[:, iu[0], iu[1]].sum(axis=-1)


def momentum(vel, masses):
    """Total linear momentum; vel (B, ..., N, d), masses (B, N)."""
    m = masses.reshape(masses.shape[0], *([1] * (vel.ndim - 3)), masses.shape[1], 1)
    return np.sum(m * vel, axis=-2)


# ---------------------------------------------------------------------------
# Initial conditions and generation
# ---------------------------------------------------------------------------


def _trajectory_rng(seed: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index, attempt)))


def _initial_conditions(cfg: GeneratorConfig, rng: np.random.Generator):
    N = cfg.n_nodes
    lo, hi = cfg.mass_range
    masses = np.exp(rng.uniform(np.log(lo), np.log(hi), size=N)) if hi > lo else np.full(N, lo)
    pos = cfg.position_scale * rng.standard_normal((N, 3))
    raw = rng.standard_normal((N, 3))
    vel = cfg.velocity_scale * raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    static = {"masses": masses}
    if cfg.system == "springs":
        upper = rng.random((N, N)) < cfg.spring_prob
        adj = np.triu(upper, k=1)
        static["spring_adj"] = (adj | adj.T).astype(np.float64)
    elif cfg.system == "charged":
        static["charges"] = rng.choice(np.array([-1.0, 1.0]), size=N)
    return pos, vel, static


def _simulate_split(cfg: GeneratorConfig, indices: np.ndarray):
    """Simulates one split; returns (positions, static dict, retry count)."""
    B, N = len(indices), cfg.n_nodes
    n_steps = (cfg.T - 1) * cfg.sample_stride

    def run(idx_list, attempts):
        pos0 = np.empty((len(idx_list), N, 3))
        vel0 = np.empty_like(pos0)
        static = {"masses": np.empty((len(idx_list), N))}
        if cfg.system == "springs":
            static["spring_adj"] = np.empty((len(idx_list), N, N))
        elif cfg.system == "charged":
            static["charges"] = np.empty((len(idx_list), N))
        for row, (idx, attempt) in enumerate(zip(idx_list, attempts)):
            p, v, st = _initial_conditions(cfg, _trajectory_rng(cfg.seed, int(idx), int(attempt)))
            pos0[row], vel0[row] = p, v
            for key, arr in st.items():
                static[key][row] = arr
        traj, vels = leapfrog(
            pos0, vel0, _accel_fn(cfg, static), cfg.dt, n_steps, cfg.sample_stride,
            damping=cfg.damping, box_size=cfg.box_size,
        )
        return traj, vels, static

    attempts = np.zeros(B, dtype=int)
    traj, vels, static = run(indices, attempts)
    retries = 0
    while True:
        bad = ~np.all(np.isfinite(traj), axis=(1, 2, 3))
        if cfg.system in ("gravity", "springs"):
            with np.errstate(invalid="ignore"):
                energy = np.stack(
                    [total_energy(cfg, traj[:, t], vels[:, t], static) for t in range(traj.shape[1])],
                    axis=1,
                )
            drift = np.nanmax(np.abs(energy - energy[:, :1]), axis=1)
            denom = np.maximum(np.abs(energy[:, 0]), 1e-9)
            bad |= ~np.isfinite(drift) | (drift / denom > cfg.energy_drift_tol)
        if not bad.any():
            break
        rows = np.nonzero(bad)[0]
        attempts[rows] += 1
        retries += len(rows)
        if attempts.max() > cfg.max_attempts:
            raise RuntimeError(
                f"{cfg.system} generation exceeded {cfg.max_attempts} attempts for a trajectory"
            )
        sub_traj, sub_vels, sub_static = run(indices[rows], attempts[rows])
        traj[rows], vels[rows] = sub_traj, sub_vels
        for key in static:
            static[key][rows] = sub_static[key]
    return traj, static, retries


def generate_nbody(cfg: GeneratorConfig):
    """Generates train/val/test TrajectoryBatch splits for one synthetic system.

    Returns (splits, meta, retries-per-split). Deterministic given cfg.seed;
    trajectory i of the global index space is independent of the split layout.
    """
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    offsets = np.cumsum([0, cfg.n_train, cfg.n_val])
    splits: dict[str, list[TrajectoryBatch]] = {}
    retries: dict[str, int] = {}
    for (split, size), off in zip(sizes.items(), offsets):
        indices = np.arange(off, off + size)
        traj, static, n_retry = _simulate_split(cfg, indices)
        splits[split] = [TrajectoryBatch(traj, cfg.cond_len, static)]
        retries[split] = n_retry
    meta = SystemMeta(cfg.system, 3)
    return splits, meta, retries


def gen_gravity(cfg: GeneratorConfig | None = None, **overrides):
    cfg = cfg or GeneratorConfig.defaults("gravity", **overrides)
    return generate_nbody(cfg)


def gen_springs(cfg: GeneratorConfig | None = None, **overrides):
    cfg = cfg or GeneratorConfig.defaults("springs", **overrides)
    return generate_nbody(cfg)


def gen_charged(cfg: GeneratorConfig | None = None, **overrides):
    cfg = cfg or GeneratorConfig.defaults("charged", **overrides)
    return generate_nbody(cfg)


# ---------------------------------------------------------------------------
# MD17-style ingestion
# ---------------------------------------------------------------------------


def _center_windows(windows: np.ndarray, c: int):
    """Centers each window by the mean of its observed frames; returns centers too."""
    centers = windows[:, :c].mean(axis=(1, 2))  # (B, d)
    return windows - centers[:, None, None, :], centers


def load_md17(
    path,
    molecule: str,
    stride_keep: int = 10,
    window_stride: int = 10,
    T: int = 30,
    c: int = 10,
):
    """Loads an MD17-style .npz (positions 'R' (F,N,3), atomic numbers 'z') into windows.

    Keeps one out of every stride_keep frames, slices windows of length T
    advancing by window_stride, and splits the windows chronologically 70/15/15.
    """
    path = Path(path)
    molecule = molecule.lower()
    if molecule not in MD17_ATOM_COUNTS:
        raise IngestError(f"unknown molecule {molecule!r} for {path}")
    try:
        data = np.load(path)
    except Exception as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    keys = set(data.keys())
    r_key = "R" if "R" in keys else "positions" if "positions" in keys else None
    z_key = "z" if "z" in keys else "atomic_numbers" if "atomic_numbers" in keys else None
    if r_key is None or z_key is None:
        raise IngestError(f"{path} is missing position/atomic-number fields (found {sorted(keys)})")
    R = np.asarray(data[r_key], dtype=np.float64)
    z = np.asarray(data[z_key]).reshape(-1).astype(np.int64)
    if R.ndim != 3 or R.shape[2] != 3 or R.shape[1] != z.size:
        raise IngestError(f"{path}: positions shaped {R.shape} do not match {z.size} atoms")
    if z.size != MD17_ATOM_COUNTS[molecule]:
        raise IngestError(
            f"{path}: {molecule} should have {MD17_ATOM_COUNTS[molecule]} atoms, found {z.size}"
        )

    retained = R[::stride_keep]
    starts = range(0, retained.shape[0] - T + 1, window_stride)
    windows = np.stack([retained[s : s + T] for s in starts]) if len(starts) else np.empty((0, T, z.size, 3))
    n = windows.shape[0]
    n_train, n_val = int(0.7 * n), int(0.15 * n)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}

    atom_types = tuple(sorted(np.unique(z).tolist()))
    onehot = (z[:, None] == np.array(atom_types)[None, :]).astype(np.float64)
    splits: dict[str, list[TrajectoryBatch]] = {}
    for split, (lo, hi) in bounds.items():
        if hi <= lo:
            splits[split] = []
            continue
        block, centers = _center_windows(windows[lo:hi], c)
        static = {
            "atom_numbers": np.broadcast_to(z, (hi - lo, z.size)).copy(),
            "atom_onehot": np.broadcast_to(onehot, (hi - lo, *onehot.shape)).copy(),
            "window_center": centers,
        }
        splits[split] = [TrajectoryBatch(block, c, static)]
    meta = SystemMeta("md17", 3, atom_types)
    info = {"molecule": molecule, "n_windows": n, "stride_keep": stride_keep,
            "window_stride": window_stride}
    return splits, meta, info


# ---------------------------------------------------------------------------
# ETH/UCY-style ingestion
# ---------------------------------------------------------------------------


def load_ethucy(path, scene: str | None = None, c: int = 8, f: int = 12, window_stride: int = 1):
    """Parses rows (frame_id, pedestrian_id, x, y) into co-present windows of length c+f.

    Windows slide over the sorted unique frame ids with the given stride; a
    pedestrian enters a window only if present at all of its frames, and windows
    with no complete pedestrian are dropped. Windows are grouped by pedestrian
    count (one TrajectoryBatch per group).
    """
    path = Path(path)
    T = c + f
    rows = []
    skipped = 0
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            try:
                frame, ped, x, y = float(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])
            except (ValueError, IndexError):
                skipped += 1
                continue
            rows.append((frame, ped, x, y))
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} malformed rows")
    if not rows:
        raise IngestError(f"{path}: no parseable rows")

    arr = np.asarray(rows)
    frames = np.unique(arr[:, 0])
    frame_index = {fid: i for i, fid in enumerate(frames)}
    peds = np.unique(arr[:, 1])
    ped_index = {pid: i for i, pid in enumerate(peds)}
    grid = np.full((frames.size, peds.size, 2), np.nan)
    for frame, ped, x, y in rows:
        grid[frame_index[frame], ped_index[ped]] = (x, y)
    present = ~np.isnan(grid[..., 0])

    by_n: dict[int, list[np.ndarray]] = {}
    for start in range(0, frames.size - T + 1, window_stride):
        window_present = present[start : start + T].all(axis=0)
        n = int(window_present.sum())
        if n == 0:
            continue
        by_n.setdefault(n, []).append(grid[start : start + T][:, window_present])
    groups = []
    for n in sorted(by_n):
        block = np.stack(by_n[n])
        block, centers = _center_windows(block, c)
        groups.append(TrajectoryBatch(block, c, {"window_center": centers}))
    meta = SystemMeta("ethucy", 2)
    info = {"scene": scene, "skipped_rows": skipped, "n_windows": sum(b.n_traj for b in groups)}
    return {"all": groups}, meta, info
