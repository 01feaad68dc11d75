"""Trajectory batch containers, increment transforms, and the on-disk dataset format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
DATASET_KINDS = ("gravity", "springs", "charged", "md17", "ethucy")

# node_static keys without a node axis; they are never permuted with the nodes.
BATCH_LEVEL_STATIC = frozenset({"window_center"})


class ShapeError(ValueError):
    """An array shape violates a container contract."""


class IngestError(RuntimeError):
    """An external file cannot be turned into trajectory windows."""


@dataclass(frozen=True)
class SystemMeta:
    """What kind of system a batch describes: dataset family, spatial dim, atom table."""

    dataset_kind: str
    d: int
    atom_types: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset_kind {self.dataset_kind!r}")
        expected = 2 if self.dataset_kind == "ethucy" else 3
        if self.d != expected:
            raise ValueError(f"{self.dataset_kind} requires d={expected}, got d={self.d}")
        if self.dataset_kind == "md17" and not self.atom_types:
            raise ValueError("md17 meta requires atom_types")

    def to_dict(self) -> dict:
        out = {"dataset_kind": self.dataset_kind, "d": self.d}
        if self.atom_types is not None:
            out["atom_types"] = list(self.atom_types)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SystemMeta":
        at = d.get("atom_types")
        return cls(d["dataset_kind"], d["d"], tuple(at) if at is not None else None)


@dataclass
class EdgeSet:
    """Directed edges of one timestep: messages flow sender -> receiver."""

    receivers: np.ndarray  # (E,) int
    senders: np.ndarray  # (E,) int
    features: np.ndarray  # (E, F)
    n_nodes: int

    def __post_init__(self):
        self.receivers = np.asarray(self.receivers, dtype=np.int64)
        self.senders = np.asarray(self.senders, dtype=np.int64)
        self.features = np.atleast_2d(np.asarray(self.features))
        if self.receivers.shape != self.senders.shape:
            raise ShapeError("receivers/senders length mismatch")
        if np.any(self.receivers == self.senders):
            raise ValueError("self-loops are not allowed")
        for arr in (self.receivers, self.senders):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_nodes):
                raise ValueError("edge index out of range")

    @property
    def n_edges(self) -> int:
        return int(self.receivers.size)


@dataclass
class TrajectoryBatch:
    """A batch of equal-shape geometric trajectories.

    positions is (B, T, N, d). The first cond_len frames are observed context;
    the remaining T - cond_len frames are the generation target. node_static maps
    attribute names to arrays with a leading batch axis (and a node axis unless
    listed in BATCH_LEVEL_STATIC).
    """

    positions: np.ndarray
    cond_len: int
    node_static: dict[str, np.ndarray] = field(default_factory=dict)
    node_features: np.ndarray | None = None
    edges: list[list[EdgeSet]] | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 4:
            raise ShapeError(f"positions must be (B,T,N,d), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        B, T, N, _ = self.positions.shape
        if not 0 <= self.cond_len < T:
            raise ValueError(f"cond_len {self.cond_len} out of range for T={T}")
        for key, arr in self.node_static.items():
            arr = np.asarray(arr)
            self.node_static[key] = arr
            if arr.shape[0] != B:
                raise ShapeError(f"static {key!r} batch dim {arr.shape[0]} != {B}")
            if key not in BATCH_LEVEL_STATIC and (arr.ndim < 2 or arr.shape[1] != N):
                raise ShapeError(f"static {key!r} node dim mismatch for N={N}")

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[2]

    @property
    def d(self) -> int:
        return self.positions.shape[3]

    @property
    def frame_mask(self) -> np.ndarray:
        """Boolean (T,), True for observed frames t < cond_len."""
        return np.arange(self.n_frames) < self.cond_len

    def select(self, idx) -> "TrajectoryBatch":
        """Sub-batch along the trajectory axis."""
        idx = np.asarray(idx)
        static = {k: v[idx] for k, v in self.node_static.items()}
        return TrajectoryBatch(self.positions[idx], self.cond_len, static)

    def permute_nodes(self, perm) -> "TrajectoryBatch":
        """Relabels nodes by perm; square (N, N) attributes are permuted on both axes."""
        perm = np.asarray(perm)
        N = self.n_nodes
        static = {}
        for k, v in self.node_static.items():
            if k in BATCH_LEVEL_STATIC:
                static[k] = v
            elif v.ndim >= 3 and v.shape[1] == N and v.shape[2] == N:
                static[k] = v[:, perm][:, :, perm]
            else:
                static[k] = v[:, perm]
        return TrajectoryBatch(self.positions[:, :, perm], self.cond_len, static)

    @staticmethod
    def concatenate(batches: list["TrajectoryBatch"]) -> "TrajectoryBatch":
        first = batches[0]
        pos = np.concatenate([b.positions for b in batches], axis=0)
        static = {
            k: np.concatenate([b.node_static[k] for b in batches], axis=0)
            for k in first.node_static
        }
        return TrajectoryBatch(pos, first.cond_len, static)


def to_increments(positions, anchor_index: int = 0) -> np.ndarray:
    """Frame-to-frame differences along the time axis.

    Time is axis 1 for (B,T,N,d) arrays and axis 0 otherwise. anchor_index names
    the frame a caller keeps for the from_increments round trip; the increments
    themselves do not depend on it.
    """
    positions = np.asarray(positions)
    axis = 1 if positions.ndim == 4 else 0
    T = positions.shape[axis]
    if T < 2:
        raise ShapeError(f"need at least two frames, got T={T}")
    if not 0 <= anchor_index < T:
        raise ValueError(f"anchor_index {anchor_index} out of range for T={T}")
    return np.diff(positions, axis=axis)


def from_increments(increments, anchor, anchor_index: int = 0) -> np.ndarray:
    """Rebuilds positions from increments; frame anchor_index equals anchor exactly.

    positions[t] = anchor + sum of increments between anchor_index and t (signed).
    """
    increments = np.asarray(increments)
    axis = 1 if increments.ndim == 4 else 0
    T = increments.shape[axis] + 1
    if not 0 <= anchor_index < T:
        raise ValueError(f"anchor_index {anchor_index} out of range for T={T}")
    anchor = np.asarray(anchor)
    frame_shape = increments.shape[:axis] + increments.shape[axis + 1 :]
    if anchor.shape != frame_shape and np.broadcast_shapes(anchor.shape, frame_shape) != frame_shape:
        raise ShapeError(f"anchor shape {anchor.shape} incompatible with frames {frame_shape}")

    out = np.empty(increments.shape[:axis] + (T,) + increments.shape[axis + 1 :], dtype=np.result_type(increments, anchor))
    idx = [slice(None)] * out.ndim
    idx[axis] = anchor_index
    out[tuple(idx)] = anchor
    for t in range(anchor_index + 1, T):
        it, ip, ii = list(idx), list(idx), list(idx)
        it[axis], ip[axis], ii[axis] = t, t - 1, t - 1
        out[tuple(it)] = out[tuple(ip)] + increments[tuple(ii)]
    for t in range(anchor_index - 1, -1, -1):
        it, ip, ii = list(idx), list(idx), list(idx)
        it[axis], ip[axis], ii[axis] = t, t + 1, t
        out[tuple(it)] = out[tuple(ip)] - increments[tuple(ii)]
    return out


# ---------------------------------------------------------------------------
# On-disk dataset container: one .npy per tensor plus a JSON sidecar.
# ---------------------------------------------------------------------------


@dataclass
class DatasetBundle:
    splits: dict[str, list[TrajectoryBatch]]
    meta: SystemMeta
    info: dict  # full sidecar contents


def save_dataset(
    out_dir,
    splits: dict[str, list[TrajectoryBatch]],
    meta: SystemMeta,
    generator: dict | None = None,
    seed: int | None = None,
    extra: dict | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar: dict = {
        "format_version": FORMAT_VERSION,
        "dataset_kind": meta.dataset_kind,
        "d": meta.d,
        "seed": seed,
        "generator": generator or {},
        "splits": {},
    }
    if meta.atom_types is not None:
        sidecar["atom_types"] = list(meta.atom_types)
    if extra:
        sidecar["extra"] = extra
    for split, batches in splits.items():
        groups = []
        for gi, batch in enumerate(batches):
            np.save(out_dir / f"{split}.g{gi}.positions.npy", batch.positions)
            for key, arr in batch.node_static.items():
                np.save(out_dir / f"{split}.g{gi}.static.{key}.npy", arr)
            groups.append(
                {
                    "n_traj": batch.n_traj,
                    "n_frames": batch.n_frames,
                    "n_nodes": batch.n_nodes,
                    "cond_len": batch.cond_len,
                    "static_keys": sorted(batch.node_static),
                }
            )
        sidecar["splits"][split] = {"groups": groups}
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return out_dir


def load_dataset(in_dir) -> DatasetBundle:
    in_dir = Path(in_dir)
    with open(in_dir / "meta.json") as fh:
        info = json.load(fh)
    if info.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {info.get('format_version')}")
    at = info.get("atom_types")
    meta = SystemMeta(info["dataset_kind"], info["d"], tuple(at) if at is not None else None)
    splits: dict[str, list[TrajectoryBatch]] = {}
    for split, entry in info["splits"].items():
        batches = []
        for gi, group in enumerate(entry["groups"]):
            pos = np.load(in_dir / f"{split}.g{gi}.positions.npy")
            static = {
                key: np.load(in_dir / f"{split}.g{gi}.static.{key}.npy")
                for key in group["static_keys"]
            }
            batches.append(TrajectoryBatch(pos, group["cond_len"], static))
        splits[split] = batches
    return DatasetBundle(splits, meta, info)
