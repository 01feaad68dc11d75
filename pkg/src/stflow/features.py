"""Node features and per-timestep graph construction for the vector-field network.

Everything here is recomputed from the current (possibly noisy) positions each
time the field is evaluated, so velocities and accelerations are backward
finite differences of whatever trajectory the network is looking at right now.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import EdgeSet

CONNECTIVITY_KINDS = ("fully_connected", "knn", "radius")


@dataclass(frozen=True)
class ConnectivitySpec:
    kind: str = "fully_connected"
    k: int = 1
    r: float = 1.0
    max_edges: int | None = None

    def __post_init__(self):
        if self.kind not in CONNECTIVITY_KINDS:
            raise ValueError(f"connectivity kind must be one of {CONNECTIVITY_KINDS}")
        if self.kind == "knn" and self.k < 1:
            raise ValueError("knn needs k >= 1")
        if self.kind == "radius" and self.r <= 0:
            raise ValueError("radius needs r > 0")

    @classmethod
    def parse(cls, text: str) -> "ConnectivitySpec":
        """Parses 'fc', 'knn:5', or 'radius:8:10' (radius with max edges per node)."""
        parts = text.split(":")
        if parts[0] in ("fc", "fully_connected"):
            return cls("fully_connected")
        if parts[0] == "knn":
            return cls("knn", k=int(parts[1]))
        if parts[0] == "radius":
            max_edges = int(parts[2]) if len(parts) > 2 else None
            return cls("radius", r=float(parts[1]), max_edges=max_edges)
        raise ValueError(f"cannot parse connectivity {text!r}")


@dataclass
class FlatEdges:
    """All timesteps' edges flattened over (batch, frame, node) for scatter ops."""

    receivers: torch.Tensor  # (E,) long, flat node ids
    senders: torch.Tensor  # (E,) long
    features: torch.Tensor  # (E, F)
    n_nodes: int  # total flat node count B*T*N


def backward_velocities(x: torch.Tensor) -> torch.Tensor:
    """v[t] = x[t] - x[t-1]; the first frame copies the increment into frame 1."""
    v = torch.zeros_like(x)
    v[:, 1:] = x[:, 1:] - x[:, :-1]
    if x.shape[1] > 1:
        v[:, 0] = v[:, 1]
    return v


def backward_accelerations(x: torch.Tensor) -> torch.Tensor:
    v = backward_velocities(x)
    a = torch.zeros_like(v)
    a[:, 1:] = v[:, 1:] - v[:, :-1]
    if x.shape[1] > 1:
        a[:, 0] = a[:, 1]
    return a


def crowdedness(x: torch.Tensor, radius: float) -> torch.Tensor:
    """Number of other nodes within radius, per (B, T, N)."""
    diff = x.unsqueeze(3) - x.unsqueeze(2)
    dist = diff.norm(dim=-1)
    near = (dist <= radius).float()
    N = x.shape[2]
    near = near - torch.eye(N, device=x.device, dtype=near.dtype)
    return near.clamp(min=0).sum(dim=-1)


def node_feature_dim(dataset_kind: str, d: int, n_atom_types: int = 0) -> int:
    base = 3 * d + 2  # pos, vel, |vel|, acc, |acc|
    if dataset_kind == "charged":
        return base + 1
    if dataset_kind == "md17":
        return base + n_atom_types
    if dataset_kind == "ethucy":
        return base + 1
    return base


def edge_feature_dim(dataset_kind: str, d: int) -> int:
    base = 2 * d + 1  # distance, rel pos, rel vel
    if dataset_kind == "springs":
        return base + 1
    if dataset_kind == "ethucy":
        return base + 2
    return base


def build_node_features(
    x: torch.Tensor,
    static: dict[str, torch.Tensor],
    dataset_kind: str,
    crowd_radius: float = 8.0,
) -> torch.Tensor:
    """Raw per-node features (B, T, N, F) from the current trajectory."""
    B, T, N, d = x.shape
    v = backward_velocities(x)
    a = backward_accelerations(x)
    cols = [x, v, v.norm(dim=-1, keepdim=True), a, a.norm(dim=-1, keepdim=True)]
    if dataset_kind == "charged":
        cols.append(static["charges"].reshape(B, 1, N, 1).expand(B, T, N, 1))
    elif dataset_kind == "md17":
        onehot = static["atom_onehot"]
        cols.append(onehot.reshape(B, 1, N, -1).expand(B, T, N, onehot.shape[-1]))
    elif dataset_kind == "ethucy":
        cols.append(crowdedness(x, crowd_radius).unsqueeze(-1))
    elif dataset_kind not in ("gravity", "springs"):
        raise ValueError(f"no feature schema for dataset kind {dataset_kind!r}")
    return torch.cat(cols, dim=-1)


def _adjacency(x: torch.Tensor, spec: ConnectivitySpec) -> torch.Tensor:
    """Boolean (B, T, N, N) with [.., i, j] true when j is a neighbor of i."""
    B, T, N, _ = x.shape
    eye = torch.eye(N, dtype=torch.bool, device=x.device)
    if spec.kind == "fully_connected":
        return (~eye).expand(B, T, N, N)
    dist = (x.unsqueeze(3) - x.unsqueeze(2)).norm(dim=-1)
    dist = dist.masked_fill(eye, torch.inf)
    k = spec.k
    if spec.kind == "knn" and k >= N:
        import warnings

        warnings.warn(f"knn k={k} >= N={N}; clamping to {N - 1}")
        k = N - 1
    # Stable sort: equal distances rank the smaller node index first.
    order = torch.argsort(dist, dim=-1, stable=True)
    rank = torch.empty_like(order)
    rank.scatter_(-1, order, torch.arange(N, device=x.device).expand_as(order))
    if spec.kind == "knn":
        return rank < k
    adj = dist <= spec.r
    if spec.max_edges is not None:
        adj &= rank < spec.max_edges
    return adj


def build_edges(
    x: torch.Tensor,
    spec: ConnectivitySpec,
    static: dict[str, torch.Tensor],
    dataset_kind: str,
    crowd_radius: float = 8.0,
) -> FlatEdges:
    """Per-timestep directed edges with features, flattened over (B, T, N).

    Edge features follow the dataset schema: Euclidean distance, relative
    position and relative velocity (receiver minus sender), plus the spring
    indicator (springs) or relative turning angle and relative crowdedness
    (pedestrians).
    """
    if not torch.isfinite(x).all():
        raise ValueError("positions must be finite to build edges")
    B, T, N, d = x.shape
    adj = _adjacency(x, spec)
    idx = adj.nonzero(as_tuple=False)  # (E, 4): b, t, i, j; row-major, deterministic
    b, t, i, j = idx.unbind(dim=1)
    flat = (b * T + t) * N
    receivers, senders = flat + i, flat + j

    v = backward_velocities(x)
    xi, xj = x[b, t, i], x[b, t, j]
    vi, vj = v[b, t, i], v[b, t, j]
    rel_pos = xi - xj
    cols = [rel_pos.norm(dim=-1, keepdim=True), rel_pos, vi - vj]
    if dataset_kind == "springs":
        cols.append(static["spring_adj"][b, i, j].unsqueeze(-1))
    elif dataset_kind == "ethucy":
        cross = vi[:, 0] * vj[:, 1] - vi[:, 1] * vj[:, 0]
        dot = (vi * vj).sum(dim=-1)
        moving = (vi.norm(dim=-1) * vj.norm(dim=-1)) > 1e-8
        angle = torch.atan2(
            torch.where(moving, cross, torch.zeros_like(cross)),
            torch.where(moving, dot, torch.ones_like(dot)),
        )
        crowd = crowdedness(x, crowd_radius)
        cols.append(angle.unsqueeze(-1))
        cols.append((crowd[b, t, i] - crowd[b, t, j]).unsqueeze(-1))
    return FlatEdges(receivers, senders, torch.cat(cols, dim=-1), B * T * N)


def extract_edge_sets(
    x: torch.Tensor,
    spec: ConnectivitySpec,
    static: dict[str, torch.Tensor] | None = None,
    dataset_kind: str = "gravity",
) -> list[list[EdgeSet]]:
    """Per-(trajectory, timestep) EdgeSet views of build_edges, for inspection."""
    B, T, N, _ = x.shape
    edges = build_edges(x, spec, static or {}, dataset_kind)
    out = [[None] * T for _ in range(B)]
    recv = edges.receivers.numpy()
    send = edges.senders.numpy()
    feats = edges.features.detach().numpy()
    graph = recv // N
    for g in range(B * T):
        sel = graph == g
        out[g // T][g % T] = EdgeSet(recv[sel] % N, send[sel] % N, feats[sel], N)
    return out
