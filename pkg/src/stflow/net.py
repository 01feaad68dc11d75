"""The vector-field network: alternating spatial message passing and temporal convolution.

Spatial layers act on positions through equivariant message passing; temporal
layers act on each node's hidden sequence with a 1-D UNet and decode velocity
updates. Between layers the working trajectory is updated in real space
(observed frames held fixed) and the graph is rebuilt from it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .features import (
    ConnectivitySpec,
    FlatEdges,
    build_edges,
    build_node_features,
    edge_feature_dim,
    node_feature_dim,
)
from .flowmatch import FlowSpace


@dataclass
class ModelConfig:
    dataset_kind: str = "springs"
    d: int = 3
    n_layers: int = 2
    hidden_dim: int = 64
    embed_dim: int = 16
    connectivity: ConnectivitySpec = field(default_factory=ConnectivitySpec)
    flow_space: str = "velocity"
    use_spatial: bool = True
    graph_updates: bool = True
    unet_res_blocks: int = 2
    unet_channel_mult: tuple[int, ...] = (1, 2)
    unet_head_channels: int = 64
    unet_scale_shift: bool = True
    attn_coarsest: bool = True
    tau_scale: float = 1000.0
    crowd_radius: float = 8.0
    n_atom_types: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim <= 0:
            raise ValueError("need n_layers >= 1 and hidden_dim > 0")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        FlowSpace(self.flow_space)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["connectivity"] = asdict(self.connectivity)
        out["unet_channel_mult"] = list(self.unet_channel_mult)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("connectivity"), dict):
            d["connectivity"] = ConnectivitySpec(**d["connectivity"])
        if "unet_channel_mult" in d:
            d["unet_channel_mult"] = tuple(d["unet_channel_mult"])
        return cls(**d)


def sinusoidal_embed(values, dim: int = 16) -> torch.Tensor:
    """Interleaved sin/cos embedding over geometrically spaced frequencies."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    values = torch.as_tensor(values, dtype=torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=values.dtype, device=values.device) / half
    )
    args = values.unsqueeze(-1) * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def _zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def _group_norm(ch: int) -> nn.GroupNorm:
    groups = min(32, ch)
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


def _mlp(in_dim, hidden, out_dim, final_act=False, zero_last=False):
    last = nn.Linear(hidden, out_dim)
    if zero_last:
        _zero_module(last)
    layers = [nn.Linear(in_dim, hidden), nn.SiLU(), last]
    if final_act:
        layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class SpatialLayer(nn.Module):
    """Equivariant graph convolution over one flattened (batch, frame) mega-graph.

    Messages combine the endpoint features, edge features, squared distance and
    the noise-level/frame embeddings; position updates average the message-gated
    relative positions over each node's neighborhood.
    """

    def __init__(self, hidden_dim: int, edge_dim: int, embed_dim: int = 16):
        super().__init__()
        self.phi_m = _mlp(2 * hidden_dim + edge_dim + 1 + 2 * embed_dim, hidden_dim, hidden_dim,
                          final_act=True)
        self.phi_h = _mlp(2 * hidden_dim + embed_dim, hidden_dim, hidden_dim)
        self.phi_x = _mlp(hidden_dim, hidden_dim, 1, zero_last=True)
        self.norm = nn.LayerNorm(hidden_dim)

    def forward(self, x_flat, h_flat, edges: FlatEdges, tau_emb_flat, t_emb_flat):
        """Returns (dx, h'); nodes with no neighbors get dx = 0, message sum = 0."""
        r, s = edges.receivers, edges.senders
        if r.numel() and (r.max() >= edges.n_nodes or s.max() >= edges.n_nodes):
            raise IndexError("edge index out of range")
        rel = x_flat[r] - x_flat[s]
        d2 = (rel * rel).sum(dim=-1, keepdim=True)
        m = self.phi_m(
            torch.cat([h_flat[r], h_flat[s], edges.features, d2, tau_emb_flat[r], t_emb_flat[r]], dim=-1)
        )
        msg_sum = torch.zeros_like(h_flat).index_add_(0, r, m)
        gated = self.phi_x(m) * rel
        num = torch.zeros_like(x_flat).index_add_(0, r, gated)
        cnt = torch.zeros(edges.n_nodes, 1, dtype=x_flat.dtype, device=x_flat.device)
        cnt.index_add_(0, r, torch.ones(r.shape[0], 1, dtype=x_flat.dtype, device=x_flat.device))
        dx = num / cnt.clamp(min=1.0)
        h_new = self.norm(self.phi_h(torch.cat([h_flat, tau_emb_flat, msg_sum], dim=-1)) + h_flat)
        return dx, h_new


class ResBlock1d(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, scale_shift=True, up=False, down=False):
        super().__init__()
        self.scale_shift = scale_shift
        self.up, self.down = up, down
        self.in_norm = _group_norm(in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch if scale_shift else out_ch)
        self.out_norm = _group_norm(out_ch)
        self.conv2 = _zero_module(nn.Conv1d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _resample(self, z):
        if self.down:
            return F.avg_pool1d(z, 2)
        if self.up:
            return F.interpolate(z, scale_factor=2, mode="nearest")
        return z

    def forward(self, z, emb):
        h = F.silu(self.in_norm(z))
        h = self._resample(h)
        z = self._resample(z)
        h = self.conv1(h)
        e = self.emb_proj(F.silu(emb)).unsqueeze(-1)
        if self.scale_shift:
            scale, shift = e.chunk(2, dim=1)
            h = self.out_norm(h) * (1 + scale) + shift
            h = F.silu(h)
        else:
            h = F.silu(self.out_norm(h + e))
        return self.skip(z) + self.conv2(h)


class AttentionBlock1d(nn.Module):
    def __init__(self, channels, head_channels=64):
        super().__init__()
        self.n_heads = max(1, channels // head_channels)
        self.norm = _group_norm(channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = _zero_module(nn.Conv1d(channels, channels, 1))

    def forward(self, z, emb=None):
        b, c, t = z.shape
        dh = c // self.n_heads
        q, k, v = self.qkv(self.norm(z)).reshape(b * self.n_heads, 3 * dh, t).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(dh), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, t)
        return z + self.proj(out)


class TemporalUNet(nn.Module):
    """1-D UNet over the frame axis with scale-shift noise-level conditioning."""

    def __init__(self, channels=64, res_blocks=2, channel_mult=(1, 2), head_channels=64,
                 embed_dim=16, scale_shift=True, attn_coarsest=True):
        super().__init__()
        self.factor = 2 ** (len(channel_mult) - 1)
        time_dim = channels * 4
        self.emb_mlp = nn.Sequential(
            nn.Linear(embed_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        coarsest = len(channel_mult) - 1

        def maybe_attn(level, ch, blocks):
            if attn_coarsest and level == coarsest:
                blocks.append(AttentionBlock1d(ch, head_channels))

        self.down = nn.ModuleList()
        skip_chs = [channels]
        ch = channels
        self.stem = nn.Conv1d(channels, channels, 3, padding=1)
        for level, mult in enumerate(channel_mult):
            for _ in range(res_blocks):
                blocks = nn.ModuleList([ResBlock1d(ch, mult * channels, time_dim, scale_shift)])
                ch = mult * channels
                maybe_attn(level, ch, blocks)
                self.down.append(blocks)
                skip_chs.append(ch)
            if level != coarsest:
                self.down.append(nn.ModuleList([ResBlock1d(ch, ch, time_dim, scale_shift, down=True)]))
                skip_chs.append(ch)
        self.middle = nn.ModuleList(
            [
                ResBlock1d(ch, ch, time_dim, scale_shift),
                AttentionBlock1d(ch, head_channels),
                ResBlock1d(ch, ch, time_dim, scale_shift),
            ]
        )
        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(channel_mult))):
            for i in range(res_blocks + 1):
                blocks = nn.ModuleList(
                    [ResBlock1d(ch + skip_chs.pop(), mult * channels, time_dim, scale_shift)]
                )
                ch = mult * channels
                maybe_attn(level, ch, blocks)
                if level and i == res_blocks:
                    blocks.append(ResBlock1d(ch, ch, time_dim, scale_shift, up=True))
                self.up.append(blocks)
        self.out_norm = _group_norm(ch)
        self.out_conv = nn.Conv1d(ch, channels, 3, padding=1)

    def forward(self, z, emb):
        """z is (rows, channels, T); emb is (rows, embed_dim) raw sinusoidal."""
        T = z.shape[-1]
        if T < 4:
            raise ValueError(f"temporal UNet needs T >= 4, got {T}")
        pad = (-T) % self.factor
        if pad:
            z = F.pad(z, (0, pad), mode="replicate")
        emb = self.emb_mlp(emb)
        h = self.stem(z)
        skips = [h]
        for blocks in self.down:
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
        for blk in self.middle:
            h = blk(h, emb)
        for blocks in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for blk in blocks:
                h = blk(h, emb)
        h = self.out_conv(F.silu(self.out_norm(h)))
        return h[..., :T]


class TemporalConv(nn.Module):
    """One temporal layer: per-node UNet over frames plus the velocity decode head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.unet = TemporalUNet(
            channels=cfg.hidden_dim,
            res_blocks=cfg.unet_res_blocks,
            channel_mult=cfg.unet_channel_mult,
            head_channels=cfg.unet_head_channels,
            embed_dim=cfg.embed_dim,
            scale_shift=cfg.unet_scale_shift,
            attn_coarsest=cfg.attn_coarsest,
        )
        self.phi_v = _mlp(cfg.hidden_dim, cfg.hidden_dim, cfg.d, zero_last=True)

    def forward(self, h, tau_emb):
        """h is (B, T, N, C); returns (dv (B, T, N, d), h' (B, T, N, C))."""
        B, T, N, C = h.shape
        z = h.permute(0, 2, 3, 1).reshape(B * N, C, T)
        emb = tau_emb.repeat_interleave(N, dim=0)
        out = self.unet(z, emb)
        h_new = out.reshape(B, N, C, T).permute(0, 3, 1, 2)
        return self.phi_v(h_new), h_new


def _aligned_increments(x: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.zeros_like(x[:, :1]), x[:, 1:] - x[:, :-1]], dim=1)


def _frame_add(x, delta, c):
    """x + delta on frames t >= c; observed frames pass through bit-exactly."""
    return torch.cat([x[:, :c], x[:, c:] + delta[:, c:]], dim=1)


def _velocity_add(x, dv, c):
    """Adds dv to the generated increments; positions rebuilt by cumsum from frame c-1."""
    return torch.cat([x[:, :c], x[:, c:] + torch.cumsum(dv[:, c:], dim=1)], dim=1)


class STFlowNet(nn.Module):
    """Full vector field v(x_tau, tau): builds features and graph from the current
    trajectory, alternates spatial and temporal layers with real-space updates,
    and returns the field in the configured flow space."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        feat_dim = node_feature_dim(cfg.dataset_kind, cfg.d, cfg.n_atom_types)
        self.encoder = nn.Linear(feat_dim, cfg.hidden_dim)
        edge_dim = edge_feature_dim(cfg.dataset_kind, cfg.d)
        if cfg.use_spatial:
            self.spatial = nn.ModuleList(
                SpatialLayer(cfg.hidden_dim, edge_dim, cfg.embed_dim) for _ in range(cfg.n_layers)
            )
        else:
            self.spatial = nn.ModuleList()
        self.temporal = nn.ModuleList(TemporalConv(cfg) for _ in range(cfg.n_layers))

    @property
    def spatial_parameter_count(self) -> int:
        return sum(p.numel() for p in self.spatial.parameters())

    def _build_edges(self, x, static):
        return build_edges(x, self.cfg.connectivity, static, self.cfg.dataset_kind,
                           self.cfg.crowd_radius)

    def forward(self, x, static, tau, cond_len: int):
        cfg = self.cfg
        B, T, N, d = x.shape
        if d != cfg.d:
            raise ValueError(f"model built for d={cfg.d}, got {d}")
        c = int(cond_len)
        tau = torch.as_tensor(tau, dtype=x.dtype, device=x.device).reshape(B)
        tau_emb = sinusoidal_embed(tau * cfg.tau_scale, cfg.embed_dim)
        t_emb = sinusoidal_embed(torch.arange(T, device=x.device), cfg.embed_dim)
        M = B * T * N
        tau_flat = tau_emb[:, None, None, :].expand(B, T, N, cfg.embed_dim).reshape(M, -1)
        t_flat = t_emb[None, :, None, :].expand(B, T, N, cfg.embed_dim).reshape(M, -1)

        h = self.encoder(build_node_features(x, static, cfg.dataset_kind, cfg.crowd_radius))
        x_cur = x
        edges = self._build_edges(x_cur, static) if cfg.use_spatial else None
        dv = None
        for li in range(cfg.n_layers):
            if cfg.use_spatial:
                dx_flat, h_flat = self.spatial[li](
                    x_cur.reshape(M, d), h.reshape(M, -1), edges, tau_flat, t_flat
                )
                h = h_flat.reshape(B, T, N, -1)
                if cfg.graph_updates:
                    x_cur = _frame_add(x_cur, dx_flat.reshape(B, T, N, d), c)
            dv, h = self.temporal[li](h, tau_emb)
            if cfg.graph_updates:
                x_cur = _velocity_add(x_cur, dv, c)
                if cfg.use_spatial and li < cfg.n_layers - 1:
                    edges = self._build_edges(x_cur, static)

        space = FlowSpace(cfg.flow_space)
        if cfg.graph_updates:
            if space is FlowSpace.VELOCITY:
                return _aligned_increments(x_cur) - _aligned_increments(x)
            return x_cur - x
        gen = (torch.arange(T, device=x.device) >= c).to(x.dtype)[None, :, None, None]
        dv = dv * gen
        if space is FlowSpace.VELOCITY:
            return dv
        return torch.cat([dv[:, :c], torch.cumsum(dv[:, c:], dim=1)], dim=1)
