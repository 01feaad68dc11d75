"""End-to-end training: optimization schedule, rotation augmentation, validation,
checkpointing, rollout evaluation, and the ablation harness."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .core import SystemMeta, TrajectoryBatch
from .evaluate import MetricsReport, ade as ade_metric, density_report, per_sample_ade, per_sample_fde
from .flowmatch import cfm_loss, make_flow_sample, sample_tau
from .net import ModelConfig, STFlowNet
from .prior import sample_prior_array
from .sampler import SolverConfig, integrate, model_field

VECTOR_STATIC = ("window_center",)  # static attrs living in the spatial coordinate frame


class NonFiniteLossError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 32
    n_augmentations: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    weight_decay: float = 1e-2  # optimizer-family default
    tau_dist: str = "sqrt_uniform"
    s: float = 4.0
    prior_kind: str = "random_walk"
    sigma_mode: str = "as_written"
    sigma_p: float = 0.0
    flow_space: str = "velocity"
    varying_c: bool = False
    divergence_factor: float = 1e3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def random_rotations(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n proper rotation matrices: one uniform angle per axis (d in {2, 3})."""
    if d == 2:
        a = rng.uniform(0, 2 * np.pi, n)
        return np.stack(
            [np.stack([np.cos(a), -np.sin(a)], -1), np.stack([np.sin(a), np.cos(a)], -1)], axis=1
        )
    if d == 3:
        out = np.empty((n, 3, 3))
        for i in range(n):
            ax, ay, az = rng.uniform(0, 2 * np.pi, 3)
            cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
            rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
            ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
            rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
            out[i] = rz @ ry @ rx
        return out
    raise ValueError(f"rotations only defined for d in (2, 3), got d={d}")


def rotate_batch(batch: TrajectoryBatch, matrices: np.ndarray) -> TrajectoryBatch:
    """Applies one rotation per trajectory to positions and coordinate-frame statics."""
    pos = np.einsum("bij,btnj->btni", matrices, batch.positions)
    static = {}
    for key, arr in batch.node_static.items():
        if key in VECTOR_STATIC:
            static[key] = np.einsum("bij,bj->bi", matrices, arr)
        else:
            static[key] = arr.copy()
    return TrajectoryBatch(pos, batch.cond_len, static)


def augment_rotate(batch: TrajectoryBatch, n_aug: int, rng: np.random.Generator) -> TrajectoryBatch:
    """Appends n_aug randomly rotated copies of the batch (one rotation per trajectory)."""
    if batch.d not in (2, 3):
        raise ValueError(f"rotation augmentation needs d in (2, 3), got d={batch.d}")
    if n_aug == 0:
        return batch
    copies = [batch]
    for _ in range(n_aug):
        copies.append(rotate_batch(batch, random_rotations(batch.n_traj, batch.d, rng)))
    return TrajectoryBatch.concatenate(copies)


# ---------------------------------------------------------------------------
# Steps and epochs
# ---------------------------------------------------------------------------


def to_torch_static(batch: TrajectoryBatch) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v, dtype=torch.float32) for k, v in batch.node_static.items()}


def _draw_flow_sample(positions: np.ndarray, cond_len: int, cfg: TrainConfig, rng):
    B, T = positions.shape[:2]
    c = int(rng.integers(1, T)) if cfg.varying_c else cond_len
    x0 = sample_prior_array(positions, c, cfg.prior_kind, cfg.s, rng, cfg.sigma_mode)
    tau = sample_tau(B, cfg.tau_dist, rng)
    return make_flow_sample(positions, x0, tau, cfg.sigma_p, cfg.flow_space, c, rng), c


def _loss_on_batch(net, positions, static_t, cond_len, cfg: TrainConfig, rng):
    fs, c = _draw_flow_sample(positions, cond_len, cfg, rng)
    x_tau = torch.as_tensor(fs.x_tau, dtype=torch.float32)
    u = torch.as_tensor(fs.u, dtype=torch.float32)
    tau = torch.as_tensor(fs.tau, dtype=torch.float32)
    v = net(x_tau, static_t, tau, c)
    return cfm_loss(v, u, torch.as_tensor(fs.loss_mask))


def training_step(net, optimizer, batch: TrajectoryBatch, cfg: TrainConfig, rng) -> float:
    """One draw of the conditional flow-matching objective plus an optimizer step."""
    static_t = to_torch_static(batch)
    loss = _loss_on_batch(net, batch.positions, static_t, batch.cond_len, cfg, rng)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite training loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def validation_loss(net, batches: list[TrajectoryBatch], cfg: TrainConfig, epoch: int) -> float:
    """CFM loss on the validation split with an epoch-derived seed, so resumed
    runs reproduce it exactly."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7777, epoch)))
    losses, weights = [], []
    net.eval()
    with torch.no_grad():
        for batch in batches:
            static_t = to_torch_static(batch)
            for start in range(0, batch.n_traj, cfg.batch_size):
                sub = batch.select(np.arange(start, min(start + cfg.batch_size, batch.n_traj)))
                loss = _loss_on_batch(net, sub.positions, to_torch_static(sub), sub.cond_len, cfg, rng)
                losses.append(float(loss))
                weights.append(sub.n_traj)
    net.train()
    return float(np.average(losses, weights=weights))


def make_optimizer(net, cfg: TrainConfig):
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    return opt, sched


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log: list[dict]
    best_val: float


def save_checkpoint(path, net, model_cfg, train_cfg, meta, opt, sched, epoch, best_val, log):
    torch.save(
        {
            "format": 1,
            "model_state": net.state_dict(),
            "model_config": model_cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "system_meta": meta.to_dict() if meta is not None else None,
            "optimizer_state": opt.state_dict(),
            "scheduler_state": sched.state_dict(),
            "epoch": epoch,
            "best_val": best_val,
            "log": log,
        },
        path,
    )


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model_cfg = ModelConfig.from_dict(ckpt["model_config"])
    net = STFlowNet(model_cfg)
    net.load_state_dict(ckpt["model_state"])
    net.eval()
    return net, ckpt


def train(
    splits: dict[str, list[TrajectoryBatch]],
    meta: SystemMeta,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
    resume_from=None,
) -> TrainResult:
    """Runs the training loop; keeps the best-validation and latest checkpoints.

    Fully deterministic given (seed, config): every stochastic draw of epoch k
    comes from a generator derived from (seed, k), so runs and resumes agree.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    net = STFlowNet(model_cfg)
    opt, sched = make_optimizer(net, train_cfg)
    start_epoch, best_val, log = 0, float("inf"), []
    if resume_from is not None:
        ckpt = torch.load(resume_from, map_location="cpu", weights_only=False)
        net.load_state_dict(ckpt["model_state"])
        opt.load_state_dict(ckpt["optimizer_state"])
        sched.load_state_dict(ckpt["scheduler_state"])
        start_epoch, best_val, log = ckpt["epoch"], ckpt["best_val"], list(ckpt["log"])

    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    initial_loss = log[0]["train_loss"] if log else None
    net.train()
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 1000, epoch)))
        losses = []
        for group in splits["train"]:
            batch = augment_rotate(group, train_cfg.n_augmentations, rng)
            order = rng.permutation(batch.n_traj)
            for start in range(0, batch.n_traj, train_cfg.batch_size):
                sub = batch.select(order[start : start + train_cfg.batch_size])
                losses.append(training_step(net, opt, sub, train_cfg, rng))
        train_loss = float(np.mean(losses))
        val_loss = validation_loss(net, splits["val"], train_cfg, epoch)
        sched.step(val_loss)
        log.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": opt.param_groups[0]["lr"],
            }
        )
        if initial_loss is None:
            initial_loss = train_loss
        if val_loss < best_val:
            best_val = val_loss
            save_checkpoint(best_path, net, model_cfg, train_cfg, meta, opt, sched,
                            epoch + 1, best_val, log)
        save_checkpoint(last_path, net, model_cfg, train_cfg, meta, opt, sched,
                        epoch + 1, best_val, log)
        if train_loss > train_cfg.divergence_factor * max(initial_loss, 1e-12):
            _write_log(out_dir, log, train_cfg, model_cfg)
            raise DivergenceError(
                f"epoch {epoch}: loss {train_loss:.3e} exceeds "
                f"{train_cfg.divergence_factor:g} x initial {initial_loss:.3e}"
            )
    if not best_path.exists():  # zero-epoch run
        save_checkpoint(best_path, net, model_cfg, train_cfg, meta, opt, sched, 0, best_val, log)
        save_checkpoint(last_path, net, model_cfg, train_cfg, meta, opt, sched, 0, best_val, log)
    _write_log(out_dir, log, train_cfg, model_cfg)
    return TrainResult(best_path, last_path, log, best_val)


def _write_log(out_dir, log, train_cfg, model_cfg):
    with open(Path(out_dir) / "training_log.json", "w") as fh:
        json.dump(
            {"log": log, "train_config": train_cfg.to_dict(), "model_config": model_cfg.to_dict()},
            fh,
            indent=2,
        )


# ---------------------------------------------------------------------------
# Rollouts and evaluation
# ---------------------------------------------------------------------------


def sample_rollouts(
    net,
    batch: TrajectoryBatch,
    train_cfg: TrainConfig,
    k: int,
    solver: SolverConfig,
    seed: int = 0,
    chunk_size: int = 200,
) -> list[np.ndarray]:
    """k stochastic rollouts; all stochasticity enters through the prior draw."""
    net.eval()
    preds = []
    for run in range(k):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 4242, run)))
        x0 = sample_prior_array(
            batch.positions, batch.cond_len, train_cfg.prior_kind, train_cfg.s, rng,
            train_cfg.sigma_mode,
        )
        chunks = []
        for start in range(0, batch.n_traj, chunk_size):
            sub = batch.select(np.arange(start, min(start + chunk_size, batch.n_traj)))
            field = model_field(net, to_torch_static(sub), sub.cond_len)
            chunks.append(
                integrate(field, x0[start : start + chunk_size], sub.cond_len,
                          train_cfg.flow_space, solver)
            )
        preds.append(np.concatenate(chunks, axis=0))
    return preds


def evaluate_rollouts(
    net,
    batches: list[TrajectoryBatch],
    train_cfg: TrainConfig,
    k: int = 5,
    solver: SolverConfig | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Mean-of-k and min-of-k displacement errors pooled over all groups."""
    solver = solver or SolverConfig()
    all_ade, all_fde = [], []
    hists = None
    for batch in batches:
        preds = sample_rollouts(net, batch, train_cfg, k, solver, seed)
        all_ade.append(np.stack([per_sample_ade(p, batch.positions, batch.cond_len) for p in preds]))
        all_fde.append(np.stack([per_sample_fde(p, batch.positions) for p in preds]))
        if hists is None:
            hists = density_report(preds[0], batch.positions, batch.cond_len)
    ades = np.concatenate(all_ade, axis=1)  # (k, total samples)
    fdes = np.concatenate(all_fde, axis=1)
    return MetricsReport(
        ade=float(ades.mean(axis=1).mean()),
        fde=float(fdes.mean(axis=1).mean()),
        min_k_ade=float(ades.min(axis=0).mean()),
        min_k_fde=float(fdes.min(axis=0).mean()),
        k=k,
        per_run_ade=[float(a) for a in ades.mean(axis=1)],
        per_run_fde=[float(f) for f in fdes.mean(axis=1)],
        speed_hist=hists[0],
        accel_hist=hists[1],
        nfe=solver.nfe,
        method=solver.method,
    )


def default_model_config(meta: SystemMeta, **overrides) -> ModelConfig:
    """Architecture defaults per dataset family (connectivity, layer count)."""
    from .features import ConnectivitySpec

    presets = {
        "gravity": dict(n_layers=3, connectivity=ConnectivitySpec("knn", k=10)),
        "springs": dict(n_layers=2, connectivity=ConnectivitySpec("knn", k=5)),
        "charged": dict(n_layers=3, connectivity=ConnectivitySpec("knn", k=5)),
        "md17": dict(n_layers=3, connectivity=ConnectivitySpec("knn", k=22)),
        "ethucy": dict(n_layers=1, connectivity=ConnectivitySpec("radius", r=8.0, max_edges=10)),
    }
    kw = dict(
        dataset_kind=meta.dataset_kind,
        d=meta.d,
        n_atom_types=len(meta.atom_types) if meta.atom_types else 0,
    )
    kw.update(presets[meta.dataset_kind])
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

MODEL_VARIANT_KEYS = ("use_spatial", "graph_updates", "n_layers", "hidden_dim")
TRAIN_VARIANT_KEYS = ("prior_kind", "s", "sigma_mode", "tau_dist", "flow_space")


def apply_variant(model_cfg: ModelConfig, train_cfg: TrainConfig, variant: dict):
    """Routes variant keys to the config they belong to; unknown keys are an error."""
    mc_kw = {k: v for k, v in variant.items() if k in MODEL_VARIANT_KEYS}
    tc_kw = {k: v for k, v in variant.items() if k in TRAIN_VARIANT_KEYS}
    unknown = set(variant) - set(mc_kw) - set(tc_kw) - {"name"}
    if unknown:
        raise ValueError(f"unknown ablation variant keys: {sorted(unknown)}")
    return replace(model_cfg, **mc_kw), replace(train_cfg, **tc_kw)


def ablate(
    splits,
    meta: SystemMeta,
    base_model_cfg: ModelConfig,
    base_train_cfg: TrainConfig,
    variants: list[dict],
    out_dir,
    k: int = 5,
    solver: SolverConfig | None = None,
) -> list[dict]:
    """Trains base plus each variant with a shared seed and budget; returns table rows."""
    out_dir = Path(out_dir)
    rows = []
    for variant in [{"name": "base"}] + list(variants):
        name = variant.get("name") or "_".join(f"{k}={v}" for k, v in variant.items())
        mc, tc = apply_variant(base_model_cfg, base_train_cfg, variant)
        result = train(splits, meta, mc, tc, out_dir / name)
        net, _ = load_checkpoint(result.best_checkpoint)
        report = evaluate_rollouts(net, splits["test"], tc, k=k, solver=solver, seed=tc.seed)
        rows.append(
            {
                "name": name,
                "ade": report.ade,
                "fde": report.fde,
                "spatial_params": net.spatial_parameter_count,
                "best_val": result.best_val,
            }
        )
    with open(out_dir / "ablation_table.json", "w") as fh:
        json.dump(rows, fh, indent=2)
    return rows
