"""Unified command-line entry point: data generation, ingestion, training,
sampling, evaluation, ablations, sweeps, and plots.

Every command writes a run manifest into its output directory; re-running the
argv recorded there (with the same inputs) reproduces the outputs bit for bit.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import IngestError, load_dataset, save_dataset
from .datasets import GeneratorConfig, generate_nbody, load_ethucy, load_md17
from .evaluate import MetricsReport, rollout_report
from .features import ConnectivitySpec
from .net import ModelConfig
from .pipeline import (
    TrainConfig,
    ablate,
    default_model_config,
    evaluate_rollouts,
    load_checkpoint,
    sample_rollouts,
    train,
)
from .prior import prior_baseline_predict
from .sampler import SolverConfig

DATA_ROOT_ENV = "STFLOW_DATA_ROOT"


class CliError(Exception):
    """Validation problem: bad flags, config keys, or inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _resolve(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(_resolve(path)) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping")
    return data


def _check_keys(data: dict, cls, where: str):
    allowed = {f.name for f in dataclass_fields(cls)}
    for key in data:
        if key not in allowed:
            raise CliError(f"unknown config key {key!r} in {where}")


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir, command: str, argv: list[str], config: dict,
                   inputs: list[str], outputs: list[str], seed, started: float):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "artifact_version": __version__,
        "wall_clock_s": time.time() - started,
        "host": {"platform": platform.platform(), "python": platform.python_version()},
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _write_metrics(out_dir, report: MetricsReport, extra: dict | None = None):
    payload = report.to_metrics_json()
    if extra:
        payload.update(extra)
    with open(Path(out_dir) / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def _plot_density(out_dir, report: MetricsReport, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    rows = []
    fig, axes = plt.subplots(2, 2, figsize=(10, 6))
    for col, (name, hist) in enumerate(
        [("speed", report.speed_hist), ("acceleration", report.accel_hist)]
    ):
        centers = 0.5 * (hist.bin_edges[1:-2] + hist.bin_edges[2:-1])  # interior bins
        for row_i, log in enumerate((False, True)):
            ax = axes[row_i][col]
            ax.plot(centers, hist.truth_mass[1:-1], label="ground truth", lw=1.5)
            ax.plot(centers, hist.pred_mass[1:-1], label="generated", lw=1.5)
            if log:
                ax.set_yscale("log")
            ax.set_xlabel(name)
            ax.set_ylabel("log mass" if log else "mass")
            if row_i == 0 and col == 0:
                ax.legend()
        for center, p, q in zip(centers, hist.pred_mass[1:-1], hist.truth_mass[1:-1]):
            rows.append({"metric": name, "bin_center": center, "pred": p, "truth": q})
    fig.suptitle(f"{title} (speed OVL {report.speed_hist.overlap:.3f})")
    fig.tight_layout()
    fig.savefig(out_dir / "density.png", dpi=120)
    plt.close(fig)
    with open(out_dir / "density.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "bin_center", "pred", "truth"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, argv):
    started = time.time()
    overrides = _load_config_file(args.config)
    _check_keys(overrides, GeneratorConfig, args.config or "--config")
    overrides.setdefault("system", args.system)
    if overrides["system"] != args.system:
        raise CliError(f"--system {args.system} conflicts with config system {overrides['system']}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = GeneratorConfig.defaults(args.system, **{k: v for k, v in overrides.items() if k != "system"})
    splits, meta, retries = generate_nbody(cfg)
    out = _resolve(args.out)
    save_dataset(out, splits, meta, generator=cfg.to_dict(), seed=cfg.seed,
                 extra={"retries": retries})
    write_manifest(out, "gen-data", argv, cfg.to_dict(), [], [str(out)], cfg.seed, started)
    print(f"wrote {sum(b.n_traj for s in splits.values() for b in s)} trajectories to {out}"
          f" (retries {retries})")
    return 0


def cmd_ingest(args, argv):
    started = time.time()
    path = _resolve(args.path)
    if args.kind == "md17":
        if not args.molecule:
            raise CliError("--molecule is required for md17 ingestion")
        splits, meta, info = load_md17(path, args.molecule, stride_keep=args.stride_keep,
                                       window_stride=args.window_stride, T=args.frames,
                                       c=args.cond_len)
    else:
        splits, meta, info = load_ethucy(path, scene=args.scene, c=args.cond_len_ethucy,
                                         f=args.pred_len)
    out = _resolve(args.out)
    save_dataset(out, splits, meta, generator=info, seed=None, extra=info)
    cfgd = {"kind": args.kind, **info}
    write_manifest(out, "ingest", argv, cfgd, [str(path)], [str(out)], None, started)
    print(f"ingested {info['n_windows']} windows to {out}")
    return 0


def _train_configs_from_args(args, meta):
    cfg_file = _load_config_file(args.config)
    model_over = cfg_file.get("model", {})
    train_over = cfg_file.get("train", {})
    for key in cfg_file:
        if key not in ("model", "train"):
            raise CliError(f"unknown config key {key!r} in {args.config} (use model:/train:)")
    _check_keys(model_over, ModelConfig, "model section")
    _check_keys(train_over, TrainConfig, "train section")
    if isinstance(model_over.get("connectivity"), str):
        model_over["connectivity"] = ConnectivitySpec.parse(model_over["connectivity"])
    flag_model = {"n_layers": args.layers, "hidden_dim": args.hidden, "flow_space": args.flow_space}
    if args.connectivity:
        flag_model["connectivity"] = ConnectivitySpec.parse(args.connectivity)
    flag_train = {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "n_augmentations": args.augmentations, "tau_dist": args.tau_dist, "s": args.s,
        "prior_kind": args.prior, "seed": args.seed,
    }
    model_over.update({k: v for k, v in flag_model.items() if v is not None})
    train_over.update({k: v for k, v in flag_train.items() if v is not None})
    model_cfg = default_model_config(meta, **model_over)
    train_cfg = TrainConfig(**train_over)
    return model_cfg, train_cfg


def cmd_train(args, argv):
    started = time.time()
    bundle = load_dataset(_resolve(args.data))
    model_cfg, train_cfg = _train_configs_from_args(args, bundle.meta)
    out = _resolve(args.out)
    result = train(bundle.splits, bundle.meta, model_cfg, train_cfg, out)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    write_manifest(out, "train", argv, config, [str(_resolve(args.data))],
                   [str(result.best_checkpoint), str(result.last_checkpoint)],
                   train_cfg.seed, started)
    print(f"best validation loss {result.best_val:.6f} -> {result.best_checkpoint}")
    return 0


def cmd_sample(args, argv):
    started = time.time()
    from .core import TrajectoryBatch

    bundle = load_dataset(_resolve(args.data))
    net, ckpt = load_checkpoint(_resolve(args.checkpoint))
    train_cfg = TrainConfig.from_dict(ckpt["train_config"])
    solver = SolverConfig(method=args.method, nfe=args.nfe, seed=args.seed)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batches = bundle.splits[args.split]
    per_run: list[list[TrajectoryBatch]] = [[] for _ in range(args.runs)]
    for batch in batches:
        preds = sample_rollouts(net, batch, train_cfg, args.runs, solver, seed=args.seed)
        for run, pred in enumerate(preds):
            per_run[run].append(TrajectoryBatch(pred, batch.cond_len, batch.node_static))
    config = {"nfe": args.nfe, "method": args.method, "runs": args.runs, "seed": args.seed,
              "split": args.split}
    for run, groups in enumerate(per_run):
        save_dataset(out / f"run{run}", {args.split: groups}, bundle.meta,
                     generator=config, seed=args.seed)
    write_manifest(out, "sample", argv, config,
                   [str(_resolve(args.data)), str(_resolve(args.checkpoint))], [str(out)],
                   args.seed, started)
    print(f"sampled {args.runs} rollouts for {sum(b.n_traj for b in batches)} trajectories")
    return 0


def cmd_eval(args, argv):
    started = time.time()
    bundle = load_dataset(_resolve(args.data))
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batches = bundle.splits[args.split]
    if args.prior_baseline:
        report = _prior_baseline_report(batches, args.s, args.runs, args.seed)
        label = "prior baseline"
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint (or --prior-baseline)")
        net, ckpt = load_checkpoint(_resolve(args.checkpoint))
        train_cfg = TrainConfig.from_dict(ckpt["train_config"])
        solver = SolverConfig(method=args.method, nfe=args.nfe)
        report = evaluate_rollouts(net, batches, train_cfg, k=args.runs, solver=solver,
                                   seed=args.seed)
        label = "model"
    payload = _write_metrics(out, report, {"protocol": label})
    _plot_density(out, report, f"{bundle.meta.dataset_kind} {label}")
    config = {"runs": args.runs, "nfe": args.nfe, "method": args.method, "seed": args.seed,
              "prior_baseline": bool(args.prior_baseline), "s": args.s, "split": args.split}
    inputs = [str(_resolve(args.data))] + ([str(_resolve(args.checkpoint))] if args.checkpoint else [])
    write_manifest(out, "eval", argv, config, inputs, [str(out / "metrics.json")],
                   args.seed, started)
    print(json.dumps({k: payload[k] for k in ("ade", "fde", "min_k_ade", "min_k_fde")}, indent=2))
    return 0


def _prior_baseline_report(batches, s, runs, seed):
    from .evaluate import per_sample_ade, per_sample_fde
    from .evaluate import density_report as density

    all_ade, all_fde, hists = [], [], None
    for batch in batches:
        preds = [
            prior_baseline_predict(batch, s, np.random.default_rng(
                np.random.SeedSequence((seed, 4242, run))))
            for run in range(runs)
        ]
        all_ade.append(np.stack([per_sample_ade(p, batch.positions, batch.cond_len) for p in preds]))
        all_fde.append(np.stack([per_sample_fde(p, batch.positions) for p in preds]))
        if hists is None:
            hists = density(preds[0], batch.positions, batch.cond_len)
    ades = np.concatenate(all_ade, axis=1)
    fdes = np.concatenate(all_fde, axis=1)
    return MetricsReport(
        ade=float(ades.mean(axis=1).mean()), fde=float(fdes.mean(axis=1).mean()),
        min_k_ade=float(ades.min(axis=0).mean()), min_k_fde=float(fdes.min(axis=0).mean()),
        k=runs, per_run_ade=[float(a) for a in ades.mean(axis=1)],
        per_run_fde=[float(f) for f in fdes.mean(axis=1)],
        speed_hist=hists[0], accel_hist=hists[1],
    )


def cmd_prior_baseline(args, argv):
    args.prior_baseline = True
    args.checkpoint = None
    args.nfe = 0
    args.method = "euler"
    return cmd_eval(args, argv)


def cmd_ablate(args, argv):
    started = time.time()
    bundle = load_dataset(_resolve(args.data))
    suite = _load_config_file(args.suite)
    base = suite.get("base", {})
    _check_keys(base.get("model", {}), ModelConfig, "base.model")
    _check_keys(base.get("train", {}), TrainConfig, "base.train")
    model_over = dict(base.get("model", {}))
    if isinstance(model_over.get("connectivity"), str):
        model_over["connectivity"] = ConnectivitySpec.parse(model_over["connectivity"])
    model_cfg = default_model_config(bundle.meta, **model_over)
    train_cfg = TrainConfig(**base.get("train", {}))
    variants = suite.get("variants", [])
    out = _resolve(args.out)
    solver = SolverConfig(method="euler", nfe=args.nfe)
    rows = ablate(bundle.splits, bundle.meta, model_cfg, train_cfg, variants, out,
                  k=args.runs, solver=solver)
    config = {"base": base, "variants": variants, "nfe": args.nfe, "runs": args.runs}
    write_manifest(out, "ablate", argv, config, [str(_resolve(args.data))],
                   [str(out / "ablation_table.json")], train_cfg.seed, started)
    width = max(len(r["name"]) for r in rows)
    for row in rows:
        print(f"{row['name']:<{width}}  ADE {row['ade']:.4f}  FDE {row['fde']:.4f}")
    return 0


def cmd_nfe_sweep(args, argv):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .pipeline import to_torch_static
    from .sampler import model_field, nfe_sweep
    from .evaluate import ade as ade_fn
    from .prior import sample_prior_array

    started = time.time()
    bundle = load_dataset(_resolve(args.data))
    net, ckpt = load_checkpoint(_resolve(args.checkpoint))
    train_cfg = TrainConfig.from_dict(ckpt["train_config"])
    batch = bundle.splits[args.split][0]
    if args.limit:
        batch = batch.select(np.arange(min(args.limit, batch.n_traj)))
    field = model_field(net, to_torch_static(batch), batch.cond_len)

    def x0_fn(run):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, 4242, run)))
        return sample_prior_array(batch.positions, batch.cond_len, train_cfg.prior_kind,
                                  train_cfg.s, rng, train_cfg.sigma_mode)

    nfe_list = [int(x) for x in args.nfe_list.split(",")]
    methods = args.methods.split(",")
    rows = nfe_sweep(field, x0_fn, batch.positions, batch.cond_len, train_cfg.flow_space,
                     nfe_list, methods, lambda p, t: ade_fn(p, t, batch.cond_len),
                     n_runs=args.runs)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nfe_sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "nfe", "steps", "ade",
                                                "runtime_per_batch"])
        writer.writeheader()
        writer.writerows(rows)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        if not sub:
            continue
        ax1.plot([r["nfe"] for r in sub], [r["ade"] for r in sub], marker="o", label=method)
        ax2.plot([r["nfe"] for r in sub], [r["runtime_per_batch"] for r in sub], marker="o",
                 label=method)
    ax1.set_xlabel("field evaluations"), ax1.set_ylabel("ADE"), ax1.legend()
    ax2.set_xlabel("field evaluations"), ax2.set_ylabel("seconds per batch")
    fig.tight_layout()
    fig.savefig(out / "nfe_sweep.png", dpi=120)
    plt.close(fig)
    config = {"nfe_list": nfe_list, "methods": methods, "runs": args.runs, "limit": args.limit}
    write_manifest(out, "nfe-sweep", argv, config,
                   [str(_resolve(args.data)), str(_resolve(args.checkpoint))],
                   [str(out / "nfe_sweep.csv")], args.seed, started)
    print(f"swept {len(rows)} (method, nfe) cells -> {out / 'nfe_sweep.csv'}")
    return 0


def cmd_plot_density(args, argv):
    started = time.time()
    bundle = load_dataset(_resolve(args.data))
    batch = bundle.splits[args.split][0]
    pred_path = _resolve(args.pred)
    if pred_path.is_dir():  # a sample-command run directory (dataset container)
        pred = load_dataset(pred_path).splits[args.split][0].positions
    else:
        pred = np.load(pred_path)
    report = rollout_report([pred], batch.positions, batch.cond_len)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _plot_density(out, report, f"{bundle.meta.dataset_kind} density")
    _write_metrics(out, report, {"protocol": "plot-density"})
    write_manifest(out, "plot-density", argv, {"pred": str(args.pred), "split": args.split},
                   [str(_resolve(args.data)), str(_resolve(args.pred))],
                   [str(out / "density.png")], None, started)
    print(f"density plot -> {out / 'density.png'} (speed OVL {report.speed_hist.overlap:.3f})")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="stflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic N-body dataset")
    p.add_argument("--system", required=True, choices=["gravity", "springs", "charged"])
    p.add_argument("--config", help="YAML file of GeneratorConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="ingest an external trajectory file")
    p.add_argument("--kind", required=True, choices=["md17", "ethucy"])
    p.add_argument("--path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--molecule")
    p.add_argument("--scene")
    p.add_argument("--stride-keep", type=int, default=10)
    p.add_argument("--window-stride", type=int, default=10)
    p.add_argument("--frames", type=int, default=30, help="window length T (md17)")
    p.add_argument("--cond-len", type=int, default=10, help="observed frames c (md17)")
    p.add_argument("--cond-len-ethucy", type=int, default=8)
    p.add_argument("--pred-len", type=int, default=12)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the vector-field network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML with model:/train: sections")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--connectivity", help="fc | knn:K | radius:R:MAX")
    p.add_argument("--augmentations", type=int)
    p.add_argument("--tau-dist", choices=["uniform", "sqrt_uniform"])
    p.add_argument("--s", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--prior", choices=["random_walk", "gauss_zero", "gauss_last"])
    p.add_argument("--flow-space", choices=["velocity", "position"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate trajectory completions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--nfe", type=int, default=50)
    p.add_argument("--method", choices=["euler", "rk4"], default="euler")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="displacement errors and densities")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--nfe", type=int, default=50)
    p.add_argument("--method", choices=["euler", "rk4"], default="euler")
    p.add_argument("--prior-baseline", action="store_true",
                   help="evaluate raw prior samples instead of a model")
    p.add_argument("--s", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prior-baseline", help="metrics of raw prior samples")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--s", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prior_baseline)

    p = sub.add_parser("ablate", help="train and compare model/prior variants")
    p.add_argument("--suite", required=True, help="YAML with base: and variants:")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--nfe", type=int, default=10)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("nfe-sweep", help="accuracy and runtime vs solver budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--nfe-list", default="1,2,5,10,25,50")
    p.add_argument("--methods", default="euler")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--limit", type=int, default=0, help="cap on test trajectories (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_nfe_sweep)

    p = sub.add_parser("plot-density", help="density plots for saved predictions")
    p.add_argument("--pred", required=True, help=".npy prediction array")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_plot_density)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IngestError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
