"""Displacement-error metrics, min-of-k evaluation, and dynamics density comparison."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _displacements(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    return np.linalg.norm(pred - truth, axis=-1)  # (B, T, N)


def ade(pred, truth, c: int) -> float:
    """Mean Euclidean displacement over predicted frames and nodes (batch mean)."""
    err = _displacements(pred, truth)
    if c >= err.shape[1]:
        raise ValueError(f"cond_len {c} leaves no predicted frames for T={err.shape[1]}")
    return float(err[:, c:].mean())


def fde(pred, truth) -> float:
    """Mean displacement at the final frame only."""
    return float(_displacements(pred, truth)[:, -1].mean())


def per_sample_ade(pred, truth, c: int) -> np.ndarray:
    return _displacements(pred, truth)[:, c:].mean(axis=(1, 2))


def per_sample_fde(pred, truth) -> np.ndarray:
    return _displacements(pred, truth)[:, -1].mean(axis=-1)


def min_k_metrics(pred_runs, truth, c: int) -> tuple[float, float]:
    """Per-sample minimum ADE / FDE over k rollouts, each averaged over the set.

    The minima are taken independently: a run may win on ADE and lose on FDE.
    """
    if len(pred_runs) == 0:
        raise ValueError("need at least one prediction run")
    ades = np.stack([per_sample_ade(p, truth, c) for p in pred_runs])  # (k, B)
    fdes = np.stack([per_sample_fde(p, truth) for p in pred_runs])
    return float(ades.min(axis=0).mean()), float(fdes.min(axis=0).mean())


def mean_k_metrics(pred_runs, truth, c: int) -> tuple[float, float]:
    """Dataset ADE / FDE per run, then averaged over the k runs."""
    if len(pred_runs) == 0:
        raise ValueError("need at least one prediction run")
    ades = [ade(p, truth, c) for p in pred_runs]
    fdes = [fde(p, truth) for p in pred_runs]
    return float(np.mean(ades)), float(np.mean(fdes))


@dataclass
class Histogram:
    bin_edges: np.ndarray
    pred_mass: np.ndarray
    truth_mass: np.ndarray

    @property
    def overlap(self) -> float:
        """Overlap coefficient: total mass shared by the two histograms."""
        return float(np.minimum(self.pred_mass, self.truth_mass).sum())

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "pred_mass": self.pred_mass.tolist(),
            "truth_mass": self.truth_mass.tolist(),
            "overlap": self.overlap,
        }


@dataclass
class MetricsReport:
    ade: float
    fde: float
    min_k_ade: float | None = None
    min_k_fde: float | None = None
    k: int = 1
    per_run_ade: list[float] = field(default_factory=list)
    per_run_fde: list[float] = field(default_factory=list)
    speed_hist: Histogram | None = None
    accel_hist: Histogram | None = None
    nfe: int | None = None
    method: str | None = None
    runtime_s: float | None = None

    def to_metrics_json(self) -> dict:
        """Deterministic metrics payload; wall-clock timing stays out of it."""
        out = {
            "schema_version": 1,
            "ade": self.ade,
            "fde": self.fde,
            "min_k_ade": self.min_k_ade,
            "min_k_fde": self.min_k_fde,
            "k": self.k,
            "per_run": {"ade": self.per_run_ade, "fde": self.per_run_fde},
            "nfe": self.nfe,
            "method": self.method,
        }
        if self.speed_hist is not None:
            out["density"] = {
                "speed": self.speed_hist.to_dict(),
                "accel": self.accel_hist.to_dict() if self.accel_hist else None,
            }
        return out


def _speeds_and_accels(x, c):
    """Per-frame speed and acceleration magnitudes over predicted frames, pooled."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    v = np.diff(x, axis=1)  # increment into frame t+1
    a = np.diff(v, axis=1)
    speeds = np.linalg.norm(v[:, max(c - 1, 0) :], axis=-1).ravel()
    accels = np.linalg.norm(a[:, max(c - 2, 0) :], axis=-1).ravel()
    return speeds, accels


def _mass_histogram(pred_vals, truth_vals, bins):
    """Uniform bins over the pooled ground-truth range, plus one catch-all bin on
    each side so outlier mass is kept without landing in an in-range bin."""
    lo, hi = float(truth_vals.min()), float(truth_vals.max())
    if not hi > lo:
        raise ValueError("degenerate bins: ground-truth values span zero range")
    edges = np.linspace(lo, hi, bins + 1)

    def masses(vals):
        inside = vals[(vals >= lo) & (vals <= hi)]
        counts, _ = np.histogram(inside, bins=edges)
        row = np.concatenate([[(vals < lo).sum()], counts, [(vals > hi).sum()]])
        return row / row.sum()

    full_edges = np.concatenate([[-np.inf], edges, [np.inf]])
    return Histogram(full_edges, masses(pred_vals), masses(truth_vals))


def density_report(pred, truth, c: int, bins: int = 100) -> tuple[Histogram, Histogram]:
    """Speed and acceleration-magnitude histograms of pred vs truth.

    Bins span the pooled ground-truth range; predicted outliers are clipped into
    the edge bins. Masses each sum to one.
    """
    ps, pa = _speeds_and_accels(pred, c)
    ts, ta = _speeds_and_accels(truth, c)
    return _mass_histogram(ps, ts, bins), _mass_histogram(pa, ta, bins)


def rollout_report(
    pred_runs,
    truth,
    c: int,
    bins: int = 100,
    nfe: int | None = None,
    method: str | None = None,
    with_density: bool = True,
) -> MetricsReport:
    """Full report over k rollouts: mean-of-k, min-of-k, and densities of run 0."""
    mean_ade, mean_fde = mean_k_metrics(pred_runs, truth, c)
    mk_ade, mk_fde = min_k_metrics(pred_runs, truth, c)
    speed_hist = accel_hist = None
    if with_density:
        speed_hist, accel_hist = density_report(pred_runs[0], truth, c)
    return MetricsReport(
        ade=mean_ade,
        fde=mean_fde,
        min_k_ade=mk_ade,
        min_k_fde=mk_fde,
        k=len(pred_runs),
        per_run_ade=[ade(p, truth, c) for p in pred_runs],
        per_run_fde=[fde(p, truth) for p in pred_runs],
        speed_hist=speed_hist,
        accel_hist=accel_hist,
        nfe=nfe,
        method=method,
    )
