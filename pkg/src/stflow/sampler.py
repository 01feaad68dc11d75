"""Fixed-step ODE integration of the learned field from noise level 0 to 1."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .flowmatch import FlowSpace


@dataclass
class SolverConfig:
    method: str = "euler"
    nfe: int = 50
    seed: int | None = None

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError("method must be 'euler' or 'rk4'")
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.method == "rk4" and self.nfe % 4:
            raise ValueError("rk4 counts 4 field evaluations per step; nfe must be divisible by 4")

    @property
    def n_steps(self) -> int:
        return self.nfe if self.method == "euler" else self.nfe // 4


def _field_to_position_delta(v: torch.Tensor, cond_len: int, space: FlowSpace) -> torch.Tensor:
    """Maps a field in the flow space to a position-space delta; observed frames get 0."""
    c = cond_len
    if space is FlowSpace.POSITION:
        if c == 0:
            return v
        return torch.cat([torch.zeros_like(v[:, :c]), v[:, c:]], dim=1)
    if c == 0:
        raise ValueError("velocity-space integration needs cond_len >= 1 for its anchor frame")
    return torch.cat([torch.zeros_like(v[:, :c]), torch.cumsum(v[:, c:], dim=1)], dim=1)


def integrate(field_fn, x0, cond_len: int, space: FlowSpace | str, solver: SolverConfig):
    """Integrates d x / d tau = field from tau 0 to 1 starting at the prior sample x0.

    field_fn(positions, tau) returns the field in `space`; velocity-space fields
    are accumulated into positions by cumulative sum anchored at the last
    observed frame. Observed frames are reasserted bit-exactly after every step.
    Returns a numpy array when x0 is numpy, else a torch tensor.
    """
    space = FlowSpace(space)
    was_numpy = isinstance(x0, np.ndarray)
    # The state keeps the input dtype (float64 for numpy inputs); any casting to
    # the model's parameter dtype is the field_fn's business.
    x = torch.as_tensor(x0).clone() if was_numpy else x0.clone()
    observed = x[:, :cond_len].clone()
    h = 1.0 / solver.n_steps

    def delta(state, tau):
        v = field_fn(state, tau)
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"field produced non-finite values at tau={tau:.4f}")
        return _field_to_position_delta(v, cond_len, space)

    def clamp(state):
        if cond_len:
            state = torch.cat([observed, state[:, cond_len:]], dim=1)
        return state

    with torch.no_grad():
        for step in range(solver.n_steps):
            tau = step * h
            if solver.method == "euler":
                x = x + h * delta(x, tau)
            else:
                k1 = delta(x, tau)
                k2 = delta(clamp(x + 0.5 * h * k1), tau + 0.5 * h)
                k3 = delta(clamp(x + 0.5 * h * k2), tau + 0.5 * h)
                k4 = delta(clamp(x + h * k3), tau + h)
                x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            x = clamp(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"state went non-finite after tau={tau + h:.4f}")
    return x.numpy() if was_numpy else x


def model_field(net, static, cond_len: int):
    """Wraps a vector-field network as a field_fn; casts to the net's dtype and back."""
    dtype = next(net.parameters()).dtype

    def field(x, tau):
        B = x.shape[0]
        v = net(x.to(dtype), static, torch.full((B,), float(tau), dtype=dtype), cond_len)
        return v.to(x.dtype)

    return field


def nfe_sweep(field_fn, x0_fn, truth, cond_len, space, nfe_list, methods, ade_fn, n_runs=5):
    """Mean-of-n ADE and wall-clock per batch for each (method, nfe).

    x0_fn(run) supplies the prior draw for run index `run`, so every (method,
    nfe) cell integrates from the same n_runs prior samples. Returns a list of
    row dicts {method, nfe, steps, ade, fde?, runtime_per_batch}.
    """
    rows = []
    priors = [x0_fn(run) for run in range(n_runs)]
    for method in methods:
        for nfe in nfe_list:
            if method == "rk4" and nfe % 4:
                continue
            solver = SolverConfig(method=method, nfe=int(nfe))
            ades = []
            start = time.perf_counter()
            for x0 in priors:
                pred = integrate(field_fn, x0, cond_len, space, solver)
                ades.append(ade_fn(pred, truth))
            elapsed = (time.perf_counter() - start) / n_runs
            rows.append(
                {
                    "method": method,
                    "nfe": int(nfe),
                    "steps": solver.n_steps,
                    "ade": float(np.mean(ades)),
                    "runtime_per_batch": elapsed,
                }
            )
    return rows
