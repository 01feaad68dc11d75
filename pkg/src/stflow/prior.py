"""Data-dependent couplings: the fitted random-walk prior and its Gaussian ablations.

All priors keep the observed frames of the data sample intact and replace only
the frames to be generated, so a prior draw depends on the data sample solely
through its observed part.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import TrajectoryBatch

SIGMA_MODES = ("as_written", "sqrt")


class PriorKind(str, Enum):
    RANDOM_WALK = "random_walk"
    GAUSS_ZERO = "gauss_zero"
    GAUSS_LAST = "gauss_last"


@dataclass
class WalkParams:
    """Per-node, per-dimension drift and noise scale of the fitted random walk."""

    mu: np.ndarray  # (B, N, d)
    sigma_o: np.ndarray  # (B, N, d), >= 0
    s: float

    def __post_init__(self):
        if self.mu.shape != self.sigma_o.shape:
            raise ValueError("mu/sigma_o shape mismatch")
        if np.any(self.sigma_o < 0):
            raise ValueError("sigma_o must be nonnegative")


def fit_walk_params(x_obs: np.ndarray, s: float, sigma_mode: str = "as_written") -> WalkParams:
    """Fits drift and noise scale to the observed increments.

    x_obs is (B, c, N, d) with c >= 2. mu is the mean observed increment. The
    noise scale is the elementwise mean squared deviation of the increments from
    mu, times s ("as_written"); the "sqrt" mode uses the standard deviation of
    the s-scaled variance instead.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    c = x_obs.shape[1]
    if c < 2:
        raise ValueError(
            "random-walk fit needs at least 2 observed frames; use the gauss_last prior"
        )
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
    inc = np.diff(x_obs, axis=1)  # (B, c-1, N, d)
    mu = inc.mean(axis=1)
    dev2 = ((inc - mu[:, None]) ** 2).mean(axis=1)
    sigma_o = s * dev2 if sigma_mode == "as_written" else np.sqrt(s * dev2)
    return WalkParams(mu=mu, sigma_o=sigma_o, s=float(s))


def sample_walk(
    x_last: np.ndarray, params: WalkParams, n_steps: int, rng: np.random.Generator
) -> np.ndarray:
    """Rolls the random walk forward from x_last for n_steps frames.

    z[t] = z[t-1] + mu + sigma_o * noise, seeded at z[-1] = x_last (B, N, d).
    Returns (B, n_steps, N, d).
    """
    B, N, d = x_last.shape
    out = np.empty((B, n_steps, N, d), dtype=np.float64)
    prev = x_last
    for t in range(n_steps):
        z = rng.standard_normal((B, N, d))
        prev = prev + params.mu + params.sigma_o * z
        out[:, t] = prev
    return out


def sample_prior_array(
    positions: np.ndarray,
    cond_len: int,
    kind: PriorKind | str,
    s: float,
    rng: np.random.Generator,
    sigma_mode: str = "as_written",
) -> np.ndarray:
    """Draws the coupled prior sample x0 for data positions (B, T, N, d).

    The first cond_len frames of x0 are the data frames bit-exactly; the rest are
    prior noise. random_walk with cond_len == 1 falls back to gauss_last (no
    increments to fit a drift from).
    """
    kind = PriorKind(kind)
    positions = np.asarray(positions, dtype=np.float64)
    B, T, N, d = positions.shape
    c = cond_len
    if not 1 <= c < T:
        raise ValueError(f"prior sampling needs 1 <= cond_len < T, got {c}")
    if kind is PriorKind.RANDOM_WALK and c == 1:
        kind = PriorKind.GAUSS_LAST
    f = T - c
    x0 = positions.copy()
    if kind is PriorKind.RANDOM_WALK:
        params = fit_walk_params(positions[:, :c], s, sigma_mode)
        x0[:, c:] = sample_walk(positions[:, c - 1], params, f, rng)
    elif kind is PriorKind.GAUSS_ZERO:
        x0[:, c:] = rng.standard_normal((B, f, N, d))
    elif kind is PriorKind.GAUSS_LAST:
        x0[:, c:] = positions[:, c - 1][:, None] + rng.standard_normal((B, f, N, d))
    return x0


def sample_prior(
    batch: TrajectoryBatch,
    kind: PriorKind | str,
    s: float,
    rng: np.random.Generator,
    sigma_mode: str = "as_written",
) -> np.ndarray:
    return sample_prior_array(batch.positions, batch.cond_len, kind, s, rng, sigma_mode)


def prior_baseline_predict(
    batch: TrajectoryBatch,
    s: float,
    rng: np.random.Generator,
    sigma_mode: str = "as_written",
) -> np.ndarray:
    """One random-walk prior sample used directly as the prediction."""
    return sample_prior(batch, PriorKind.RANDOM_WALK, s, rng, sigma_mode)
