"""Probability path, flow target, masked regression loss, and noise-level sampling."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

TAU_DISTS = ("uniform", "sqrt_uniform")


class FlowSpace(str, Enum):
    POSITION = "position"
    VELOCITY = "velocity"


def sample_tau(n: int, dist: str, rng: np.random.Generator) -> np.ndarray:
    """Noise levels in [0, 1]: uniform, or sqrt of uniform (density 2*tau)."""
    if dist == "uniform":
        return rng.random(n)
    if dist == "sqrt_uniform":
        return np.sqrt(rng.random(n))
    raise ValueError(f"tau dist must be one of {TAU_DISTS}")


def aligned_increments(x) -> np.ndarray:
    """Endpoint-indexed increments: w[t] = x[t] - x[t-1], with w[0] = 0.

    Keeps the (B, T, N, d) shape so frame masks apply unchanged; entry t is the
    increment into frame t. Works on numpy arrays and torch tensors alike.
    """
    w = x * 0
    w[:, 1:] = x[:, 1:] - x[:, :-1]
    return w


@dataclass
class FlowSample:
    """One coupled training draw on the linear Gaussian path.

    x0, x1 and x_tau are positions (B, T, N, d); u is the target field in
    `space` (aligned-increment entries for velocity space). loss_mask is (T,)
    and False on observed frames.
    """

    x0: np.ndarray
    x1: np.ndarray
    tau: np.ndarray  # (B,)
    x_tau: np.ndarray
    u: np.ndarray
    loss_mask: np.ndarray
    space: FlowSpace

    def __post_init__(self):
        if not (self.x0.shape == self.x1.shape == self.x_tau.shape == self.u.shape):
            raise ValueError("flow sample arrays must share one shape")
        if np.any(self.tau < 0) or np.any(self.tau > 1):
            raise ValueError("tau out of [0, 1]")


def make_flow_sample(
    x1: np.ndarray,
    x0: np.ndarray,
    tau: np.ndarray,
    sigma_p: float,
    space: FlowSpace | str,
    cond_len: int,
    rng: np.random.Generator | None = None,
) -> FlowSample:
    """Interpolates x_tau on the path and computes the target field u.

    x_tau = tau*x1 + (1-tau)*x0 with optional sigma_p noise on generated frames
    only; observed frames are copied from x1 bit-exactly. u = x1 - x0 in the
    chosen space; in velocity space both endpoints are read as increments
    anchored at the last observed frame, so u is zero on observed entries.
    """
    if sigma_p < 0:
        raise ValueError("sigma_p must be nonnegative")
    space = FlowSpace(space)
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    T = x1.shape[1]
    c = cond_len
    tcol = tau[:, None, None, None]
    # x0 + tau*(x1 - x0) rather than the symmetric form: bit-exact when x1 == x0.
    x_tau = x0 + tcol * (x1 - x0)
    x_tau[:, :c] = x1[:, :c]
    loss_mask = np.arange(T) >= c
    if sigma_p > 0:
        if rng is None:
            raise ValueError("sigma_p > 0 requires an rng")
        eta = rng.standard_normal(x_tau[:, c:].shape)
        if space is FlowSpace.VELOCITY:
            # Noise perturbs the generated increments; positions feel its cumsum.
            x_tau[:, c:] += np.cumsum(sigma_p * eta, axis=1)
        else:
            x_tau[:, c:] += sigma_p * eta
    if space is FlowSpace.VELOCITY:
        u = aligned_increments(x1) - aligned_increments(x0)
    else:
        u = x1 - x0
    return FlowSample(x0=x0, x1=x1, tau=tau, x_tau=x_tau, u=u, loss_mask=loss_mask, space=space)


def cfm_loss(v_pred, u, loss_mask):
    """Mean squared error over unmasked frames, all nodes, dimensions, batch.

    Accepts numpy arrays or torch tensors (loss_mask of the matching kind).
    """
    if not bool(loss_mask.any()):
        raise ValueError("loss mask excludes every frame; nothing to predict")
    diff = v_pred[:, loss_mask] - u[:, loss_mask]
    return (diff * diff).mean()
