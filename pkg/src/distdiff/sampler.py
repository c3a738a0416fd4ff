"""Ancestral sampling on a coarse time grid with the churned DDIM kernel.

A denoiser is any callable ``(t, x_t, xi) -> x0_hat`` acting on a batch of rows
and exposing ``noise_dim``, the width of the ``xi`` it consumes. Chains are
independent: chain ``c`` draws all of its noise from ``default_rng([seed, c])``,
so a chain's output does not depend on how many other chains run beside it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import DEFAULT_ETA_SAFE, FLOW_MATCHING, Schedule, ddim_coefficients
from .trainer import NumericError


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 5
    churn: float = 1.0
    eta_safe: float = DEFAULT_ETA_SAFE
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler.steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.churn <= 1.0:
            raise ValueError(f"sampler.churn must lie in [0, 1], got {self.churn}")
        if not 0.0 <= self.eta_safe < 0.5:
            raise ValueError(f"sampler.eta_safe must lie in [0, 0.5), got {self.eta_safe}")


def time_grid(N: int, eta_safe: float = DEFAULT_ETA_SAFE) -> np.ndarray:
    """``N + 1`` evenly spaced times from ``eta_safe`` to ``1 - eta_safe``."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return np.linspace(eta_safe, 1.0 - eta_safe, N + 1)


def _chain_noise(scfg: SamplerConfig, count: int, d: int, noise_dim: int):
    N = scfg.steps
    per_chain = d + N * (noise_dim + d)
    buf = np.empty((count, per_chain))
    for c in range(count):
        buf[c] = np.random.default_rng([scfg.seed, c]).standard_normal(per_chain)
    x_init = buf[:, :d]
    rest = buf[:, d:].reshape(count, N, noise_dim + d)
    return x_init, rest[:, :, :noise_dim], rest[:, :, noise_dim:]


@dataclass
class SampleResult:
    samples: np.ndarray  # count x d, the state at t_0
    trajectory: list | None  # N + 1 snapshots from t_N down to t_0


def sample(denoiser, scfg: SamplerConfig, count: int, data_dim: int, dump_trajectory: bool = False, sched: Schedule = FLOW_MATCHING) -> SampleResult:
    """Run the reverse chain from ``N(0, I)`` at ``t_N`` down to ``t_0``.

    The step from ``t_{k+1}`` to ``t_k`` predicts ``x0_hat`` at ``t_{k+1}`` and draws
    from the churned DDIM kernel. The state at ``t_0`` is returned as is.
    """
    grid = time_grid(scfg.steps, scfg.eta_safe)
    noise_dim = int(getattr(denoiser, "noise_dim", 0))
    x, xis, zs = _chain_noise(scfg, count, data_dim, noise_dim)
    traj = [x.copy()] if dump_trajectory else None
    for k in range(scfg.steps - 1, -1, -1):
        s, t = float(grid[k]), float(grid[k + 1])
        i = scfg.steps - 1 - k  # noise slot, in the order the chain consumes it
        x0_hat = np.asarray(denoiser(t, x, xis[:, i]), dtype=float)
        c_xt, c_x0, sd = ddim_coefficients(sched, s, t, scfg.churn)
        x = c_xt * x + c_x0 * x0_hat + sd * zs[:, i]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample at step k={k} (t={t:.4f} -> s={s:.4f})")
        if traj is not None:
            traj.append(x.copy())
    return SampleResult(x, traj)


def sample_with_oracle_posterior(target, scfg: SamplerConfig, lam: float, beta: float, count: int, dump_trajectory: bool = False, sched: Schedule = FLOW_MATCHING) -> SampleResult:
    """Sample with the exact posterior in place of a trained network.

    For a Gaussian target the posterior variance is scaled by ``f(lam, beta)``;
    a mixture target uses its exact posterior (``lam`` and ``beta`` must be 1 and
    anything, i.e. undistorted).
    """
    from . import gaussian_oracle as go

    if isinstance(target, go.GaussianSpec):
        den = go.GaussianPosteriorDenoiser(target, lam, beta, sched)
    elif isinstance(target, go.MixtureSpec):
        if lam != 1.0:
            raise ValueError("variance distortion is only defined for Gaussian targets")
        den = go.MixturePosteriorDenoiser(target, sched)
    else:
        raise TypeError(f"unsupported target {type(target).__name__}")
    return sample(den, scfg, count, target.dim, dump_trajectory, sched)
