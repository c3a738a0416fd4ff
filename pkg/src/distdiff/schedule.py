"""Forward noise schedule, DDIM-with-churn transition moments and loss weights.

Times live in [0, 1] with ``alpha(0) = sigma(1) = 1`` and ``alpha(1) = sigma(0) = 0``.
Schedule-dependent quantities reject out-of-range times instead of clamping them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit

ArrayLike = Union[float, np.ndarray]

DEFAULT_ETA_SAFE = 1e-2


class DomainError(ValueError):
    """A schedule quantity was requested outside its domain."""


@dataclass(frozen=True)
class Schedule:
    kind: str = "flow_matching"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {sorted(SCHEDULE_KINDS)}")

    def alpha_sigma(self, t: ArrayLike):
        return SCHEDULE_KINDS[self.kind](t)


def _flow_matching(t):
    return 1.0 - t, t


SCHEDULE_KINDS = {"flow_matching": _flow_matching}

FLOW_MATCHING = Schedule()


@dataclass(frozen=True)
class TransitionMoments:
    mean: np.ndarray
    stddev: float


@dataclass(frozen=True)
class WeightFn:
    """Loss weight ``w_t``: ``kind`` is ``"unit"`` or ``"sigmoid"`` (with ``bias``)."""

    kind: str = "unit"
    bias: float = 0.0

    def __post_init__(self):
        if self.kind not in ("unit", "sigmoid"):
            raise ValueError(f"unknown weight kind {self.kind!r}")


def _check_time(t, lo=0.0, hi=1.0, open_lo=False, open_hi=False, what="t"):
    if isinstance(t, (float, int, np.floating)):
        x = float(t)
        if (lo < x < hi) or (x == lo and not open_lo) or (x == hi and not open_hi):
            return
        raise DomainError(f"{what}={t!r} outside the admissible interval")
    arr = np.asarray(t, dtype=float)
    bad = (arr < lo) | (arr > hi) | ~np.isfinite(arr)
    if open_lo:
        bad |= arr == lo
    if open_hi:
        bad |= arr == hi
    if np.any(bad):
        raise DomainError(f"{what}={t!r} outside the admissible interval")


def alpha_sigma(sched: Schedule, t: ArrayLike):
    """Return ``(alpha_t, sigma_t)``; accepts scalars or arrays."""
    _check_time(t)
    a, s = sched.alpha_sigma(t)
    if np.ndim(t) == 0:
        return float(a), float(s)
    return a, s


def r_ratio(sched: Schedule, i: int, j: int, s: float, t: float) -> float:
    """``(alpha_t / alpha_s)**i * (sigma_s / sigma_t)**j`` for ``s <= t``.

    ``s = 0`` is admissible (``sigma_0 = 0`` only ever sits in a numerator).
    """
    _check_time(s, what="s")
    _check_time(t, what="t")
    if s > t:
        raise DomainError(f"r_ratio needs s <= t, got s={s}, t={t}")
    a_s, s_s = alpha_sigma(sched, s)
    a_t, s_t = alpha_sigma(sched, t)
    if (i != 0 and a_s == 0.0) or (j != 0 and s_t == 0.0):
        raise DomainError(f"r_ratio({i},{j}) divides by zero at s={s}, t={t}")
    out = 1.0
    if i:
        out *= (a_t / a_s) ** i
    if j:
        out *= (s_s / s_t) ** j
    return out


def ddim_coefficients(sched: Schedule, s: float, t: float, churn: float):
    """Coefficients ``(c_xt, c_x0, stddev)`` of the churned DDIM kernel p(x_s | x_0, x_t).

    ``x_s = c_xt * x_t + c_x0 * x_0 + stddev * z``.
    """
    if not 0.0 <= churn <= 1.0:
        raise DomainError(f"churn must lie in [0, 1], got {churn}")
    if not s < t:
        raise DomainError(f"ddim kernel needs s < t, got s={s}, t={t}")
    e2 = churn * churn
    r = lambda i, j: r_ratio(sched, i, j, s, t)  # noqa: E731
    a_s, s_s = alpha_sigma(sched, s)
    c_xt = e2 * r(1, 2) + (1.0 - e2) * r(0, 1)
    c_x0 = a_s * (1.0 - e2 * r(2, 2) - (1.0 - e2) * r(1, 1))
    var = s_s**2 * (1.0 - (e2 * r(1, 1) + (1.0 - e2)) ** 2)
    # var is a difference of O(1) terms; tiny negatives are rounding
    return c_xt, c_x0, math.sqrt(max(var, 0.0))


def ddim_moments(sched: Schedule, s: float, t: float, churn: float, x0, xt) -> TransitionMoments:
    x0 = np.asarray(x0, dtype=float)
    xt = np.asarray(xt, dtype=float)
    if x0.shape != xt.shape:
        raise ValueError(f"x0 and xt shapes differ: {x0.shape} vs {xt.shape}")
    c_xt, c_x0, std = ddim_coefficients(sched, s, t, churn)
    return TransitionMoments(mean=c_xt * xt + c_x0 * x0, stddev=std)


def churn_to_eta(sched: Schedule, churn: float, s: float, t: float) -> float:
    """Map the churn ``epsilon`` to the DDIM ``eta`` giving the same kernel variance."""
    if not 0.0 <= churn <= 1.0:
        raise DomainError(f"churn must lie in [0, 1], got {churn}")
    _, s_s = alpha_sigma(sched, s)
    e2 = churn * churn
    r = lambda i, j: r_ratio(sched, i, j, s, t)  # noqa: E731
    var = s_s**2 * (1.0 - (e2 * r(1, 1) + (1.0 - e2)) ** 2)
    denom = r(0, 2) - r(2, 2)
    if denom <= 0.0:
        raise DomainError(f"degenerate interval s={s}, t={t}")
    return math.sqrt(max(var, 0.0) / denom)


def eta_to_churn(sched: Schedule, eta: float, s: float, t: float, tol: float = 1e-12) -> float:
    """Inverse of :func:`churn_to_eta`."""
    if eta < 0.0:
        raise DomainError(f"eta must be nonnegative, got {eta}")
    _, s_s = alpha_sigma(sched, s)
    if s_s == 0.0:
        raise DomainError("eta_to_churn needs sigma_s > 0")
    r = lambda i, j: r_ratio(sched, i, j, s, t)  # noqa: E731
    radicand = 1.0 - eta**2 * (r(0, 2) - r(2, 2)) / s_s**2
    if radicand < -tol:
        raise DomainError(f"eta={eta} exceeds the admissible range on [{s}, {t}] (radicand {radicand:.3g})")
    e2 = (1.0 - math.sqrt(max(radicand, 0.0))) / (1.0 - r(1, 1))
    return math.sqrt(max(e2, 0.0))


def log_snr(sched: Schedule, t: ArrayLike):
    _check_time(t, open_lo=True, open_hi=True)
    a, s = sched.alpha_sigma(np.asarray(t, dtype=float))
    return 2.0 * (np.log(a) - np.log(s))


def weight(wf: WeightFn, sched: Schedule, t: ArrayLike):
    """``w_t``: 1 for unit weights, ``(1 + exp(b - logSNR_t))**-1`` for sigmoid weights."""
    if wf.kind == "unit":
        _check_time(t)
        return 1.0 if np.ndim(t) == 0 else np.ones(np.shape(t))
    w = expit(log_snr(sched, t) - wf.bias)
    return float(w) if np.ndim(t) == 0 else w


def clip_time(t: ArrayLike, eta_safe: float = DEFAULT_ETA_SAFE):
    return np.clip(t, eta_safe, 1.0 - eta_safe)
