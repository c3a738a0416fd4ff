"""Kernels, generalized kernel scores, empirical diffusion losses and MMD estimators.

Every kernel is used through its negative-definite form ``rho``: the energy
kernel is ``||x - y||**beta`` and a positive-definite kernel ``k`` enters as
``rho = -k``. One loss assembly therefore serves both families.

The divergence convention throughout is

    D_rho(p, q) = E_{p x q} rho - 1/2 E_{p x p} rho - 1/2 E_{q x q} rho,

which for ``rho = -k`` is half of the usual squared MMD.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .schedule import Schedule, WeightFn, weight

KERNEL_KINDS = ("energy", "imq", "rbf", "exp")


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` in {energy, imq, rbf, exp}; ``param`` is beta, c, sigma^2 or sigma."""

    kind: str = "energy"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        p = float(self.param)
        if self.kind == "energy" and not 0.0 < p <= 2.0:
            raise ValueError(f"energy kernel needs beta in (0, 2], got {p}")
        if self.kind != "energy" and not p > 0.0:
            raise ValueError(f"{self.kind} kernel needs a positive parameter, got {p}")


def Energy(beta: float) -> KernelSpec:
    return KernelSpec("energy", beta)


def IMQ(c: float) -> KernelSpec:
    return KernelSpec("imq", c)


def RBF(sigma2: float) -> KernelSpec:
    return KernelSpec("rbf", sigma2)


def Exp(sigma: float) -> KernelSpec:
    return KernelSpec("exp", sigma)


@dataclass(frozen=True)
class ScoreConfig:
    lam: float = 1.0
    kernel: KernelSpec = field(default_factory=lambda: Energy(1.0))
    weight: WeightFn = field(default_factory=WeightFn)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def rho_of_diff(spec: KernelSpec, u, axis=-1):
    """``rho`` as a function of the difference ``u = x - y`` (autodiff aware)."""
    p = float(spec.param)
    if spec.kind == "energy":
        return ad.norm_pow(u, p, axis=axis)
    if spec.kind == "imq":
        return ad.mul(ad.power(ad.add(ad.sqnorm(u, axis=axis), p), -0.5), -1.0)
    if spec.kind == "rbf":
        return ad.mul(ad.exp(ad.mul(ad.sqnorm(u, axis=axis), -0.5 / p)), -1.0)
    return ad.mul(ad.exp(ad.mul(ad.norm_pow(u, 1.0, axis=axis), -1.0 / p)), -1.0)


def rho_of_sqdist(spec: KernelSpec, d2: np.ndarray) -> np.ndarray:
    """``rho`` from squared distances (plain arrays only)."""
    p = float(spec.param)
    if spec.kind == "energy":
        return d2 if p == 2.0 else d2 ** (0.5 * p)
    if spec.kind == "imq":
        return -1.0 / np.sqrt(d2 + p)
    if spec.kind == "rbf":
        return -np.exp(-0.5 * d2 / p)
    return -np.exp(-np.sqrt(d2) / p)


def rho(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(rho_of_diff(spec, x - y))


def _weights(cfg: ScoreConfig, sched: Schedule, t, n: int, dtype=float) -> np.ndarray:
    w = np.asarray(weight(cfg.weight, sched, np.asarray(t, dtype=float)), dtype=dtype)
    return np.broadcast_to(w, (n,)).astype(dtype)


def _offdiag_mask(m: int, dtype=float) -> np.ndarray:
    return (1.0 - np.eye(m)).astype(dtype)


def _pair_sum(spec: KernelSpec, preds, w):
    """``sum_i w_i sum_{j != j'} rho(preds[i, j], preds[i, j'])``."""
    n, m = ad.value(preds).shape[:2]
    r = rho_of_diff(spec, ad.pairwise_diff(preds))  # n x m x m
    mask = _offdiag_mask(m, ad.value(r).dtype)
    return ad.sum(ad.mul(r, w[:, None, None] * mask))


def confinement(cfg: ScoreConfig, sched: Schedule, t, x0, preds):
    """``(1/nm) sum_{i,j} w_i rho(x0_i, preds[i, j])``."""
    pv = ad.value(preds)
    if pv.ndim != 3:
        raise ValueError(f"preds must be n x m x d, got shape {pv.shape}")
    n, m, d = pv.shape
    x0 = np.asarray(x0, dtype=pv.dtype)
    if x0.shape != (n, d):
        raise ValueError(f"x0 must be {(n, d)}, got {x0.shape}")
    w = _weights(cfg, sched, t, n, pv.dtype)
    r = rho_of_diff(cfg.kernel, ad.sub(preds, x0[:, None, :]))  # n x m
    return ad.mul(ad.sum(ad.mul(r, w[:, None])), 1.0 / (n * m))


def interaction_conditional(cfg: ScoreConfig, sched: Schedule, t, preds):
    """``sum_i sum_{j != j'} lam w_i rho(preds[i,j], preds[i,j']) / (2 n m (m-1))``."""
    pv = ad.value(preds)
    n, m = pv.shape[:2]
    if m < 2:
        raise ValueError("the interaction estimate needs m >= 2")
    if cfg.lam == 0.0:
        return 0.0
    w = _weights(cfg, sched, t, n, pv.dtype)
    return ad.mul(_pair_sum(cfg.kernel, preds, w), cfg.lam / (2.0 * n * m * (m - 1)))


def interaction_joint(cfg: ScoreConfig, sched: Schedule, t, x_t, preds):
    """Joint variant: the pair term also carries ``||x_t[i,j] - x_t[i,j']||`` (plain norm)."""
    pv = ad.value(preds)
    n, m = pv.shape[:2]
    x_t = np.asarray(x_t, dtype=pv.dtype)
    if x_t.shape[:2] != (n, m):
        raise ValueError(f"x_t must be n x m x d with (n, m) = {(n, m)}, got {x_t.shape}")
    if m < 2:
        raise ValueError("the interaction estimate needs m >= 2")
    if cfg.lam == 0.0:
        return 0.0
    w = _weights(cfg, sched, t, n, pv.dtype)
    xt_norm = np.sqrt(ad.sqnorm(ad.pairwise_diff(x_t)))
    xt_term = float(np.sum(xt_norm * (w[:, None, None] * _offdiag_mask(m, pv.dtype))))
    total = ad.add(_pair_sum(cfg.kernel, preds, w), xt_term)
    return ad.mul(total, cfg.lam / (2.0 * n * m * (m - 1)))


def empirical_loss(cfg: ScoreConfig, sched: Schedule, t, x0, preds):
    """Negated empirical generalized score: confinement minus interaction.

    ``preds`` is ``n x m x d`` (array or autodiff ``Var``). With ``lam = 0`` the
    pair pass is skipped entirely.
    """
    pv = ad.value(preds)
    if pv.ndim != 3:
        raise ValueError(f"preds must be n x m x d, got shape {pv.shape}")
    if cfg.lam > 0.0 and pv.shape[1] < 2:
        raise ValueError(f"lambda={cfg.lam} > 0 needs a population m >= 2")
    conf = confinement(cfg, sched, t, x0, preds)
    if cfg.lam == 0.0:
        return conf
    return ad.sub(conf, interaction_conditional(cfg, sched, t, preds))


def _mean_rho(spec: KernelSpec, X: np.ndarray, Y: np.ndarray, exclude_diag: bool, chunk: int = 1024) -> float:
    total = 0.0
    for a in range(0, len(X), chunk):
        r = rho_of_sqdist(spec, cdist(X[a : a + chunk], Y, "sqeuclidean"))
        if exclude_diag:
            idx = np.arange(r.shape[0])
            r[idx, a + idx] = 0.0
        total += float(r.sum())
    count = len(X) * (len(Y) - 1) if exclude_diag else len(X) * len(Y)
    return total / count


def mmd2(spec: KernelSpec, X, Y, estimator: str = "unbiased") -> float:
    """Estimate ``D_rho(P_X, P_Y)`` by a V-statistic (biased) or U-statistic (unbiased)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"unknown estimator {estimator!r}")
    unbiased = estimator == "unbiased"
    if unbiased and (len(X) < 2 or len(Y) < 2):
        raise ValueError("the unbiased estimator needs at least 2 points per sample")
    xy = _mean_rho(spec, X, Y, False)
    xx = _mean_rho(spec, X, X, unbiased)
    yy = _mean_rho(spec, Y, Y, unbiased)
    return xy - 0.5 * xx - 0.5 * yy
