"""2D datasets and the metrics used to judge trained models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian_oracle import TWO_GAUSSIANS, GaussianPosteriorDenoiser, GaussianSpec, MixturePosteriorDenoiser, MixtureSpec
from .schedule import FLOW_MATCHING, Schedule, alpha_sigma
from .scoring import RBF, mmd2

DEFAULT_K = 102400
CHECKER_CELLS = 4
CHECKER_HALF_WIDTH = 4.0


@dataclass(frozen=True)
class Dataset2D:
    points: np.ndarray
    spec: str
    seed: int


def gen_two_gaussians(K: int = DEFAULT_K, seed: int = 0, target: MixtureSpec = TWO_GAUSSIANS) -> Dataset2D:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, 2, size=K)
    pts = target.means[comp] + np.sqrt(target.var) * rng.standard_normal((K, target.dim))
    return Dataset2D(pts, "two_gaussians", seed)


def checker_black_cells() -> np.ndarray:
    """Lower-left corners of the cells ``(i, j)`` with ``i + j`` even."""
    side = 2 * CHECKER_HALF_WIDTH / CHECKER_CELLS
    cells = [(i, j) for i in range(CHECKER_CELLS) for j in range(CHECKER_CELLS) if (i + j) % 2 == 0]
    return np.array([(-CHECKER_HALF_WIDTH + side * i, -CHECKER_HALF_WIDTH + side * j) for i, j in cells])


def checker_cell_index(points: np.ndarray) -> np.ndarray:
    side = 2 * CHECKER_HALF_WIDTH / CHECKER_CELLS
    ij = np.floor((np.asarray(points) + CHECKER_HALF_WIDTH) / side).astype(int)
    return np.clip(ij, 0, CHECKER_CELLS - 1)


def gen_checkerboard(K: int = DEFAULT_K, seed: int = 0) -> Dataset2D:
    """Uniform over the black cells of a 4 x 4 board on ``[-4, 4]^2``."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    rng = np.random.default_rng(seed)
    corners = checker_black_cells()
    side = 2 * CHECKER_HALF_WIDTH / CHECKER_CELLS
    cell = rng.integers(0, len(corners), size=K)
    pts = corners[cell] + side * rng.random((K, 2))
    return Dataset2D(pts, "checkerboard", seed)


DATASETS = {"two_gaussians": gen_two_gaussians, "checkerboard": gen_checkerboard}


def make_dataset(name: str, K: int = DEFAULT_K, seed: int = 0) -> Dataset2D:
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DATASETS)}")
    return DATASETS[name](K, seed)


def metric_mmd2(samples, reference, estimator: str = "unbiased") -> float:
    """Squared-MMD divergence with ``rho = -k_rbf`` at unit bandwidth."""
    return mmd2(RBF(1.0), samples, reference, estimator)


@dataclass(frozen=True)
class PosteriorStdCurve:
    t: np.ndarray
    model: np.ndarray | None
    oracle: np.ndarray


def _avg_std(preds: np.ndarray) -> float:
    # preds: n x k x d; per-coordinate std over the k draws, averaged over coordinates then rows
    return float(np.mean(np.std(preds, axis=1, ddof=1)))


def metric_posterior_std(model, target, t_grid, n_eval: int = 1024, seed: int = 0, n_draws: int = 8, sched: Schedule = FLOW_MATCHING) -> PosteriorStdCurve:
    """Average spread of ``n_draws`` denoiser draws per ``x_t``, along ``t_grid``.

    The same ``(x_0, z, xi)`` draws are reused at every ``t`` and for the exact
    posterior reference, so the two curves differ only through the denoisers.
    ``model`` may be ``None`` to compute the reference alone.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if isinstance(target, MixtureSpec):
        oracle = MixturePosteriorDenoiser(target, sched)
    elif isinstance(target, GaussianSpec):
        oracle = GaussianPosteriorDenoiser(target, 1.0, 1.0, sched)
    else:
        raise TypeError(f"unsupported target {type(target).__name__}")
    d = target.dim
    width = max(oracle.noise_dim, int(getattr(model, "noise_dim", 0)) if model is not None else 0)
    rng = np.random.default_rng(seed)
    if isinstance(target, MixtureSpec):
        comp = rng.integers(0, 2, size=n_eval)
        x0 = target.means[comp] + np.sqrt(target.var) * rng.standard_normal((n_eval, d))
    else:
        x0 = target.mean + np.sqrt(target.var) * rng.standard_normal((n_eval, d))
    z = rng.standard_normal((n_eval, d))
    xi = rng.standard_normal((n_eval * n_draws, width))
    model_curve, oracle_curve = [], []
    for t in t_grid:
        a, s = alpha_sigma(sched, float(t))
        xt = np.repeat(a * x0 + s * z, n_draws, axis=0)
        oracle_curve.append(_avg_std(oracle(float(t), xt, xi[:, : oracle.noise_dim]).reshape(n_eval, n_draws, d)))
        if model is not None:
            pred = np.asarray(model(float(t), xt, xi[:, : model.noise_dim]))
            model_curve.append(_avg_std(pred.reshape(n_eval, n_draws, d)))
    return PosteriorStdCurve(t_grid, np.array(model_curve) if model is not None else None, np.array(oracle_curve))
