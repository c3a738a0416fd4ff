"""Adam with bias correction, global-norm clipping, cosine warmup and a parameter EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    step: int
    mu: np.ndarray
    nu: np.ndarray
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        return cls(0, np.zeros(size), np.zeros(size), lr, b1, b2, eps)


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")


def global_norm(grad: np.ndarray) -> float:
    return float(np.sqrt(np.dot(grad, grad)))


def clip_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0.0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grad)
    if norm <= max_norm:
        return grad
    return grad * (max_norm / norm)


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Cosine ramp from 0 at ``step = 0`` to ``base_lr`` at ``step = warmup``, then flat."""
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    if step >= warmup:
        return base_lr
    return base_lr * 0.5 * (1.0 - math.cos(math.pi * step / warmup))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float | None = None):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``; inputs are not mutated."""
    if params.shape != grad.shape or params.shape != state.mu.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.mu.shape}")
    lr = state.lr if lr is None else lr
    k = state.step + 1
    mu = state.b1 * state.mu + (1.0 - state.b1) * grad
    nu = state.b2 * state.nu + (1.0 - state.b2) * grad * grad
    mhat = mu / (1.0 - state.b1**k)
    vhat = nu / (1.0 - state.b2**k)
    new_params = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return AdamState(k, mu, nu, state.lr, state.b1, state.b2, state.eps), new_params


def ema_update(ema: EmaState, params: np.ndarray) -> EmaState:
    if params.shape != ema.shadow.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {ema.shadow.shape}")
    return EmaState(ema.decay * ema.shadow + (1.0 - ema.decay) * params, ema.decay)
