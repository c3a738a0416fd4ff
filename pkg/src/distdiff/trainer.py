"""Training loop: batches of (t, x0, x_t, xi), the scoring-rule loss, clipped Adam and EMA.

Randomness for step ``k`` comes from ``default_rng([seed, k])``, so a batch
depends only on the seed and the step index. That makes resuming from a
checkpoint reproduce the uninterrupted run exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import net as netlib
from .artifacts import load_checkpoint, save_checkpoint
from .optim import AdamState, EmaState, adam_step, clip_global_norm, ema_update, global_norm, lr_at
from .schedule import FLOW_MATCHING, Schedule, alpha_sigma, weight
from .scoring import ScoreConfig, empirical_loss

METRICS_HEADER = ["step", "loss", "grad_norm", "lr", "wall_ms"]


class NumericError(FloatingPointError):
    """A NaN or infinity appeared in the loss or the gradient."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch: int = 128
    population: int = 32
    score: ScoreConfig = field(default_factory=ScoreConfig)
    net: netlib.NetConfig = field(default_factory=netlib.NetConfig)
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float = 1.0
    ema_decay: float = 0.99
    b1: float = 0.9
    b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    eta_safe: float = 1e-2
    dtype: str = "float32"
    target: str = "x0"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"train.steps must be >= 0, got {self.steps}")
        if self.batch < 1 or self.population < 1:
            raise ValueError("train.batch and train.population must be >= 1")
        if self.score.lam > 0 and self.population < 2:
            raise ValueError(f"train.population must be >= 2 when lambda > 0 (lambda={self.score.lam})")
        if not 0.0 < self.eta_safe < 0.5:
            raise ValueError(f"train.eta_safe must lie in (0, 0.5), got {self.eta_safe}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"train.dtype must be float32 or float64, got {self.dtype!r}")
        if self.target not in ("x0", "velocity"):
            raise ValueError(f"train.target must be x0 or velocity, got {self.target!r}")
        if self.target == "velocity":
            k = self.score.kernel
            if not (self.score.lam == 0.0 and k.kind == "energy" and k.param == 2.0 and self.population == 1):
                raise ValueError("the velocity target is only available for the lambda=0, beta=2, m=1 baseline")

    def digest(self) -> str:
        """Hash of everything that changes the trajectory (cadence excluded)."""
        d = asdict(self)
        d.pop("checkpoint_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    t: np.ndarray  # n
    x0: np.ndarray  # n x d
    xt: np.ndarray  # n x d
    z: np.ndarray  # n x d, the noise used to form xt
    xi: np.ndarray  # n x m x d


@dataclass
class TrainState:
    params: netlib.NetParams
    adam: AdamState
    ema: EmaState
    step: int = 0


def replicate(n: int, m: int, x) -> np.ndarray:
    """Repeat each of the first ``n`` rows ``m`` times; row ``i`` fills slots ``[i*m, (i+1)*m)``."""
    x = np.asarray(x)
    if x.shape[0] < n:
        raise ValueError(f"replicate needs at least {n} rows, got {x.shape[0]}")
    return np.repeat(x[:n], m, axis=0)


def split(n: int, m: int, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] != n * m:
        raise ValueError(f"split expects {n * m} rows, got {x.shape[0]}")
    return x.reshape((n, m) + x.shape[1:])


def make_batch(rng: np.random.Generator, data: np.ndarray, cfg: TrainConfig, sched: Schedule = FLOW_MATCHING) -> Batch:
    data = np.asarray(data)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("the dataset must be a non-empty K x d array")
    n, m, d = cfg.batch, cfg.population, data.shape[1]
    t = rng.uniform(cfg.eta_safe, 1.0 - cfg.eta_safe, size=n)
    idx = rng.choice(len(data), size=n, replace=len(data) < n)
    x0 = data[idx].astype(float)
    z = rng.standard_normal((n, d))
    a, s = alpha_sigma(sched, t)
    xt = a[:, None] * x0 + s[:, None] * z
    xi = rng.standard_normal((n, m, d))
    return Batch(t, x0, xt, z, xi)


def batch_for_step(cfg: TrainConfig, data: np.ndarray, step: int, sched: Schedule = FLOW_MATCHING) -> Batch:
    return make_batch(np.random.default_rng([cfg.seed, step]), data, cfg, sched)


def init_state(cfg: TrainConfig, data_dim: int | None = None) -> TrainState:
    ncfg = cfg.net
    if data_dim is not None and data_dim != ncfg.data_dim:
        raise ValueError(f"dataset dimension {data_dim} != net.data_dim {ncfg.data_dim}")
    params = netlib.init_params(ncfg, np.random.default_rng([cfg.seed, 2**32 - 1]))
    adam = AdamState.fresh(params.flat.size, cfg.lr, cfg.b1, cfg.b2, cfg.adam_eps)
    return TrainState(params, adam, EmaState(params.flat.copy(), cfg.ema_decay), 0)


def batch_loss(cfg: TrainConfig, weights, batch: Batch, sched: Schedule = FLOW_MATCHING):
    """The per-step objective as a function of layer weights (arrays or autodiff variables)."""
    n, m, d = batch.xi.shape
    dtype = ad.value(weights["out.w"]).dtype
    out = netlib.forward(cfg.net, weights, batch.t, batch.xt, batch.xi.reshape(n * m, d), m)
    if cfg.target == "velocity":
        v = (batch.x0 - batch.z).astype(dtype)
        w = np.asarray(weight(cfg.score.weight, sched, batch.t), dtype=dtype).reshape(n)
        diff = ad.sub(out, v)
        return ad.mul(ad.sum(ad.mul(ad.sqnorm(diff), w)), 1.0 / n)
    preds = ad.reshape(out, (n, m, d))
    return empirical_loss(cfg.score, sched, batch.t, batch.x0.astype(dtype), preds)


def train_step(cfg: TrainConfig, state: TrainState, batch: Batch, sched: Schedule = FLOW_MATCHING):
    dtype = np.dtype(cfg.dtype)
    loss, grad = netlib.loss_and_grad(cfg.net, state.params, lambda W: batch_loss(cfg, W, batch, sched), dtype)
    gnorm = global_norm(grad)
    if not (math.isfinite(loss) and math.isfinite(gnorm)):
        raise NumericError(f"non-finite loss={loss} or grad_norm={gnorm} at step {state.step}")
    lr = lr_at(state.step, cfg.lr, cfg.warmup)
    adam, flat = adam_step(state.adam, state.params.flat, clip_global_norm(grad, cfg.clip_norm), lr)
    params = netlib.NetParams(flat, state.params.manifest)
    ema = ema_update(state.ema, flat)
    return TrainState(params, adam, ema, state.step + 1), {"loss": loss, "grad_norm": gnorm, "lr": lr}


def _header(cfg: TrainConfig, state: TrainState, kind: str) -> dict:
    return {"kind": kind, "config_hash": cfg.digest(), "seed": cfg.seed, "step": state.step}


def save_state(cfg: TrainConfig, state: TrainState, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = state.params.manifest
    save_checkpoint(out / "params.ckpt", man, state.params.flat, _header(cfg, state, "params"))
    save_checkpoint(out / "ema.ckpt", man, state.ema.shadow, _header(cfg, state, "ema"))
    p = state.params.flat.size
    save_checkpoint(
        out / "optim.ckpt",
        [("mu", 1, p), ("nu", 1, p)],
        np.concatenate([state.adam.mu, state.adam.nu]),
        _header(cfg, state, "optim") | {"adam_step": state.adam.step},
    )


def load_state(cfg: TrainConfig, out_dir) -> TrainState:
    out = Path(out_dir)
    man, flat, hp = load_checkpoint(out / "params.ckpt")
    _, shadow, he = load_checkpoint(out / "ema.ckpt")
    _, moments, ho = load_checkpoint(out / "optim.ckpt")
    for h in (hp, he, ho):
        if h.get("config_hash") != cfg.digest():
            raise ValueError(f"checkpoint in {out} was written for config {h.get('config_hash')}, not {cfg.digest()}")
    if not hp["step"] == he["step"] == ho["step"]:
        raise ValueError(f"inconsistent checkpoint steps in {out}")
    p = flat.size
    adam = AdamState(int(ho["adam_step"]), moments[:p].copy(), moments[p:].copy(), cfg.lr, cfg.b1, cfg.b2, cfg.adam_eps)
    params = netlib.NetParams(flat.copy(), man)
    return TrainState(params, adam, EmaState(shadow.copy(), cfg.ema_decay), int(hp["step"]))


@dataclass
class TrainResult:
    state: TrainState
    metrics: list  # rows of METRICS_HEADER


def train(cfg: TrainConfig, data: np.ndarray, out_dir=None, resume: bool = True, sched: Schedule = FLOW_MATCHING, log_every: int = 0):
    """Run ``cfg.steps`` steps. With ``out_dir``, write metrics.csv and checkpoints there.

    Checkpoints are written every ``cfg.checkpoint_every`` steps (0 means only
    at the end). With ``resume`` an existing checkpoint for the same config is
    picked up and the metrics file is truncated to the checkpointed step.
    """
    data = np.asarray(data, dtype=float)
    state = init_state(cfg, data.shape[1])
    rows: list = []
    metrics_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if resume and (out / "params.ckpt").exists():
            state = load_state(cfg, out)
            if metrics_path.exists():
                with open(metrics_path) as fh:
                    lines = fh.read().splitlines()[1:]
                rows = [_parse_row(line) for line in lines if int(line.split(",")[0]) < state.step]
        fh = open(metrics_path, "w")
        fh.write(",".join(METRICS_HEADER) + "\n")
        for r in rows:
            fh.write(_format_row(r))
    try:
        while state.step < cfg.steps:
            t0 = time.perf_counter()
            batch = batch_for_step(cfg, data, state.step, sched)
            step = state.step
            state, m = train_step(cfg, state, batch, sched)
            row = [step, m["loss"], m["grad_norm"], m["lr"], (time.perf_counter() - t0) * 1e3]
            rows.append(row)
            if metrics_path is not None:
                fh.write(_format_row(row))
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    fh.flush()
                    save_state(cfg, state, out_dir)
            if log_every and state.step % log_every == 0:
                print(f"step {state.step} loss {m['loss']:.5f} grad_norm {m['grad_norm']:.4f}", flush=True)
    finally:
        if metrics_path is not None:
            fh.close()
    if out_dir is not None:
        save_state(cfg, state, out_dir)
    return TrainResult(state, rows)


def _format_row(row) -> str:
    step, loss, gnorm, lr, wall = row
    return f"{int(step)},{float(loss)!r},{float(gnorm)!r},{float(lr)!r},{float(wall):.3f}\n"


def _parse_row(line: str):
    a = line.split(",")
    return [int(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4])]


class Denoiser:
    """A trained network packaged as ``(t, x_t, xi) -> x0_hat`` for the sampler and metrics."""

    def __init__(self, net_cfg: netlib.NetConfig, params: netlib.NetParams, target: str = "x0", dtype: str = "float32"):
        self.cfg = net_cfg
        self.params = params
        self.target = target
        self.noise_dim = net_cfg.data_dim
        self._weights = {k: v.astype(dtype) for k, v in params.unflatten().items()}

    @classmethod
    def from_state(cls, cfg: TrainConfig, state: TrainState, use_ema: bool = True):
        flat = state.ema.shadow if use_ema else state.params.flat
        return cls(cfg.net, netlib.NetParams(flat, state.params.manifest), cfg.target, cfg.dtype)

    def __call__(self, t, x_t, xi) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        out = np.asarray(netlib.forward(self.cfg, self._weights, t, x_t, xi), dtype=float)
        if self.target == "velocity":
            return x_t + t[:, None] * out
        return out
