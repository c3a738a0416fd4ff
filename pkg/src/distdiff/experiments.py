"""Desk-scale 2D experiments shared by ``scripts/`` and the acceptance suite.

Each run lives in ``<root>/<dataset>-<kind>-s<seed>-<config digest>-<code hash>``
so a finished run is reused only when both its configuration and the source of
every module that shapes training are unchanged. Interrupted runs resume from
their last checkpoint.
"""
from __future__ import annotations

import ast
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfglib
from . import sampler as smp
from .artifacts import CheckpointError, code_hash, load_checkpoint
from .evaluation import make_dataset, metric_mmd2, metric_posterior_std
from .gaussian_oracle import TWO_GAUSSIANS

KINDS = ("distributional", "baseline")
# modules whose source changes a trained checkpoint; cli, sampler and the oracles do not
TRAINING_MODULES = ("artifacts", "autodiff", "config", "evaluation", "net", "optim", "schedule", "scoring", "trainer")
DEFAULT_ROOT = Path(os.environ.get("DDM_DESK_ROOT", Path(__file__).resolve().parents[2] / "runs" / "desk"))
T_GRID = np.linspace(0.05, 0.95, 10)

# unit weighting: at 20k steps the sigmoid weight (b=0) leaves the noisy end
# undertrained and the posterior spread there collapses
WEIGHT, WEIGHT_BIAS = "unit", 0.0


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def training_code_hash() -> str:
    """Hash of the syntax trees of :data:`TRAINING_MODULES`; comments and docstrings do not count."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for name in TRAINING_MODULES:
        tree = _strip_docstrings(ast.parse((root / f"{name}.py").read_text()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:12]


def desk_config(kind: str, dataset: str = "two_gaussians", seed: int = 0, steps: int = 20000) -> cfglib.RunConfig:
    """Distributional: lambda=1, beta=0.1, m=32 on x0. Baseline: lambda=0, beta=2, m=1, also on x0."""
    if kind == "distributional":
        score = {"score.lam": 1.0, "score.kernel_param": 0.1, "train.population": 32, "train.target": "x0"}
    elif kind == "baseline":
        score = {"score.lam": 0.0, "score.kernel_param": 2.0, "train.population": 1, "train.target": "x0"}
    else:
        raise ValueError(f"unknown run kind {kind!r}; expected one of {KINDS}")
    overrides = {
        "data.dataset": dataset, "train.seed": seed, "train.steps": steps, "train.batch": 128, "train.lr": 1e-3,
        "train.checkpoint_every": 2000, "score.kernel": "energy", "score.weight": WEIGHT, "score.weight_bias": WEIGHT_BIAS,
    }
    return cfglib.update(cfglib.RunConfig(), overrides | score)


@dataclass(frozen=True)
class RunSpec:
    kind: str
    dataset: str = "two_gaussians"
    seed: int = 0
    steps: int = 20000

    def config(self) -> cfglib.RunConfig:
        return desk_config(self.kind, self.dataset, self.seed, self.steps)

    def dirname(self) -> str:
        digest = self.config().train_config().digest()
        return f"{self.dataset}-{self.kind}-s{self.seed}-{digest}-{training_code_hash()}"


def finished(run_dir: Path, steps: int) -> bool:
    if not (run_dir / "manifest.json").exists():
        return False
    try:
        _, _, header = load_checkpoint(run_dir / "ema.ckpt")
    except (CheckpointError, OSError):
        return False
    return int(header.get("step", -1)) == steps


def ensure_trained(spec: RunSpec, root=DEFAULT_ROOT) -> Path:
    """Train ``spec`` unless a finished run with the same key exists; returns the run directory."""
    from .cli import main  # cli imports this module's dependencies; keep the import local

    run_dir = Path(root) / spec.dirname()
    if finished(run_dir, spec.steps):
        return run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    ini = run_dir / "desk.ini"
    ini.write_text(cfglib.dumps(spec.config()))
    code = main(["train", "--config", str(ini), "--out", str(run_dir), "--log-every", "2000"])
    if code != 0:
        raise RuntimeError(f"training {run_dir} failed with exit code {code}")
    return run_dir


def ensure_all(specs, root=DEFAULT_ROOT, jobs: int = 1) -> list:
    """Train every spec, ``jobs`` processes at a time (seeds are independent)."""
    specs = list(specs)
    if jobs <= 1:
        return [ensure_trained(s, root) for s in specs]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(ensure_trained, specs, [root] * len(specs)))


def train_minutes(run_dir: Path) -> float:
    """Wall-clock training time recorded in ``metrics.csv``."""
    wall = np.loadtxt(run_dir / "metrics.csv", delimiter=",", skiprows=1, usecols=4, ndmin=1)
    return float(wall.sum()) / 60000.0


def run_mmd2(run_dir: Path, nfe: int = 5, count: int = 4096, seed: int = 0, ref_size: int = 4096, ref_seed: int = 12345) -> float:
    from .cli import load_run

    cfg, tcfg, den = load_run(run_dir)
    res = smp.sample(den, smp.SamplerConfig(steps=nfe, seed=seed), count, tcfg.net.data_dim)
    ref = make_dataset(cfg.data.dataset, ref_size, ref_seed).points
    return metric_mmd2(res.samples, ref)


def run_posterior_std(run_dir: Path, t_grid=T_GRID, n_eval: int = 1024, seed: int = 0):
    from .cli import load_run

    return metric_posterior_std(load_run(run_dir)[2], TWO_GAUSSIANS, t_grid, n_eval, seed)


def summarize(run_dir: Path, nfe=(5,)) -> dict:
    """MMD at each NFE and, on the two-Gaussian target, the posterior-std curves; cached as ``summary.json``."""
    path = run_dir / "summary.json"
    key = {"nfe": list(nfe), "t_grid": [float(t) for t in T_GRID], "code_hash": code_hash()}
    if path.exists():
        cached = json.loads(path.read_text())
        if cached.get("key") == key:
            return cached
    out = {"key": key, "mmd2": {str(k): run_mmd2(run_dir, k) for k in nfe}, "train_minutes": train_minutes(run_dir)}
    if cfglib.load(run_dir / "config.ini").data.dataset == "two_gaussians":
        curve = run_posterior_std(run_dir, np.append(T_GRID, 0.5))
        out["t"] = curve.t[:-1].tolist()
        out["std_model"] = curve.model[:-1].tolist()
        out["std_oracle"] = curve.oracle[:-1].tolist()
        out["std_model_half"], out["std_oracle_half"] = float(curve.model[-1]), float(curve.oracle[-1])
    path.write_text(json.dumps(out, indent=1) + "\n")
    return out
