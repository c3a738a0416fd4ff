"""Command-line entry point: ``train``, ``sample``, ``eval`` and ``analyze``.

Relative output paths resolve against ``$DDM_OUTPUT_ROOT`` (default: the
current directory). Every command writes a ``*.manifest.json`` next to its
outputs holding the merged config, seed, code hash, argv and output paths.

Exit codes: 0 success, 2 config or usage error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfglib
from . import gaussian_oracle as go
from . import sampler as smp
from .artifacts import CheckpointError, code_hash, load_checkpoint, write_csv, write_json_mirror
from .evaluation import make_dataset, metric_mmd2, metric_posterior_std
from .net import NetParams
from .trainer import Denoiser, NumericError, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DDM_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolve(path) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _write_manifest(path: Path, command: str, argv: list, config: dict, seed, outputs: list) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "code_hash": code_hash(),
        "outputs": [str(o) for o in outputs],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------- train

TRAIN_FLAGS = {
    "dataset": ("data.dataset", str),
    "data_size": ("data.size", int),
    "data_seed": ("data.seed", int),
    "steps": ("train.steps", int),
    "n": ("train.batch", int),
    "m": ("train.population", int),
    "lr": ("train.lr", float),
    "warmup": ("train.warmup", int),
    "seed": ("train.seed", int),
    "checkpoint_every": ("train.checkpoint_every", int),
    "eta_safe": ("train.eta_safe", float),
    "dtype": ("train.dtype", str),
    "target": ("train.target", str),
    "lam": ("score.lam", float),
    "kernel": ("score.kernel", str),
    "kernel_param": ("score.kernel_param", float),
    "weight": ("score.weight", str),
    "bias": ("score.weight_bias", float),
    "preset": ("net.preset", str),
    "hidden_dim": ("net.hidden_dim", int),
    "n_layers": ("net.n_layers", int),
}


def _add_train(sub):
    p = sub.add_parser("train", help="train a denoiser", description="Train a distributional denoiser.")
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--out", default="run", help="run directory (relative to $%s)" % OUTPUT_ROOT_ENV)
    p.add_argument("--dataset", choices=["two_gaussians", "checkerboard"])
    p.add_argument("--data-size", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int, help="batch size")
    p.add_argument("--m", type=int, help="population size per datum")
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--eta-safe", type=float)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--target", choices=["x0", "velocity"])
    p.add_argument("--lambda", dest="lam", type=float, help="interaction weight in [0, 1]")
    p.add_argument("--beta", type=float, help="energy exponent in (0, 2]; selects the energy kernel")
    p.add_argument("--kernel", choices=["energy", "imq", "rbf", "exp"])
    p.add_argument("--kernel-param", type=float)
    p.add_argument("--weight", choices=["unit", "sigmoid"])
    p.add_argument("--bias", type=float, help="sigmoid weight bias b")
    p.add_argument("--preset", choices=["fused", "paper"])
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--json", action="store_true", help="mirror the metrics CSV as JSON")


def build_run_config(args) -> cfglib.RunConfig:
    cfg = cfglib.load(args.config) if args.config else cfglib.RunConfig()
    overrides = {}
    for flag, (path, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[path] = v
    if args.beta is not None:
        if not 0.0 < args.beta <= 2.0:
            raise cfglib.ConfigError(f"score.kernel_param: --beta must lie in (0, 2], got {args.beta}")
        overrides["score.kernel"] = "energy"
        overrides["score.kernel_param"] = args.beta
    cfg = cfglib.update(cfg, overrides)
    cfg.train_config()  # validates cross-field constraints
    return cfg


def cmd_train(args, argv) -> int:
    cfg = build_run_config(args)
    tcfg = cfg.train_config()
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg.data.dataset, cfg.data.size, cfg.data.seed).points
    (out / "config.ini").write_text(cfglib.dumps(cfg))
    res = train(tcfg, data, out, resume=not args.no_resume, log_every=args.log_every)
    outputs = [out / n for n in ("params.ckpt", "ema.ckpt", "optim.ckpt", "metrics.csv", "config.ini")]
    if args.json:
        write_json_mirror(out / "metrics.csv", ["step", "loss", "grad_norm", "lr", "wall_ms"], res.metrics)
        outputs.append(out / "metrics.json")
    _write_manifest(out / "manifest.json", "train", argv, cfglib.as_dict(cfg) | {"config_hash": tcfg.digest()}, tcfg.seed, outputs)
    print(f"trained {res.state.step} steps -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- sample

def load_run(run_dir: Path, use_ema: bool = True):
    """Load ``(RunConfig, TrainConfig, Denoiser)`` from a run directory, checking config hashes."""
    cfg = cfglib.load(run_dir / "config.ini")
    tcfg = cfg.train_config()
    ckpt = run_dir / ("ema.ckpt" if use_ema else "params.ckpt")
    manifest, flat, header = load_checkpoint(ckpt)
    if header.get("config_hash") != tcfg.digest():
        raise cfglib.ConfigError(f"version mismatch: {ckpt} has config hash {header.get('config_hash')}, config.ini gives {tcfg.digest()}")
    mpath = run_dir / "manifest.json"
    if mpath.exists():
        recorded = json.loads(mpath.read_text())["config"].get("config_hash")
        if recorded != header.get("config_hash"):
            raise cfglib.ConfigError(f"version mismatch: manifest records {recorded}, checkpoint has {header.get('config_hash')}")
    params = NetParams(flat, manifest)
    return cfg, tcfg, Denoiser(tcfg.net, params, tcfg.target, tcfg.dtype)


def _add_sample(sub):
    p = sub.add_parser("sample", help="draw samples from a trained run")
    p.add_argument("--checkpoint", required=True, help="run directory written by train")
    p.add_argument("--steps", type=int, default=5, help="number of sampling steps N (= NFE)")
    p.add_argument("--churn", type=float, default=1.0)
    p.add_argument("--count", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta-safe", type=float, default=1e-2)
    p.add_argument("--raw", action="store_true", help="use raw parameters instead of the EMA")
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--dump-trajectory", action="store_true")
    p.add_argument("--json", action="store_true")


def cmd_sample(args, argv) -> int:
    run_dir = _resolve(args.checkpoint)
    if not (run_dir / "config.ini").exists():
        raise FileNotFoundError(f"{run_dir}: no run directory with config.ini")
    cfg, tcfg, den = load_run(run_dir, use_ema=not args.raw)
    try:
        scfg = smp.SamplerConfig(args.steps, args.churn, args.eta_safe, args.seed)
    except ValueError as exc:
        raise cfglib.ConfigError(str(exc)) from exc
    res = smp.sample(den, scfg, args.count, tcfg.net.data_dim, args.dump_trajectory)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    d = tcfg.net.data_dim
    header = [f"x{i}" for i in range(d)]
    write_csv(out, header, res.samples.tolist(), args.json)
    outputs = [out]
    if res.trajectory is not None:
        grid = smp.time_grid(args.steps, args.eta_safe)[::-1]
        rows = [[k, float(grid[k]), c] + list(map(float, x)) for k, snap in enumerate(res.trajectory) for c, x in enumerate(snap)]
        tpath = out.with_name(out.stem + ".trajectory.csv")
        write_csv(tpath, ["snapshot", "t", "chain"] + header, rows, args.json)
        outputs.append(tpath)
    conf = {"run": str(run_dir), "train_config_hash": tcfg.digest(), "steps": args.steps, "churn": args.churn, "count": args.count, "eta_safe": args.eta_safe, "ema": not args.raw}
    _write_manifest(out.with_name(out.stem + ".manifest.json"), "sample", argv, conf, args.seed, outputs)
    print(f"wrote {args.count} samples -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _add_eval(sub):
    p = sub.add_parser("eval", help="compute metrics")
    p.add_argument("--metric", required=True, choices=["mmd2", "posterior_std"])
    p.add_argument("--samples", help="samples CSV (for mmd2)")
    p.add_argument("--dataset", default="two_gaussians", choices=["two_gaussians", "checkerboard"])
    p.add_argument("--ref-size", type=int, default=4096)
    p.add_argument("--ref-seed", type=int, default=12345)
    p.add_argument("--nfe", type=int, help="NFE label (default: read from the samples manifest)")
    p.add_argument("--checkpoint", help="run directory (for posterior_std); omit with --oracle")
    p.add_argument("--oracle", action="store_true", help="evaluate the exact posterior as the model")
    p.add_argument("--n-eval", type=int, default=1024)
    p.add_argument("--t-points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--json", action="store_true")


def cmd_eval(args, argv) -> int:
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.metric == "mmd2":
        if not args.samples:
            raise UsageError("eval --metric mmd2 needs --samples")
        spath = _resolve(args.samples)
        X = np.loadtxt(spath, delimiter=",", skiprows=1, ndmin=2)
        ref = make_dataset(args.dataset, args.ref_size, args.ref_seed).points
        if X.shape[1] != ref.shape[1]:
            raise cfglib.ConfigError(f"dimension mismatch: samples have {X.shape[1]} columns, dataset has {ref.shape[1]}")
        nfe = args.nfe
        if nfe is None:
            mpath = spath.with_name(spath.stem + ".manifest.json")
            nfe = json.loads(mpath.read_text())["config"]["steps"] if mpath.exists() else -1
        value = metric_mmd2(X, ref)
        write_csv(out, ["nfe", "mmd2"], [[nfe, value]], args.json)
        conf = {"metric": "mmd2", "samples": str(spath), "dataset": args.dataset, "ref_size": args.ref_size, "ref_seed": args.ref_seed}
    else:
        if args.dataset != "two_gaussians":
            raise cfglib.ConfigError("posterior_std needs a closed-form posterior; only two_gaussians has one")
        if args.oracle == bool(args.checkpoint):
            raise UsageError("posterior_std needs exactly one of --checkpoint or --oracle")
        model = go.MixturePosteriorDenoiser(go.TWO_GAUSSIANS) if args.oracle else load_run(_resolve(args.checkpoint))[2]
        t_grid = np.linspace(0.05, 0.95, args.t_points)
        curve = metric_posterior_std(model, go.TWO_GAUSSIANS, t_grid, args.n_eval, args.seed)
        rows = [[float(t), float(a), float(b)] for t, a, b in zip(curve.t, curve.model, curve.oracle)]
        write_csv(out, ["t", "avg_std_model", "avg_std_oracle"], rows, args.json)
        conf = {"metric": "posterior_std", "checkpoint": args.checkpoint, "oracle": args.oracle, "n_eval": args.n_eval, "t_points": args.t_points}
    _write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", argv, conf, args.seed, [out])
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

FIGURES = ("f_surface", "variance_evolution", "snr", "compat")


def _add_analyze(sub):
    p = sub.add_parser("analyze", help="training-free closed-form analyses")
    p.add_argument("--figure", required=True, choices=FIGURES)
    p.add_argument("--sigma2", type=float, default=4.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--churn", type=float, default=1.0)
    p.add_argument("--n-values", type=int, nargs="+", default=list(range(5, 101, 5)))
    p.add_argument("--eta-safe", type=float, default=0.0, help="grid margin for variance_evolution")
    p.add_argument("--bias", type=float, nargs="+", default=[0.0, 1.0, 2.0])
    p.add_argument("--grid", type=int, default=41, help="points per axis / per curve")
    p.add_argument("--kernel", choices=list(go.COMPAT_KINDS) + ["all"], default="all")
    p.add_argument("--c-values", type=float, nargs="+", default=[1e1, 1e2, 1e3, 1e4, 1e5, 1e6])
    p.add_argument("--pairs", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV (default: the figure's canonical name)")
    p.add_argument("--json", action="store_true")


def _check_range(name, value, lo, hi, lo_open=False, hi_open=False):
    bad = value < lo or value > hi or (lo_open and value == lo) or (hi_open and value == hi)
    if bad or not math.isfinite(value):
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise cfglib.ConfigError(f"--{name} must lie in {lb}{lo}, {hi}{rb}, got {value}")


def cmd_analyze(args, argv) -> int:
    default_names = {"f_surface": "fig1_left.csv", "variance_evolution": "fig1_right.csv", "snr": "fig2.csv", "compat": "compat.csv"}
    out = _resolve(args.out or default_names[args.figure])
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    conf = {"figure": args.figure}
    if args.figure == "f_surface":
        lams = np.linspace(0.0, 1.0, args.grid)
        betas = np.linspace(0.0, 2.0, args.grid, endpoint=False)
        rows = [[float(lam), float(b), go.f_reduction(float(lam), float(b))] for lam in lams for b in betas]
        write_csv(out, ["lambda", "beta", "f"], rows, args.json)
        conf |= {"grid": args.grid}
    elif args.figure == "variance_evolution":
        _check_range("sigma2", args.sigma2, 0.0, math.inf, lo_open=True)
        _check_range("lambda", args.lam, 0.0, 1.0)
        _check_range("beta", args.beta, 0.0, 2.0)
        _check_range("churn", args.churn, 0.0, 1.0)
        target = go.GaussianSpec([0.0], args.sigma2)
        rows = []
        for N in args.n_values:
            if N < 1:
                raise cfglib.ConfigError(f"--n-values must be >= 1, got {N}")
            ev = go.variance_evolution(target, N, args.lam, args.beta, args.churn, args.eta_safe)
            rows.append([N, ev.terminal_variance, args.sigma2])
        write_csv(out, ["N", "terminal_variance", "target_variance"], rows, args.json)
        conf |= {k: getattr(args, k) for k in ("sigma2", "lam", "beta", "churn", "n_values", "eta_safe")}
    elif args.figure == "snr":
        s2 = np.logspace(-2, 2, args.grid)
        rows = []
        stars = []
        for b in args.bias:
            for v in s2:
                s = math.sqrt(v)
                rows.append([b, float(v), go.snr_conditional(s, b), go.snr_joint(s, b)])
            cr = go.snr_crossing(b)
            stars.append([b, cr.sigma2_star, cr.holds_above])
        write_csv(out, ["bias", "sigma2", "snr_conditional", "snr_joint"], rows, args.json)
        spath = out.with_name(out.stem + "_crossings.csv")
        write_csv(spath, ["bias", "sigma2_star", "holds_above"], stars, args.json)
        outputs.append(spath)
        conf |= {"bias": args.bias, "grid": args.grid}
    else:
        kinds = go.COMPAT_KINDS if args.kernel == "all" else (args.kernel,)
        p = go.GaussianSpec([0.0, 0.0], 1.0)
        q = go.GaussianSpec([1.0, 0.0], 1.0)
        ed = go.energy_distance_gaussians(p, q)
        rows = []
        for kind in kinds:
            limit = ed if kind == "exp" else 1.0
            for pt in go.compat_limit(kind, p, q, args.c_values, n_pairs=args.pairs, seed=args.seed):
                rows.append([kind, pt.c, pt.value, pt.stderr, limit])
        write_csv(out, ["kernel", "c", "scaled_divergence", "stderr", "limit"], rows, args.json)
        conf |= {"kernels": list(kinds), "c_values": args.c_values, "pairs": args.pairs}
    if args.json:
        outputs += [o.with_suffix(".json") for o in list(outputs)]
    _write_manifest(out.with_name(out.stem + ".manifest.json"), "analyze", argv, conf, args.seed, outputs)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distdiff", description="Distributional diffusion models at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_train(sub)
    _add_sample(sub)
    _add_eval(sub)
    _add_analyze(sub)
    return parser


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cfglib.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
