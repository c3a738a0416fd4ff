"""The denoiser x0_hat(t, x_t, xi): an MLP with a sinusoidal time embedding.

Two topologies ship:

* ``fused`` (default): embed(t) -> 2-layer MLP; the result is fused with
  ``[x_t, xi]`` in the first trunk layer, followed by ``n_layers - 1`` more
  hidden layers and a zero-initialized output layer of width ``d``.
* ``paper``: separate 4-layer stacks for the time features and for
  ``[x_t, xi]``, concatenated and passed through 4 more layers.

The first fused layer is stored as three weight blocks (x, xi, time) so that
the x and time contributions can be computed once per datum and replicated
across the population instead of once per population member.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad

PRESETS = ("fused", "paper")


@dataclass(frozen=True)
class NetConfig:
    data_dim: int = 2
    hidden_dim: int = 64
    n_layers: int = 9
    time_embed_dim: int = 64
    activation: str = "gelu"
    preset: str = "fused"
    time_scale: float = 1000.0

    def __post_init__(self):
        for name in ("data_dim", "hidden_dim", "n_layers", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"net.{name} must be >= 1, got {getattr(self, name)}")
        if self.time_embed_dim % 2:
            raise ValueError(f"net.time_embed_dim must be even, got {self.time_embed_dim}")
        if self.activation != "gelu":
            raise ValueError(f"net.activation: only 'gelu' is supported, got {self.activation!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"net.preset must be one of {PRESETS}, got {self.preset!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class NetParams:
    flat: np.ndarray
    manifest: list  # [(name, rows, cols)]

    def __post_init__(self):
        total = sum(r * c for _, r, c in self.manifest)
        if total != self.flat.size:
            raise ValueError(f"manifest describes {total} values but the vector has {self.flat.size}")

    def unflatten(self) -> dict:
        out, k = {}, 0
        for name, r, c in self.manifest:
            out[name] = self.flat[k : k + r * c].reshape(r, c)
            k += r * c
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.flat.copy(), list(self.manifest))


def time_embed(t, dim: int, scale: float = 1.0, base: float = 1e4) -> np.ndarray:
    """Interleaved ``[sin(w_0 s t), cos(w_0 s t), sin(w_1 s t), ...]`` with ``w_k = base**(-2k/dim)``."""
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=float)
    freqs = base ** (-np.arange(dim // 2) / (dim // 2))
    arg = scale * t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def layer_manifest(cfg: NetConfig) -> list:
    d, h, e = cfg.data_dim, cfg.hidden_dim, cfg.time_embed_dim
    man = []

    def dense(name, fan_in, fan_out):
        man.append((f"{name}.w", fan_in, fan_out))
        man.append((f"{name}.b", 1, fan_out))

    if cfg.preset == "fused":
        dense("temb0", e, h)
        dense("temb1", h, h)
        man.append(("in.wx", d, h))
        man.append(("in.wxi", d, h))
        man.append(("in.wt", h, h))
        man.append(("in.b", 1, h))
        for k in range(1, cfg.n_layers):
            dense(f"hid{k}", h, h)
    else:
        dense("tpre0", e, h)
        for k in range(1, 4):
            dense(f"tpre{k}", h, h)
        dense("xpre0", 2 * d, h)
        for k in range(1, 4):
            dense(f"xpre{k}", h, h)
        dense("post0", 2 * h, h)
        for k in range(1, 4):
            dense(f"post{k}", h, h)
    dense("out", h, d)
    return man


def init_params(cfg: NetConfig, rng: np.random.Generator) -> NetParams:
    """Fan-in uniform weights, zero biases, zero output layer."""
    man = layer_manifest(cfg)
    fan_in = {}
    for name, r, _ in man:
        layer = name.split(".")[0]
        if not name.endswith(".b"):
            fan_in[layer] = fan_in.get(layer, 0) + r
    chunks = []
    for name, r, c in man:
        layer = name.split(".")[0]
        if name.endswith(".b") or layer == "out":
            chunks.append(np.zeros(r * c))
        else:
            bound = 1.0 / np.sqrt(fan_in[layer])
            chunks.append(rng.uniform(-bound, bound, size=r * c))
    return NetParams(np.concatenate(chunks), man)


def _weights(params) -> Mapping:
    return params.unflatten() if isinstance(params, NetParams) else params


def forward(cfg: NetConfig, params, t, x_t, xi, m: int = 1):
    """Predict x0 for ``n*m`` rows.

    ``t`` has ``n`` entries and ``x_t`` has ``n`` rows (one per datum); ``xi`` has
    ``n*m`` rows laid out so that datum ``i`` owns rows ``[i*m, (i+1)*m)``.
    With the default ``m = 1`` this is the plain row-wise map. ``params`` may be
    a :class:`NetParams` or a mapping of layer arrays / autodiff variables.
    """
    W = _weights(params)
    dtype = ad.value(W["out.w"]).dtype
    t = np.asarray(t, dtype=float).reshape(-1)
    x_t = np.asarray(x_t, dtype=dtype)
    xi = np.asarray(xi, dtype=dtype)
    n = t.shape[0]
    if x_t.shape != (n, cfg.data_dim):
        raise ValueError(f"x_t must have shape {(n, cfg.data_dim)}, got {x_t.shape}")
    if xi.shape != (n * m, cfg.data_dim):
        raise ValueError(f"xi must have shape {(n * m, cfg.data_dim)}, got {xi.shape}")
    emb = time_embed(t, cfg.time_embed_dim, cfg.time_scale).astype(dtype)

    def dense(name, h, act=True):
        z = ad.linear(h, W[f"{name}.w"], W[f"{name}.b"])
        return ad.gelu(z) if act else z

    if cfg.preset == "fused":
        temb = dense("temb1", dense("temb0", emb))
        per_datum = ad.add(ad.matmul(x_t, W["in.wx"]), ad.matmul(temb, W["in.wt"]))
        h = ad.add(ad.replicate(n, m, per_datum), ad.linear(xi, W["in.wxi"], W["in.b"]))
        h = ad.gelu(h)
        for k in range(1, cfg.n_layers):
            h = dense(f"hid{k}", h)
    else:
        ht = emb
        for k in range(4):
            ht = dense(f"tpre{k}", ht)
        hx = np.concatenate([np.repeat(x_t, m, axis=0), xi], axis=1)
        for k in range(4):
            hx = dense(f"xpre{k}", hx)
        h = ad.concat([hx, ad.replicate(n, m, ht)], axis=1)
        for k in range(4):
            h = dense(f"post{k}", h)
    return dense("out", h, act=False)


def loss_and_grad(cfg: NetConfig, params: NetParams, closure: Callable, dtype=np.float64):
    """Reverse-mode ``(loss, grad)`` of ``closure(weights)`` over the flat parameter vector.

    ``closure`` receives a mapping of layer name to autodiff variable (cast to
    ``dtype``) and must return a scalar built from recorded primitives. The
    gradient is returned in float64, in manifest order.
    """
    tape = ad.Tape()
    arrays = params.unflatten()
    leaves = {name: tape.leaf(a.astype(dtype)) for name, a in arrays.items()}
    out = closure(leaves)
    if not isinstance(out, ad.Var):
        return float(np.asarray(out)), np.zeros_like(params.flat)
    names = [name for name, _, _ in params.manifest]
    grads = tape.gradients(out, [leaves[k] for k in names])
    flat = np.concatenate([g.reshape(-1).astype(np.float64) for g in grads])
    return float(out.value), flat
