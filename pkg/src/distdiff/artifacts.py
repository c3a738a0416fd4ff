"""On-disk formats: binary checkpoints, CSV/JSON tables and the code hash.

A checkpoint is a plain-text preamble followed by raw little-endian float64s::

    distdiff-checkpoint v1 kind=params config_hash=... seed=7 step=20000
    temb0.w 64 64
    ...
    END
    <binary payload>
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

MAGIC = "distdiff-checkpoint"
VERSION = "v1"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, manifest: list, flat: np.ndarray, header: dict) -> None:
    flat = np.ascontiguousarray(flat, dtype="<f8")
    total = sum(r * c for _, r, c in manifest)
    if total != flat.size:
        raise ValueError(f"manifest describes {total} values but got {flat.size}")
    for k, v in header.items():
        if " " in str(v) or "=" in str(k):
            raise ValueError(f"header entry {k}={v!r} must not contain spaces")
    lines = [" ".join([MAGIC, VERSION] + [f"{k}={v}" for k, v in header.items()])]
    lines += [f"{name} {r} {c}" for name, r, c in manifest]
    lines.append("END")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(flat.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(manifest, flat, header)``."""
    try:
        with open(path, "rb") as fh:
            first = fh.readline().decode("ascii").split()
            if len(first) < 2 or first[0] != MAGIC:
                raise CheckpointError(f"{path}: not a distdiff checkpoint")
            if first[1] != VERSION:
                raise CheckpointError(f"{path}: unsupported version {first[1]}")
            header = dict(item.split("=", 1) for item in first[2:])
            manifest = []
            while True:
                line = fh.readline()
                if not line:
                    raise CheckpointError(f"{path}: truncated manifest")
                line = line.decode("ascii").strip()
                if line == "END":
                    break
                name, r, c = line.split()
                manifest.append((name, int(r), int(c)))
            payload = fh.read()
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    total = sum(r * c for _, r, c in manifest)
    if len(payload) != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} payload bytes, found {len(payload)}")
    return manifest, np.frombuffer(payload, dtype="<f8").astype(np.float64), header


def write_csv(path, header: list, rows, as_json: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    if as_json:
        write_json_mirror(path, header, rows)


def write_json_mirror(path, header, rows) -> None:
    records = [{h: _jsonable(v) for h, v in zip(header, row)} for row in rows]
    with open(Path(path).with_suffix(".json"), "w") as fh:
        json.dump(records, fh, indent=1)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def read_matrix_csv(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr


def code_hash() -> str:
    """sha256 over the package sources, in sorted path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
