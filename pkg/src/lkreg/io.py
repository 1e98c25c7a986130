"""Bit-exact raw tensor files ("tns v1") and checkpoint directories.

A tns file is one ASCII header line ``tns v1 <f32|f64> <ndim> <d1> ... <dn>``
terminated by ``\\n``, followed by little-endian values in C order.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import DataError

PathLike = Union[str, os.PathLike]

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}

MANIFEST = "manifest.txt"
NET_CONFIG = "net.cfg"


def write_tns(path: PathLike, array) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32 if arr.dtype.kind == "f" and arr.itemsize <= 4 else np.float64)
    code = _CODES[arr.dtype]
    header = f"tns v1 {code} {arr.ndim}" + "".join(f" {d}" for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tns(path: PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            header = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) < 4 or parts[0] != "tns" or parts[1] != "v1" or parts[2] not in _DTYPES:
        raise DataError(f"{path}: not a tns v1 file (header {header[:40]!r})")
    try:
        ndim = int(parts[3])
        shape = tuple(int(p) for p in parts[4:])
    except ValueError:
        raise DataError(f"{path}: malformed tns header {header!r}") from None
    if len(shape) != ndim or any(d < 0 for d in shape):
        raise DataError(f"{path}: header declares {ndim} dims but lists {shape}")
    dt = _DTYPES[parts[2]]
    n = int(np.prod(shape)) if shape else 1
    if len(payload) != n * dt.itemsize:
        raise DataError(f"{path}: expected {n * dt.itemsize} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_checkpoint(directory: PathLike, net) -> Path:
    """One tns file per parameter, a name->file manifest, and the net config."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, p in net.params.items():
        fname = name.replace(".", "__") + ".tns"
        write_tns(d / fname, p.data)
        lines.append(f"{name} {fname}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    (d / NET_CONFIG).write_text(net.cfg.to_text())
    return d


def load_checkpoint(directory: PathLike):
    from .network import NetConfig, Network

    d = Path(directory)
    if not (d / MANIFEST).is_file() or not (d / NET_CONFIG).is_file():
        raise DataError(f"{d} is not a checkpoint directory (missing {MANIFEST} or {NET_CONFIG})")
    cfg = NetConfig.from_text((d / NET_CONFIG).read_text())
    params: Dict[str, np.ndarray] = {}
    for line in (d / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname = line.split()
        params[name] = read_tns(d / fname)
    dtype = next(iter(params.values())).dtype if params else np.float32
    return Network(cfg, params=params, dtype=dtype)


def checkpoint_digest(directory: PathLike) -> str:
    """SHA-256 over manifest order and every parameter file's bytes."""
    d = Path(directory)
    h = hashlib.sha256()
    for line in (d / MANIFEST).read_text().splitlines():
        if line.strip():
            name, fname = line.split()
            h.update(name.encode())
            h.update((d / fname).read_bytes())
    return h.hexdigest()


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]
