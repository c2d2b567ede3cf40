"""Binary checkpoint files.

Layout: magic "ITRL", one version byte, then length-prefixed entries of
(name, shape, raw little-endian float32 payload). String-valued metadata
(config headers) rides along as zero-length entries named "__meta__:key=value"
written before the arrays, so the wire format stays uniform.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"ITRL"
VERSION = 1
_META_PREFIX = "__meta__:"


class CheckpointError(ValueError):
    pass


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray | Tensor],
    meta: dict[str, str] | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        for key in sorted(meta or {}):
            value = str((meta or {})[key])
            if "=" in key:
                raise CheckpointError(f"meta key {key!r} may not contain '='")
            _write_entry(fh, f"{_META_PREFIX}{key}={value}", np.zeros(0, dtype=np.float32))
        for name in sorted(arrays):
            a = arrays[name]
            arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float32)
            _write_entry(fh, name, arr)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if blob[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob[4]}")
    off = 5
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    total = len(blob)
    while off < total:
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape.append(d)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        if name.startswith(_META_PREFIX):
            key, _, value = name[len(_META_PREFIX) :].partition("=")
            meta[key] = value
        else:
            arrays[name] = payload.reshape(shape).astype(np.float32)
    return arrays, meta


def save_training_state(
    path: str | Path,
    params: dict[str, Tensor],
    opt: AdamWState | None = None,
    meta: dict[str, str] | None = None,
) -> None:
    """Checkpoint parameters plus optimizer buffers (opt.m/<name>, opt.v/<name>,
    opt.step) so training can resume bit-exactly."""
    arrays: dict[str, np.ndarray] = {k: v.data for k, v in params.items()}
    if opt is not None:
        for name, m in opt.m.items():
            arrays[f"opt.m/{name}"] = m
        for name, v in opt.v.items():
            arrays[f"opt.v/{name}"] = v
        arrays["opt.step"] = np.array([opt.step], dtype=np.float32)
    save_checkpoint(path, arrays, meta)


def load_training_state(
    path: str | Path,
) -> tuple[dict[str, np.ndarray], AdamWState, dict[str, str]]:
    arrays, meta = load_checkpoint(path)
    opt = AdamWState()
    params: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name == "opt.step":
            opt.step = int(arr[0])
        elif name.startswith("opt.m/"):
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v/"):
            opt.v[name[6:]] = arr
        else:
            params[name] = arr
    return params, opt, meta
