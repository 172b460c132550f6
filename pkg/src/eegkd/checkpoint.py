"""Binary tensor container used for checkpoints.

Layout (little-endian)::

    b"CGNT"  u16 version  u32 n_tensors
    n_tensors x (u16 name_len, name utf-8, u32 rows, u32 cols, rows*cols f64)
    u32 meta_len, meta_len bytes of UTF-8 JSON

Vectors are stored as 1 x n matrices. The JSON metadata record holds the
stack configuration, the optimizer step count and a digest of the training
configuration. Optimizer moments are stored as ``adam.m.<name>`` and
``adam.v.<name>`` tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import DTYPE
from .recurrent import LstmStack, StackConfig, param_shapes

MAGIC = b"CGNT"
VERSION = 1
_HEAD = struct.Struct("<4sHI")
_NAME_LEN = struct.Struct("<H")
_DIMS = struct.Struct("<II")
_META_LEN = struct.Struct("<I")


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    parts = [_HEAD.pack(MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=DTYPE)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise FormatError(f"tensor {name!r} must be 1-D or 2-D, got shape {a.shape}")
        raw = name.encode("utf-8")
        parts += [_NAME_LEN.pack(len(raw)), raw, _DIMS.pack(*a.shape), a.astype("<f8").tobytes()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [_META_LEN.pack(len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()

    def need(off, n, what):
        if off + n > len(buf):
            raise FormatError(f"{path}: truncated {what} at byte offset {off}")

    need(0, _HEAD.size, "header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    off = _HEAD.size
    tensors = {}
    for _ in range(count):
        need(off, _NAME_LEN.size, "tensor name length")
        (n,) = _NAME_LEN.unpack_from(buf, off)
        off += _NAME_LEN.size
        need(off, n, "tensor name")
        name = buf[off:off + n].decode("utf-8")
        off += n
        need(off, _DIMS.size, f"dims of {name!r}")
        rows, cols = _DIMS.unpack_from(buf, off)
        off += _DIMS.size
        need(off, 8 * rows * cols, f"values of {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(DTYPE)
        off += 8 * rows * cols
    need(off, _META_LEN.size, "metadata length")
    (m,) = _META_LEN.unpack_from(buf, off)
    off += _META_LEN.size
    need(off, m, "metadata")
    try:
        meta = json.loads(buf[off:off + m].decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"{path}: unreadable metadata record: {e}") from None
    return tensors, meta


def stack_from_tensors(tensors: dict[str, np.ndarray], config: StackConfig) -> LstmStack:
    params = {}
    for name, shape in param_shapes(config).items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        t = tensors[name]
        if t.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name!r} has {t.size} values, expected shape {shape}")
        params[name] = t.reshape(shape).copy()
    return LstmStack(config, params)


def save_stack(stack: LstmStack, path) -> None:
    write_tensors(path, dict(stack.params), {"stack": stack.config.to_dict()})


def load_stack(path) -> LstmStack:
    tensors, meta = read_tensors(path)
    if "stack" not in meta:
        raise FormatError(f"{path}: metadata has no stack configuration")
    return stack_from_tensors(tensors, StackConfig.from_dict(meta["stack"]))
