"""Binary checkpoint files.

Layout (all integers little-endian u32)::

    b"ATNL" | version | record count | records...

    record = name length | UTF-8 name | rank | extents[rank] | payload

Parameter payloads are row-major little-endian float32. The final record is
named ``__config__``: rank 1, extent = byte length, payload = a UTF-8
``key = value`` block holding the model configuration (and the symbol table,
when the model has one).
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, IncompatibleCheckpointError
from .model import ModelConfig, Transformer, TransformerParams, param_shapes
from .tensor import Tensor

MAGIC = b"ATNL"
VERSION = 1
CONFIG_RECORD = "__config__"

_U32 = struct.Struct("<I")


def _config_block(model: Transformer) -> bytes:
    lines = [f"{k} = {v}" for k, v in model.config.to_items()]
    if model.symbols is not None:
        lines.append("symbols = " + " ".join(model.symbols))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_kv_block(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dumps(model: Transformer) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    items = list(model.params.items())
    buf.write(_U32.pack(len(items) + 1))
    for name, t in items:
        _write_record(buf, name, t.data.shape, t.data.astype("<f4").tobytes(order="C"))
    block = _config_block(model)
    _write_record(buf, CONFIG_RECORD, (len(block),), block)
    return buf.getvalue()


def _write_record(buf, name: str, shape, payload: bytes) -> None:
    raw = name.encode("utf-8")
    buf.write(_U32.pack(len(raw)))
    buf.write(raw)
    buf.write(_U32.pack(len(shape)))
    for n in shape:
        buf.write(_U32.pack(n))
    buf.write(payload)


def save_checkpoint(path, model: Transformer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_records(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Decode raw bytes into (name -> float32 array, config items)."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not an ATNL checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    config: dict[str, str] | None = None
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        if name == CONFIG_RECORD:
            config = parse_kv_block(r.take(shape[0]).decode("utf-8"))
            continue
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after last record")
    if config is None:
        raise CheckpointFormatError("checkpoint has no __config__ record")
    return arrays, config


def _build(arrays: dict[str, np.ndarray], items: dict[str, str]) -> Transformer:
    cfg = ModelConfig.from_items(items)
    expected = param_shapes(cfg)
    if set(expected) != set(arrays):
        diff = sorted(set(expected) ^ set(arrays))
        raise CheckpointFormatError(f"parameters do not match config: {diff}")
    params = TransformerParams()
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointFormatError(f"{name}: shape {arrays[name].shape} != {shape}")
        params[name] = Tensor(arrays[name].astype(np.float64), requires_grad=True)
    symbols = items["symbols"].split() if "symbols" in items else None
    return Transformer(cfg, params, symbols=symbols)


def load_checkpoint(path) -> Transformer:
    arrays, items = read_records(Path(path).read_bytes())
    return _build(arrays, items)


def average_checkpoints(paths) -> Transformer:
    """Elementwise mean of the parameters stored in ``paths``.

    Values are sorted per coordinate before summing, so the result does not
    depend on the order of ``paths``.
    """
    paths = list(paths)
    if not paths:
        raise IncompatibleCheckpointError("no checkpoints to average")
    loaded = [read_records(Path(p).read_bytes()) for p in paths]
    first_arrays, first_items = loaded[0]
    first_cfg = ModelConfig.from_items(first_items)
    for p, (arrays, items) in zip(paths[1:], loaded[1:]):
        if set(arrays) != set(first_arrays):
            diff = sorted(set(arrays) ^ set(first_arrays))
            raise IncompatibleCheckpointError(f"{p}: parameter names differ from {paths[0]}: {diff}")
        for k, v in arrays.items():
            if v.shape != first_arrays[k].shape:
                raise IncompatibleCheckpointError(f"{p}: {k} has shape {v.shape}, expected {first_arrays[k].shape}")
        if ModelConfig.from_items(items) != first_cfg:
            raise IncompatibleCheckpointError(f"{p}: model configuration differs from {paths[0]}")
    model = _build(first_arrays, first_items)
    for k in first_arrays:
        stacked = np.sort(np.stack([arrays[k].astype(np.float64) for arrays, _ in loaded]), axis=0)
        model.params[k].data = stacked.sum(axis=0) / len(paths)
    return model
