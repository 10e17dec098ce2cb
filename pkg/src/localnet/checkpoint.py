"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"LOCALNET"
    version      u32       currently 1
    header_len   u64
    header       header_len bytes of UTF-8 JSON (model config, optimizer
                 scalars, free-form metadata), keys sorted
    block_count  u64
    block_count blocks, each:
        name_len u64, name bytes (UTF-8)
        rank     u64, rank x u64 dims
        values   prod(dims) x f32

Block names are prefixed ``param/`` (learnable tensors), ``buffer/``
(batch-norm running statistics), ``adam.m/`` and ``adam.v/`` (optimizer
moments). Blocks are written in sorted name order so identical state gives
identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .network import NetworkParams, config_from_dict, init_params

MAGIC = b"LOCALNET"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: object
    params: NetworkParams
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _write_block(buf, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<Q", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(config, params: NetworkParams, adam: AdamState | None = None, meta: dict | None = None) -> bytes:
    header = {"config": config.to_dict(), "meta": meta or {}}
    blocks: dict[str, np.ndarray] = {}
    for name, t in params.named_tensors().items():
        blocks[f"param/{name}"] = t.data
    for name, arr in params.named_buffers().items():
        blocks[f"buffer/{name}"] = arr
    if adam is not None:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                          "eps": adam.eps, "step_count": adam.step_count}
        for name, arr in adam.m.items():
            blocks[f"adam.m/{name}"] = arr
        for name, arr in adam.v.items():
            blocks[f"adam.v/{name}"] = arr
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<Q", len(blocks)))
    for name in sorted(blocks):
        _write_block(buf, name, blocks[name])
    return buf.getvalue()


def save(path, config, params, adam=None, meta=None):
    Path(path).write_bytes(dumps(config, params, adam, meta))


def _read(view: memoryview, pos: int, fmt: str):
    size = struct.calcsize(fmt)
    if pos + size > len(view):
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, view, pos), pos + size


def loads(data: bytes) -> Checkpoint:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,), pos = _read(view, 8, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,), pos = _read(view, pos, "<Q")
    if pos + hlen > len(view):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    pos += hlen
    (count,), pos = _read(view, pos, "<Q")
    blocks = {}
    for _ in range(count):
        (nlen,), pos = _read(view, pos, "<Q")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,), pos = _read(view, pos, "<Q")
        dims, pos = _read(view, pos, f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(view):
            raise CheckpointError(f"truncated block {name!r}")
        blocks[name] = np.frombuffer(view[pos:pos + size], dtype="<f4").reshape(dims).astype(np.float32)
        pos += size

    config = config_from_dict(header["config"])
    params = init_params(config, 0)
    tensors, buffers = params.named_tensors(), params.named_buffers()
    for name, t in tensors.items():
        arr = blocks.get(f"param/{name}")
        if arr is None or arr.shape != t.shape:
            raise CheckpointError(f"missing or misshapen parameter {name!r}")
        t.data = arr.copy()
    for name, buf in buffers.items():
        arr = blocks.get(f"buffer/{name}")
        if arr is None or arr.shape != buf.shape:
            raise CheckpointError(f"missing or misshapen buffer {name!r}")
        buf[...] = arr
    adam = None
    if "adam" in header:
        adam = AdamState(**header["adam"])
        for name in tensors:
            if f"adam.m/{name}" in blocks:
                adam.m[name] = blocks[f"adam.m/{name}"].copy()
                adam.v[name] = blocks[f"adam.v/{name}"].copy()
    return Checkpoint(config, params, adam, header.get("meta", {}))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
