"""XMLA checkpoint reader/writer.

Layout (all little-endian)::

    b"XMLA" | u32 version | u64 meta_len | meta (UTF-8 JSON) | f32 payloads

``meta`` holds the model config and a tensor directory of
``{name, shape, offset}`` entries; offsets count bytes from the start of the
payload region and tensors appear in directory order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .model import LmModel, ModelConfig
from .tensor import Tensor

MAGIC = b"XMLA"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def atomic_write(path, write_fn) -> None:
    """Write via a sibling temp file and rename; the target is never left truncated."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise CheckpointError(f"directory {parent} does not exist")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def encode_checkpoint(model: LmModel, extra: Optional[dict] = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    meta = {"config": model.config.to_dict(), "tensors": directory, "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model: LmModel, path, extra: Optional[dict] = None) -> None:
    data = encode_checkpoint(model, extra)
    atomic_write(path, lambda fh: fh.write(data))


def decode_checkpoint(raw: bytes, dtype=np.float32):
    if len(raw) < _HEADER.size:
        raise CheckpointError("file too short for an XMLA header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + meta_len
    if len(raw) < start:
        raise CheckpointError("truncated metadata")
    try:
        meta = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    payload = memoryview(raw)[start:]
    params = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        lo, hi = entry["offset"], entry["offset"] + 4 * n
        if hi > len(payload):
            raise CheckpointError(f"payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(dtype))
    expected_end = max((e["offset"] + 4 * int(np.prod(e["shape"])) for e in meta["tensors"]), default=0)
    if expected_end != len(payload):
        raise CheckpointError("trailing or missing payload bytes")
    cfg = ModelConfig.from_dict(meta["config"])
    return LmModel(cfg, params), meta.get("extra", {})


def load_checkpoint(path, dtype=np.float32, with_extra: bool = False):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    model, extra = decode_checkpoint(raw, dtype)
    return (model, extra) if with_extra else model
