"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"NARA" | u32 version | u64 len | metadata (UTF-8 JSON)
    repeated: u64 len | name (UTF-8) | u8 dtype (0 = f64) | u8 rank | u64 dims[rank] | f64 values
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NARA"
VERSION = 1
DTYPE_F64 = 0
_MAX_ELEMENTS = 1 << 40


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    rng_state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def metadata(self) -> dict:
        return {"config": self.config, "step": self.step, "rng": self.rng_state}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(meta)), meta]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = struct.unpack("<Q", take(8, "metadata length"))
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<Q", take(8, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, f"tensor {name!r} header"))
        if dtype != DTYPE_F64:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"tensor {name!r} dims"))
        count = 1
        for d in dims:
            count *= d
            if count > _MAX_ELEMENTS:
                raise CheckpointError(f"tensor {name!r}: dims {list(dims)} overflow")
        raw = take(8 * count, f"tensor {name!r} values")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return Checkpoint(meta["config"], meta["step"], meta["rng"], tensors, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        return decode_checkpoint(buf)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
