"""Binary checkpoint format.

Layout (little endian)::

    b"DCSEG001"
    repeated until the trailer:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u32 dims
        u32 dtype tag (0 = float64)
        raw float64 data, row-major
    32-byte config hash (sha256)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .optim import OptimizerState

MAGIC = b"DCSEG001"
HASH_BYTES = 32
DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).digest()


def encode(tensors: Mapping[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != HASH_BYTES:
        raise CheckpointError("config hash must be 32 bytes")
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<I", DTYPE_F64))
        parts.append(arr.tobytes(order="C"))
    parts.append(digest)
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], bytes]:
    if buf[:len(MAGIC)] != MAGIC:
        if buf[:5] == MAGIC[:5]:
            raise CheckpointError(f"{source}: unsupported checkpoint version {buf[5:8]!r}")
        raise CheckpointError(f"{source}: bad magic")
    end = len(buf) - HASH_BYTES
    if end < len(MAGIC):
        raise CheckpointError(f"{source}: truncated at offset {len(buf)} (no config hash)")
    pos = len(MAGIC)
    tensors: dict[str, np.ndarray] = {}

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > end:
            raise CheckpointError(f"{source}: truncated at offset {pos} (needed {nbytes} bytes)")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (tag,) = struct.unpack("<I", take(4))
        if tag != DTYPE_F64:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype tag {tag} at offset {pos - 4}")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = data
    return tensors, buf[end:]


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: Mapping | bytes,
                    optimizer=None) -> None:
    """``config`` is the resolved config mapping, or an already computed 32-byte hash."""
    tensors = {f"param/{k}": v for k, v in params.items()}
    if optimizer is not None:
        tensors["adam/t"] = np.array(float(optimizer.t))
        for k in params:
            tensors[f"adam_m/{k}"] = optimizer.m[k]
            tensors[f"adam_v/{k}"] = optimizer.v[k]
    digest = config if isinstance(config, bytes) else config_hash(config)
    Path(path).write_bytes(encode(tensors, digest))


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None):
    """Return ``(params, optimizer_state_or_None, config_hash)``.

    With ``expected_shapes`` every parameter is checked; all mismatches are
    reported together.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    tensors, digest = decode(path.read_bytes(), str(path))
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    if expected_shapes is not None:
        problems = []
        for name, shape in expected_shapes.items():
            if name not in params:
                problems.append(f"{name}: missing")
            elif params[name].shape != tuple(shape):
                problems.append(f"{name}: checkpoint {params[name].shape} vs model {tuple(shape)}")
        for name in params:
            if name not in expected_shapes:
                problems.append(f"{name}: not in model")
        if problems:
            raise CheckpointError(f"{path}: incompatible with model config: " + "; ".join(problems))
    state = None
    if "adam/t" in tensors:
        state = OptimizerState(
            {k: tensors[f"adam_m/{k}"] for k in params},
            {k: tensors[f"adam_v/{k}"] for k in params},
            int(tensors["adam/t"]),
        )
    return params, state, digest
