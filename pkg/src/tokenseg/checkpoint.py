"""Flat named-parameter checkpoint files.

Layout (little endian): magic ``C2PK``, u32 version, u32 parameter count, then
per parameter: u16 name length, UTF-8 name, u8 rank, u32 dims, float32
payload. Values are stored exactly as float32, so save/load round-trips a
float32 model bit for bit. Loading is strict: the file must carry exactly the
target module's parameter names and shapes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"C2PK"
_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt checkpoint file or a name/shape mismatch with the model."""


def save_checkpoint(model: nn.Module, path) -> None:
    params = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _MAGIC, _VERSION, len(params)))
        for name, tensor in params:
            raw = name.encode("utf-8")
            arr = tensor.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(model: nn.Module, path) -> None:
    data = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12))
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape)
        loaded[name] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")

    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(loaded))
    unexpected = sorted(set(loaded) - set(model_params))
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: parameter names do not match model "
            f"(missing {missing[:3]}, unexpected {unexpected[:3]})"
        )
    with torch.no_grad():
        for name, param in model_params.items():
            arr = loaded[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"file {tuple(arr.shape)} vs model {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr.copy()).to(param.dtype))
