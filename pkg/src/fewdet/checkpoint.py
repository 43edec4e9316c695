"""Named-tensor container and model checkpoints.

Container layout (all integers little-endian):
  magic "FDNT" | u32 format version | u32 tensor count
  per tensor: u32 name length | UTF-8 name | u32 rank | u64 x rank extents |
              float64 LE values in row-major order

A checkpoint wraps one container together with a JSON config record:
  magic "FDCK" | u32 version | u32 json length | JSON bytes | container
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import CorruptionError
from .tensor import Tensor

_TENSOR_MAGIC = b"FDNT"
_CHECKPOINT_MAGIC = b"FDCK"
_VERSION = 1


def _write_container(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(_TENSOR_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.tobytes())


def _read_container(buf) -> dict[str, np.ndarray]:
    def read(n: int, what: str) -> bytes:
        raw = buf.read(n)
        if len(raw) != n:
            raise CorruptionError(f"tensor container truncated while reading {what}")
        return raw

    if read(4, "magic") != _TENSOR_MAGIC:
        raise CorruptionError("not a tensor container (bad magic)")
    version, count = struct.unpack("<II", read(8, "header"))
    if version != _VERSION:
        raise CorruptionError(f"unsupported tensor container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4, "name length"))
        if name_len > 1 << 20:
            raise CorruptionError(f"implausible tensor name length {name_len}")
        name = read(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", read(4, "rank"))
        if rank > 32:
            raise CorruptionError(f"implausible tensor rank {rank} for '{name}'")
        extents = [struct.unpack("<Q", read(8, "extent"))[0] for _ in range(rank)]
        n_values = int(np.prod(extents)) if extents else 1
        if n_values > 1 << 28:
            raise CorruptionError(f"implausible tensor size for '{name}'")
        raw = read(8 * n_values, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(extents).copy()
    return tensors


def save_tensors(path, tensors: dict[str, "np.ndarray | Tensor"]) -> None:
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v))
              for k, v in tensors.items()}
    buf = io.BytesIO()
    _write_container(buf, arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            return _read_container(fh)
    except OSError as exc:
        raise CorruptionError(f"cannot read tensor container {path}: {exc}") from exc


def save_checkpoint(path, config: dict, tensors: dict[str, "np.ndarray | Tensor"]) -> None:
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v))
              for k, v in tensors.items()}
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(payload)))
        fh.write(payload)
        buf = io.BytesIO()
        _write_container(buf, arrays)
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _CHECKPOINT_MAGIC:
                raise CorruptionError(f"{path}: not a checkpoint (bad magic {magic!r})")
            header = fh.read(8)
            if len(header) != 8:
                raise CorruptionError(f"{path}: truncated checkpoint header")
            version, json_len = struct.unpack("<II", header)
            if version != _VERSION:
                raise CorruptionError(f"{path}: unsupported checkpoint version {version}")
            raw = fh.read(json_len)
            if len(raw) != json_len:
                raise CorruptionError(f"{path}: truncated config record")
            try:
                config = json.loads(raw.decode("utf-8"))
            except ValueError as exc:
                raise CorruptionError(f"{path}: unreadable config record") from exc
            tensors = _read_container(fh)
            return config, tensors
    except OSError as exc:
        raise CorruptionError(f"cannot read checkpoint {path}: {exc}") from exc
