"""
checkpoint.py
Network checkpoints.

File layout:
    b"MMCK"                      magic
    u32 little-endian            header length in bytes
    JSON header (sorted keys)    {"version", "arch", "step", "meta",
                                  "tensors": [{"name", "shape", "offset", "nbytes"}]}
    raw data                     little-endian float32 per tensor, at header offsets

Tensors are written in sorted name order. Batchnorm running statistics are
stored as "<layer>.running_mean" / "<layer>.running_var".
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np

from errors import DataError
from mesh_io import PathLike
from networks import ArchConfig, NetworkParams, param_shapes
from tensor_autodiff import RunningStats, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"MMCK"
VERSION = 1
_DTYPE = np.dtype("<f4")


def _collect(params: NetworkParams) -> dict[str, np.ndarray]:
    arrays = {name: params[name].data for name in params}
    for prefix, stats in params.running.items():
        arrays[f"{prefix}.running_mean"] = stats.mean
        arrays[f"{prefix}.running_var"] = stats.var
    return arrays


def to_bytes(params: NetworkParams, step: int = 0, meta: Optional[dict[str, Any]] = None) -> bytes:
    arrays = _collect(params)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arrays[name].shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "arch": params.arch.to_dict(),
        "step": int(step),
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(chunks)


def checkpoint_save(
    params: NetworkParams, path: PathLike, step: int = 0, meta: Optional[dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(params, step, meta))
    tmp.replace(path)
    logger.debug("saved checkpoint %s at step %d", path, step)
    return path


def read_header(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], int]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DataError(f"{source}: not a meshmark checkpoint (bad magic)")
    (length,) = struct.unpack("<I", blob[4:8])
    if 8 + length > len(blob):
        raise DataError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(blob[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt checkpoint header ({exc})") from exc
    for key in ("version", "arch", "step", "tensors"):
        if key not in header:
            raise DataError(f"{source}: checkpoint header lacks {key!r}")
    if header["version"] != VERSION:
        raise DataError(f"{source}: checkpoint version {header['version']} unsupported (expected {VERSION})")
    return header, 8 + length


def from_bytes(
    blob: bytes, expected: Optional[ArchConfig] = None, source: str = "<bytes>"
) -> tuple[NetworkParams, dict[str, Any]]:
    header, data_start = read_header(blob, source)
    try:
        arch = ArchConfig(**header["arch"])
    except TypeError as exc:
        raise DataError(f"{source}: bad architecture in header ({exc})") from exc
    if expected is not None:
        if arch.n_bits != expected.n_bits:
            raise DataError(f"{source}: checkpoint embeds {arch.n_bits}-bit messages, expected {expected.n_bits}")
        if arch.to_dict() != expected.to_dict():
            raise DataError(f"{source}: checkpoint architecture {arch.to_dict()} differs from {expected.to_dict()}")

    shapes = param_shapes(arch)
    payload = blob[data_start:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != count * _DTYPE.itemsize or entry["offset"] + entry["nbytes"] > len(payload):
            raise DataError(f"{source}: tensor {name} has inconsistent size or offset")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape)

    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise DataError(f"{source}: checkpoint lacks parameter {name}")
        if arrays[name].shape != shape:
            raise DataError(f"{source}: {name} has shape {arrays[name].shape}, architecture expects {shape}")
        tensors[name] = Tensor(arrays[name])

    running = {}
    for name in shapes:
        if not name.endswith(".gamma"):
            continue
        prefix = name[: -len(".gamma")]
        try:
            mean = arrays[f"{prefix}.running_mean"]
            var = arrays[f"{prefix}.running_var"]
        except KeyError:
            raise DataError(f"{source}: checkpoint lacks running statistics for {prefix}") from None
        running[prefix] = RunningStats(mean, var)

    return NetworkParams(arch, tensors, running), header


def checkpoint_load(
    path: PathLike, expected: Optional[ArchConfig] = None
) -> tuple[NetworkParams, dict[str, Any]]:
    """Return (params, header); `header["step"]` and `header["meta"]` carry training state."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such checkpoint")
    params, header = from_bytes(path.read_bytes(), expected, str(path))
    logger.debug("loaded checkpoint %s (step %d, %d tensors)", path, header["step"], len(params))
    return params, header
