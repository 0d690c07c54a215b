"""
config.py
Training configuration: a tree of dataclasses loaded from JSON.

Schema errors name the offending JSON path, e.g.
    $.render.camera_y: expected a list of 2 values, got 3

Only `n_bits` and `steps` are required; everything else has a default.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from distortion import TABLE_ROWS, DistortionSpec
from errors import DataError
from losses import LossWeights
from mesh_io import PathLike
from networks import STRATEGIES, ArchConfig
from optim import OptimizerConfig
from renderer import RenderConfig

logger = logging.getLogger(__name__)

PRECISIONS = ("float32", "float64")


@dataclass
class DatasetConfig:
    """
    Meshes come from `mesh_dir` (*.obj, sorted) or, when unset, from
    `primitives` procedurally generated shapes. Textures come from
    `texture_dir` (random crops) or Gaussian-smoothed noise.
    """

    mesh_dir: Optional[str] = None
    texture_dir: Optional[str] = None
    primitives: int = 8
    texture_size: int = 128
    noise_blur: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mesh_dir is None and self.primitives < 1:
            raise DataError("need mesh_dir or at least one primitive")
        if self.texture_size < 16:
            raise DataError(f"texture_size must be >= 16, got {self.texture_size}")
        if self.noise_blur < 0:
            raise DataError("noise_blur must be >= 0")


@dataclass
class TrainConfig:
    n_bits: int
    steps: int
    batch_size: int = 4
    strategy: str = "vertex_and_texture"
    seed: int = 0
    precision: str = "float32"
    log_every: int = 10
    checkpoint_every: int = 0
    eval_meshes: int = 100
    eval_views: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: Optional[ArchConfig] = None
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    distortions: list[DistortionSpec] = field(default_factory=lambda: list(TABLE_ROWS))

    def __post_init__(self) -> None:
        if self.n_bits < 1:
            raise DataError(f"n_bits must be >= 1, got {self.n_bits}")
        if self.steps < 0:
            raise DataError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.strategy not in STRATEGIES:
            raise DataError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.precision not in PRECISIONS:
            raise DataError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.eval_meshes < 1 or self.eval_views < 1:
            raise DataError("eval_meshes and eval_views must be >= 1")
        if self.log_every < 1:
            raise DataError("log_every must be >= 1")
        if self.arch is None:
            self.arch = ArchConfig(n_bits=self.n_bits)
        elif self.arch.n_bits != self.n_bits:
            raise DataError(f"arch.n_bits={self.arch.n_bits} disagrees with n_bits={self.n_bits}")
        if not self.distortions:
            self.distortions = [DistortionSpec("none")]

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# Typed JSON walker
# ---------------------------------------------------------------------------


def _describe(value: Any) -> str:
    return json.dumps(value) if isinstance(value, (str, int, float, bool, type(None))) else type(value).__name__


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise DataError(f"{path}: expected true/false, got {_describe(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataError(f"{path}: expected an integer, got {_describe(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise DataError(f"{path}: expected a number, got {_describe(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise DataError(f"{path}: expected a string, got {_describe(value)}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise DataError(f"{path}: expected a list, got {_describe(value)}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise DataError(f"{path}: expected a list of {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        if not isinstance(value, list):
            raise DataError(f"{path}: expected a list, got {_describe(value)}")
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise DataError(f"{path}: unsupported field type {tp!r}")


def _build(cls: type, data: Any, path: str, extra: Optional[dict[str, Any]] = None) -> Any:
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected an object, got {_describe(data)}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise DataError(f"{path}.{key}: unknown field")
    kwargs: dict[str, Any] = dict(extra or {})
    for name, f in fields.items():
        if name in kwargs:
            continue
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise DataError(f"{path}.{name}: missing required field")
            continue
        kwargs[name] = _convert(hints[name], data[name], f"{path}.{name}")
    try:
        return cls(**kwargs)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def config_from_dict(data: Any) -> TrainConfig:
    if not isinstance(data, dict):
        raise DataError(f"$: expected an object, got {_describe(data)}")
    data = dict(data)
    for name in ("n_bits", "steps"):
        if name not in data:
            raise DataError(f"$.{name}: missing required field")
    n_bits = _convert(int, data["n_bits"], "$.n_bits")
    arch_data = data.pop("arch", None)
    arch = None
    if arch_data is not None:
        if not isinstance(arch_data, dict):
            raise DataError(f"$.arch: expected an object, got {_describe(arch_data)}")
        if "n_bits" in arch_data and arch_data["n_bits"] != n_bits:
            raise DataError(f"$.arch.n_bits: {arch_data['n_bits']} disagrees with $.n_bits={n_bits}")
        arch_data = {k: v for k, v in arch_data.items() if k != "n_bits"}
        arch = _build(ArchConfig, arch_data, "$.arch", extra={"n_bits": n_bits})
    return _build(TrainConfig, data, "$", extra={"arch": arch} if arch is not None else None)


def load_config(path: PathLike) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such config file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    config = config_from_dict(data)
    logger.debug("loaded config %s", path)
    return config


def save_config(config: TrainConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def desk_preset(n_bits: int = 4, steps: int = 3000, seed: int = 0) -> TrainConfig:
    """
    Toy scale that trains on a desktop CPU: 8 procedural meshes with 32x32
    noise textures, 96x64 renders, texture-only embedding, 8 meshes x 8 views
    for evaluation.
    """
    return TrainConfig(
        n_bits=n_bits,
        steps=steps,
        batch_size=4,
        strategy="texture_only",
        seed=seed,
        log_every=50,
        checkpoint_every=500,
        eval_meshes=8,
        eval_views=8,
        dataset=DatasetConfig(primitives=8, texture_size=32, noise_blur=1.0, seed=seed),
        render=RenderConfig(height=64, width=96),
    )
