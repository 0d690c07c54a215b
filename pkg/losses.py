"""
losses.py
Training objectives: vertex, texture, image, message and weight
regularization losses, and their weighted total.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

from errors import DataError, ShapeError
from mesh_io import ATTR_CHANNELS, NORMAL, TEXCOORD
from networks import NetworkParams, is_weight
from tensor_autodiff import Tensor, abs_, as_tensor, mean, sum_

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    vertex: float = 2.0
    texture: float = 1.0
    image: float = 1.0
    message: float = 1.0  # usually in [0.1, 2.0]
    reg: float = 0.01
    normal: float = 1.0
    texcoord: float = 1.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise DataError(f"loss weight {name} must be >= 0, got {value}")
        if not 0.1 <= self.message <= 2.0:
            logger.debug("message weight %.3g outside the usual [0.1, 2.0] range", self.message)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossParts:
    vertex: Tensor
    texture: Tensor
    image: Tensor
    message: Tensor
    reg: Tensor

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in ("vertex", "texture", "image", "message", "reg")}


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def vertex_loss(v: Tensor, v_marked: Tensor, weights: Optional[LossWeights] = None) -> Tensor:
    """
    Weighted L1 over the normal and texcoord columns. Each column group is
    summed and divided by (vertices * 5), then scaled by its weight.
    """
    weights = weights or LossWeights()
    v, v_marked = as_tensor(v), as_tensor(v_marked)
    _same_shape("vertex_loss", v, v_marked)
    if v.ndim != 2 or v.shape[1] != ATTR_CHANNELS:
        raise ShapeError(f"vertex_loss expects [V, {ATTR_CHANNELS}] attributes, got {v.shape}")
    scale = 1.0 / (v.shape[0] * ATTR_CHANNELS)
    diff = abs_(v - v_marked)
    normal_term = sum_(diff[:, NORMAL]) * (weights.normal * scale)
    texcoord_term = sum_(diff[:, TEXCOORD]) * (weights.texcoord * scale)
    return normal_term + texcoord_term


def texture_loss(t: Tensor, t_marked: Tensor) -> Tensor:
    t, t_marked = as_tensor(t), as_tensor(t_marked)
    _same_shape("texture_loss", t, t_marked)
    return mean(abs_(t - t_marked))


def image_loss(original: Tensor, marked: Tensor) -> Tensor:
    original, marked = as_tensor(original), as_tensor(marked)
    _same_shape("image_loss", original, marked)
    return mean(abs_(original - marked))


def message_loss(m: Tensor, soft: Tensor) -> Tensor:
    """Mean absolute error between the true bits and the real-valued decoder output."""
    m, soft = as_tensor(m), as_tensor(soft)
    if m.shape != soft.shape:
        raise ShapeError(f"message_loss: lengths {m.shape} and {soft.shape} differ")
    return mean(abs_(m - soft))


def reg_loss(params: NetworkParams, prefixes: tuple[str, ...] = ("",)) -> Tensor:
    """Sum of squares over kernels/weights only (no batchnorm gamma/beta, no biases)."""
    total: Optional[Tensor] = None
    for name in params:
        if not is_weight(name) or not name.startswith(prefixes):
            continue
        w = params[name]
        term = sum_(w * w)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    return (
        parts.vertex * weights.vertex
        + parts.texture * weights.texture
        + parts.image * weights.image
        + parts.message * weights.message
        + parts.reg * weights.reg
    )
