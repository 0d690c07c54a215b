"""
networks.py
The three learned components: the vertex encoder (shared per-vertex MLP with
a pooled global feature), the texture encoder (conv/batchnorm/relu stack)
and the image decoder, plus message tiling and binarization.

Both encoders are residual with zero-initialized output layers, so freshly
initialized encoders return their input unchanged.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Optional

import numpy as np

from errors import DataError, ShapeError
from mesh_io import ATTR_CHANNELS, NORMAL, TEXCOORD, Mesh, Message, unit_normals
from tensor_autodiff import (
    RunningStats,
    Tensor,
    as_tensor,
    batchnorm,
    broadcast_to,
    clamp,
    concat,
    conv2d,
    matmul,
    pool,
    relu,
    sigmoid,
    sign,
)

logger = logging.getLogger(__name__)

POOL_VARIANTS = ("globalpool", "maxpool")
STRATEGIES = ("vertex_only", "texture_only", "vertex_and_texture")
MIN_TEXTURE = 16
MIN_IMAGE = 32


@dataclass
class ArchConfig:
    n_bits: int
    vertex_widths: tuple[int, ...] = (64, 128, 256)
    vertex_head_width: int = 128
    pool: str = "globalpool"
    num_vertices: Optional[int] = None
    texture_width: int = 64
    decoder_width: int = 64
    decoder_blocks: int = 7
    decoder_stride_blocks: int = 2

    def __post_init__(self) -> None:
        self.vertex_widths = tuple(self.vertex_widths)
        if self.n_bits < 1:
            raise DataError(f"n_bits must be >= 1, got {self.n_bits}")
        if self.pool not in POOL_VARIANTS:
            raise DataError(f"unknown pool variant {self.pool!r}; expected one of {POOL_VARIANTS}")
        if self.pool == "maxpool" and not self.num_vertices:
            raise DataError("the maxpool variant needs a fixed num_vertices")
        if not self.vertex_widths or min(self.vertex_widths) < 1:
            raise DataError("vertex_widths needs at least one positive width")
        if not 0 <= self.decoder_stride_blocks <= self.decoder_blocks or self.decoder_blocks < 1:
            raise DataError("decoder needs >= 1 block and at most that many strided blocks")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["vertex_widths"] = list(self.vertex_widths)
        return data


@dataclass
class NetworkParams:
    """
    Named parameter tensors in a fixed order, plus batchnorm running
    statistics keyed by layer prefix. Names start with "vertex.", "texture."
    or "decoder."; kernels end in ".kernel" / ".weight".
    """

    arch: ArchConfig
    tensors: dict[str, Tensor]
    running: dict[str, RunningStats] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise DataError(f"missing parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def with_tensors(self, updates: Mapping[str, Tensor]) -> "NetworkParams":
        """Some tensors swapped (e.g. for tape leaves), with a private copy of the running statistics."""
        merged = dict(self.tensors)
        for name, value in updates.items():
            if name not in merged:
                raise DataError(f"unknown parameter {name!r}")
            if value.shape != merged[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {merged[name].shape}")
            merged[name] = value
        return NetworkParams(self.arch, merged, copy.deepcopy(self.running))

    def with_running(self, running: Mapping[str, RunningStats]) -> "NetworkParams":
        if set(running) != set(self.running):
            raise DataError("running statistics do not match the architecture")
        return NetworkParams(self.arch, dict(self.tensors), copy.deepcopy(dict(running)))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, dict(self.tensors), copy.deepcopy(self.running))


def is_weight(name: str) -> bool:
    return name.endswith(".kernel") or name.endswith(".weight")


def param_count(params: NetworkParams, prefix: str = "") -> int:
    return sum(params[n].size for n in params.names(prefix))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _build(rng: np.random.Generator, arch: ArchConfig) -> NetworkParams:
    tensors: dict[str, Tensor] = {}
    running: dict[str, RunningStats] = {}

    def norm(prefix: str, width: int) -> None:
        tensors[f"{prefix}.gamma"] = Tensor(np.ones(width))
        tensors[f"{prefix}.beta"] = Tensor(np.zeros(width))
        running[prefix] = RunningStats.fresh(width)

    def dense(prefix: str, fan_in: int, width: int) -> None:
        tensors[f"{prefix}.weight"] = _he_uniform(rng, (fan_in, width), fan_in)
        norm(prefix, width)

    def conv(prefix: str, c_in: int, width: int) -> None:
        tensors[f"{prefix}.kernel"] = _he_uniform(rng, (3, 3, c_in, width), 9 * c_in)
        norm(prefix, width)

    # vertex encoder
    width_in = ATTR_CHANNELS + arch.n_bits
    for i, width in enumerate(arch.vertex_widths):
        dense(f"vertex.mlp{i}", width_in, width)
        width_in = width
    dense("vertex.head", arch.vertex_widths[0] + arch.vertex_widths[-1], arch.vertex_head_width)
    tensors["vertex.out.weight"] = Tensor(np.zeros((arch.vertex_head_width, ATTR_CHANNELS)))
    tensors["vertex.out.bias"] = Tensor(np.zeros(ATTR_CHANNELS))

    # texture encoder
    c_in = 3
    for i in range(4):
        conv(f"texture.pre{i}", c_in, arch.texture_width)
        c_in = arch.texture_width
    c_in += arch.n_bits
    for i in range(2):
        conv(f"texture.post{i}", c_in, arch.texture_width)
        c_in = arch.texture_width
    tensors["texture.out.kernel"] = Tensor(np.zeros((3, 3, arch.texture_width, 3)))
    tensors["texture.out.bias"] = Tensor(np.zeros(3))

    # decoder
    c_in = 3
    for i in range(arch.decoder_blocks):
        conv(f"decoder.block{i}", c_in, arch.decoder_width)
        c_in = arch.decoder_width
    tensors["decoder.fc.weight"] = _he_uniform(rng, (arch.decoder_width, arch.n_bits), arch.decoder_width)
    tensors["decoder.fc.bias"] = Tensor(np.zeros(arch.n_bits))

    return NetworkParams(arch, tensors, running)


def init_params(rng: np.random.Generator, arch: ArchConfig) -> NetworkParams:
    """
    Fan-in scaled uniform weights, batchnorm gamma = 1 / beta = 0, and
    zero-initialized encoder output layers.
    """
    params = _build(rng, arch)
    logger.info(
        "initialized networks: vertex %d, texture %d, decoder %d parameters",
        param_count(params, "vertex."),
        param_count(params, "texture."),
        param_count(params, "decoder."),
    )
    return params


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _dense_bn_relu(x: Tensor, params: NetworkParams, prefix: str, mode: str) -> Tensor:
    h = matmul(x, params[f"{prefix}.weight"])
    h = batchnorm(h, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], params.running.get(prefix), mode)
    return relu(h)


def _cbr(x: Tensor, params: NetworkParams, prefix: str, mode: str, stride: int = 1) -> Tensor:
    h = conv2d(x, params[f"{prefix}.kernel"], padding="same", stride=stride)
    h = batchnorm(h, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], params.running.get(prefix), mode)
    return relu(h)


def _bits_tensor(bits: object) -> Tensor:
    if isinstance(bits, Message):
        return Tensor(bits.bits.astype(np.float64))
    return as_tensor(bits)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def tile_message_vertices(attrs: Tensor, bits: object) -> Tensor:
    """[V, 5] attributes + n bits -> [V, 5 + n] with the bits repeated per vertex."""
    attrs = as_tensor(attrs)
    b = _bits_tensor(bits)
    block = Tensor(np.broadcast_to(b.data, (attrs.shape[0], b.size)))
    return concat([attrs, block], axis=1)


def vertex_encoder_forward(params: NetworkParams, v_in: Tensor, mode: str = "train") -> Tensor:
    """
    Shared MLP over vertices -> pooled global feature broadcast back and
    joined with the first-layer local feature -> per-vertex head -> 5-channel
    residual added to the input attributes, normals renormalized and
    texcoords clamped to [0, 1].
    Batchnorm statistics are taken over the vertices of the one mesh.
    """
    arch = params.arch
    v_in = as_tensor(v_in)
    expected = ATTR_CHANNELS + arch.n_bits
    if v_in.ndim != 2 or v_in.shape[1] != expected:
        raise ShapeError(f"vertex encoder expects [V, {expected}] input, got {v_in.shape}")
    n_vertices = v_in.shape[0]

    x = v_in
    local = None
    for i in range(len(arch.vertex_widths)):
        x = _dense_bn_relu(x, params, f"vertex.mlp{i}", mode)
        if i == 0:
            local = x
    if arch.pool == "maxpool":
        if n_vertices != arch.num_vertices:
            raise ShapeError(f"maxpool vertex encoder is built for {arch.num_vertices} vertices, got {n_vertices}")
        pooled = pool(x, "max_window", window=(n_vertices, 1), stride=1)
    else:
        pooled = pool(x, "global_mean").reshape(1, -1)
    global_feature = broadcast_to(pooled, (n_vertices, pooled.shape[1]))
    h = concat([local, global_feature], axis=1)  # type: ignore[list-item]
    h = _dense_bn_relu(h, params, "vertex.head", mode)
    delta = matmul(h, params["vertex.out.weight"]) + params["vertex.out.bias"]
    out = unit_normals(v_in[:, :ATTR_CHANNELS] + delta)
    return concat([out[:, NORMAL], clamp(out[:, TEXCOORD], 0.0, 1.0)], axis=1)


def texture_encoder_forward(params: NetworkParams, texture: Tensor, bits: object, mode: str = "train") -> Tensor:
    """4 CBR -> concat tiled bits -> 2 CBR -> 3-channel residual; output clamped to [0, 1]."""
    texture = as_tensor(texture)
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise ShapeError(f"texture must be [H, W, 3], got {texture.shape}")
    h, w = texture.shape[:2]
    if h < MIN_TEXTURE or w < MIN_TEXTURE:
        raise DataError(f"texture encoder needs at least {MIN_TEXTURE}x{MIN_TEXTURE}, got {h}x{w}")
    b = _bits_tensor(bits)
    if b.size != params.arch.n_bits:
        raise ShapeError(f"message has {b.size} bits, network expects {params.arch.n_bits}")

    x = texture
    for i in range(4):
        x = _cbr(x, params, f"texture.pre{i}", mode)
    x = concat([x, Tensor(np.broadcast_to(b.data, (h, w, b.size)))], axis=2)
    for i in range(2):
        x = _cbr(x, params, f"texture.post{i}", mode)
    delta = conv2d(x, params["texture.out.kernel"], padding="same") + params["texture.out.bias"]
    return clamp(texture + delta, 0.0, 1.0)


def decoder_forward(params: NetworkParams, image: Tensor, mode: str = "train") -> Tensor:
    """
    CBR stack (the last `decoder_stride_blocks` at stride 2) -> global mean
    pool -> fully connected -> sigmoid. [H, W, 3] gives [n_bits]; [n, H, W, 3]
    gives [n, n_bits].
    """
    arch = params.arch
    image = as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-1] != 3:
        raise ShapeError(f"decoder expects [H, W, 3] or [n, H, W, 3], got {image.shape}")
    h, w = image.shape[-3], image.shape[-2]
    if h < MIN_IMAGE or w < MIN_IMAGE:
        raise DataError(f"decoder needs images of at least {MIN_IMAGE}x{MIN_IMAGE}, got {h}x{w}")
    first_strided = arch.decoder_blocks - arch.decoder_stride_blocks
    x = image
    for i in range(arch.decoder_blocks):
        x = _cbr(x, params, f"decoder.block{i}", mode, stride=2 if i >= first_strided else 1)
    features = pool(x, "global_mean")
    single = image.ndim == 3
    if single:
        features = features.reshape(1, -1)
    logits = matmul(features, params["decoder.fc.weight"]) + params["decoder.fc.bias"]
    out = sigmoid(logits)
    return out.reshape(-1) if single else out


def binarize(soft: Tensor) -> Tensor:
    """clamp(sign(x - 0.5), 0, 1): 0.5 itself maps to 0."""
    return clamp(sign(as_tensor(soft) - 0.5), 0.0, 1.0)


def encode_mesh(params: NetworkParams, mesh: Mesh, message: Message, strategy: str, mode: str = "train") -> Mesh:
    """
    Watermark a mesh. Encoders outside `strategy` are skipped: their part of
    the mesh passes through (attributes with renormalized normals).
    """
    if strategy not in STRATEGIES:
        raise DataError(f"unknown embedding strategy {strategy!r}; expected one of {STRATEGIES}")
    if message.n_bits != params.arch.n_bits:
        raise DataError(f"message has {message.n_bits} bits, network expects {params.arch.n_bits}")
    if strategy in ("vertex_only", "vertex_and_texture"):
        attributes = vertex_encoder_forward(params, tile_message_vertices(mesh.attributes, message), mode)
    else:
        attributes = unit_normals(mesh.attributes)
    texture = mesh.texture
    if strategy in ("texture_only", "vertex_and_texture"):
        texture = texture_encoder_forward(params, mesh.texture, message, mode)
    return mesh.replace(attributes=attributes, texture=texture)


def strategy_prefixes(strategy: str) -> tuple[str, ...]:
    """Parameter groups that receive gradients under an embedding strategy."""
    if strategy == "vertex_only":
        return ("vertex.", "decoder.")
    if strategy == "texture_only":
        return ("texture.", "decoder.")
    if strategy == "vertex_and_texture":
        return ("vertex.", "texture.", "decoder.")
    raise DataError(f"unknown embedding strategy {strategy!r}; expected one of {STRATEGIES}")


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    return {name: t.shape for name, t in _build(np.random.default_rng(0), arch).tensors.items()}
