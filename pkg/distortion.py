"""
distortion.py
Differentiable 3D distortions applied to a (watermarked) mesh before it is
rendered: additive Gaussian noise, axis-angle rotation, uniform scaling and
half-space cropping of vertices.

Randomness is drawn once into a `DistortionDraw` so the same realization can
be applied to the original and to the watermarked mesh of a training example.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from errors import DataError
from mesh_io import NORMAL, TEXCOORD, Mesh
from tensor_autodiff import Tensor, concat, matmul

logger = logging.getLogger(__name__)

KINDS = ("none", "noise", "rotation", "scaling", "cropping")


@dataclass(frozen=True)
class DistortionSpec:
    """
    kind-specific parameters: noise uses (mean, sigma); rotation uses
    max_angle (radians); scaling uses max_scale (factor in [1-s, 1+s]);
    cropping uses max_crop (largest removed fraction).
    """

    kind: str = "none"
    mean: float = 0.0
    sigma: float = 0.01
    max_angle: float = math.pi / 6
    max_scale: float = 0.25
    max_crop: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DataError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma < 0:
            raise DataError(f"noise sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.max_angle <= math.pi:
            raise DataError(f"rotation angle must be in [0, pi], got {self.max_angle}")
        if not 0 <= self.max_scale < 1:
            raise DataError(f"scaling fraction must be in [0, 1), got {self.max_scale}")
        if not 0 <= self.max_crop < 1:
            raise DataError(f"cropping fraction must be in [0, 1), got {self.max_crop}")

    @property
    def strength(self) -> float:
        return {
            "none": 0.0,
            "noise": self.sigma,
            "rotation": self.max_angle,
            "scaling": self.max_scale,
            "cropping": self.max_crop,
        }[self.kind]

    def with_strength(self, strength: float) -> "DistortionSpec":
        field_name = {"noise": "sigma", "rotation": "max_angle", "scaling": "max_scale", "cropping": "max_crop"}
        if self.kind == "none":
            return self
        return DistortionSpec(**{**self.to_dict(), field_name[self.kind]: strength})

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "noise":
            return f"noise(mean={self.mean:g}, sigma={self.sigma:g})"
        if self.kind == "rotation":
            return f"rotation(+-{self.max_angle:.4g} rad)"
        if self.kind == "scaling":
            return f"scaling(<{self.max_scale:.0%})"
        return f"cropping(<{self.max_crop:.0%})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mean": self.mean,
            "sigma": self.sigma,
            "max_angle": self.max_angle,
            "max_scale": self.max_scale,
            "max_crop": self.max_crop,
        }


# Standard robustness table rows.
TABLE_ROWS: tuple[DistortionSpec, ...] = (
    DistortionSpec("none"),
    DistortionSpec("noise", sigma=0.01),
    DistortionSpec("rotation", max_angle=math.pi / 6),
    DistortionSpec("scaling", max_scale=0.25),
    DistortionSpec("cropping", max_crop=0.2),
)

# Noise settings used for the robustness curves; the i-th mean magnitude pairs with the i-th sigma.
NOISE_MEAN_GRID: tuple[float, ...] = (0.1, 0.15, 0.2, 0.25, 0.3, 0.4)
NOISE_SIGMA_GRID: tuple[float, ...] = (0.03, 0.05, 0.06, 0.0833, 0.1, 0.133)


def noise_grid_specs() -> list[DistortionSpec]:
    specs = []
    for mu, sigma in zip(NOISE_MEAN_GRID, NOISE_SIGMA_GRID):
        specs.append(DistortionSpec("noise", mean=-mu, sigma=sigma))
        specs.append(DistortionSpec("noise", mean=mu, sigma=sigma))
    return specs


@dataclass(frozen=True)
class DistortionDraw:
    """One sampled realization of a DistortionSpec."""

    kind: str
    offsets: Optional[np.ndarray] = None  # noise: [V, 3]
    rotation: Optional[np.ndarray] = None  # 3x3
    factor: float = 1.0
    keep: Optional[np.ndarray] = None  # cropping: bool [V]


def draw(
    spec: DistortionSpec, n_vertices: int, rng: np.random.Generator, positions: Optional[np.ndarray] = None
) -> DistortionDraw:
    """Sample the random parameters of `spec`; cropping needs the vertex positions."""
    if spec.kind == "none":
        return DistortionDraw("none")
    if spec.kind == "noise":
        return DistortionDraw("noise", offsets=rng.normal(spec.mean, spec.sigma, size=(n_vertices, 3)))
    if spec.kind == "rotation":
        angle = rng.uniform(-spec.max_angle, spec.max_angle)
        axis = rng.normal(size=3)
        axis = axis / max(np.linalg.norm(axis), 1e-12)
        return DistortionDraw("rotation", rotation=Rotation.from_rotvec(axis * angle).as_matrix())
    if spec.kind == "scaling":
        return DistortionDraw("scaling", factor=float(rng.uniform(1.0 - spec.max_scale, 1.0 + spec.max_scale)))
    # cropping: drop the vertices beyond a random plane so that at most `fraction` are removed
    if positions is None:
        raise DataError("cropping needs vertex positions to place its plane")
    fraction = rng.uniform(0.0, spec.max_crop)
    direction = rng.normal(size=3)
    direction = direction / max(np.linalg.norm(direction), 1e-12)
    t = np.asarray(positions, dtype=np.float64) @ direction
    if t.size == 0:
        return DistortionDraw("cropping", keep=np.zeros(0, dtype=bool))
    threshold = np.quantile(t, 1.0 - fraction, method="higher")
    return DistortionDraw("cropping", keep=t <= threshold)


def apply_draw(mesh: Mesh, realization: DistortionDraw) -> Mesh:
    kind = realization.kind
    if kind == "none":
        return mesh
    if kind == "noise":
        if realization.offsets is None or realization.offsets.shape != (mesh.n_vertices, 3):
            raise DataError("noise offsets do not match the mesh vertex count")
        return mesh.replace(positions=mesh.positions + Tensor(realization.offsets))
    if kind == "rotation":
        rot_t = Tensor(np.asarray(realization.rotation).T)
        attrs = mesh.attributes
        normals = matmul(attrs[:, NORMAL], rot_t)
        return mesh.replace(
            positions=matmul(mesh.positions, rot_t),
            attributes=concat([normals, attrs[:, TEXCOORD]], axis=1),
        )
    if kind == "scaling":
        return mesh.replace(positions=mesh.positions * realization.factor)
    if kind == "cropping":
        keep = realization.keep
        if keep is None or keep.shape != (mesh.n_vertices,):
            raise DataError("cropping mask does not match the mesh vertex count")
        if mesh.vertex_mask is not None:
            keep = keep & mesh.vertex_mask
        return mesh.replace(vertex_mask=keep)
    raise DataError(f"unknown distortion kind {kind!r}")


def apply(mesh: Mesh, spec: DistortionSpec, rng: np.random.Generator) -> Mesh:
    """Draw and apply in one go; kind "none" returns `mesh` itself."""
    if spec.kind == "none":
        return mesh
    return apply_draw(mesh, draw(spec, mesh.n_vertices, rng, mesh.positions.data))


def sweep(
    mesh: Mesh, spec: DistortionSpec, strengths: Sequence[float], seed: Union[int, Sequence[int]] = 0
) -> list[Mesh]:
    """
    One distorted copy per strength. The i-th strength always uses the i-th
    seed of `seed`, so curves are comparable across checkpoints. Strength 0
    returns the mesh unchanged.
    """
    if any(b < a for a, b in zip(strengths, strengths[1:])):
        raise DataError("sweep strengths must be sorted ascending")
    out = []
    for i, strength in enumerate(strengths):
        if strength == 0 or spec.kind == "none":
            out.append(mesh)
            continue
        entropy = [seed] if isinstance(seed, int) else list(seed)
        rng = np.random.default_rng([*entropy, i])
        out.append(apply(mesh, spec.with_strength(strength), rng))
    return out
