"""
renderer.py
Differentiable deferred renderer: project -> rasterize -> interpolate ->
texture lookup -> Phong shading -> splat.

Rasterization (which triangle covers which pixel) is computed in plain numpy
and is not differentiated. Every later stage is written with tensor_autodiff
ops, so image gradients reach vertex attributes, positions, texture texels,
material and light colors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from errors import DataError
from mesh_io import NORMAL, TEXCOORD, Mesh
from tensor_autodiff import (
    ArrayLike,
    Tensor,
    as_tensor,
    clamp,
    concat,
    div,
    exp,
    getitem,
    matmul,
    pad,
    power,
    relu,
    sqrt,
    sum_,
    take,
    zeros,
)

logger = logging.getLogger(__name__)


@dataclass
class RenderConfig:
    """Render size, camera/light sampling ranges, Phong constants and splat kernel."""

    height: int = 400
    width: int = 600
    fov_y: float = 60.0
    near: float = 0.1
    far: float = 100.0
    camera_x: tuple[float, float] = (0.0, 0.0)
    camera_y: tuple[float, float] = (-3.0, -2.0)
    camera_z: tuple[float, float] = (2.0, 4.0)
    camera_up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    light_mean: tuple[float, float, float] = (2.0, 1.0, 2.0)
    light_sigma: float = 0.2
    light_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    attenuation: tuple[float, float, float] = (1.0, 0.07, 0.017)
    n_lights: int = 1
    k_a: float = 0.8
    k_d: float = 1.4
    k_r: float = 0.0
    splat_radius: int = 1
    splat_sigma: float = 0.5

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise DataError(f"render size must be positive, got {self.height}x{self.width}")
        if not 0 < self.near < self.far:
            raise DataError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if not 0 < self.fov_y < 180:
            raise DataError(f"fov_y must be in (0, 180) degrees, got {self.fov_y}")
        if self.splat_radius < 0 or self.splat_sigma <= 0:
            raise DataError("splat radius must be >= 0 and sigma > 0")
        if self.n_lights < 1:
            raise DataError("need at least one light")
        if self.attenuation[0] <= 0:
            raise DataError("constant attenuation term must be positive")

    @property
    def aspect(self) -> float:
        return self.width / self.height


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = 60.0
    aspect: float = 1.5
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        forward = self.look_at - self.position
        if np.linalg.norm(forward) < 1e-6:
            raise DataError("camera position and look-at point coincide")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-6 * np.linalg.norm(forward):
            raise DataError("camera up vector is parallel to the view direction")
        if not 0 < self.near < self.far:
            raise DataError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    def view_matrix(self) -> np.ndarray:
        """World -> eye transform, gluLookAt style (camera looks down -z)."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        side = np.cross(forward, self.up)
        side = side / np.linalg.norm(side)
        cam_up = np.cross(side, forward)
        rotation = np.eye(4)
        rotation[0, :3] = side
        rotation[1, :3] = cam_up
        rotation[2, :3] = -forward
        translation = np.eye(4)
        translation[:3, 3] = -self.position
        return rotation @ translation

    def projection_matrix(self) -> np.ndarray:
        """OpenGL perspective matrix; clip z in [-w, w] between near and far."""
        f = 1.0 / math.tan(math.radians(self.fov_y) / 2.0)
        depth = self.far - self.near
        return np.array(
            [
                [f / self.aspect, 0.0, 0.0, 0.0],
                [0.0, f, 0.0, 0.0],
                [0.0, 0.0, -(self.far + self.near) / depth, -2.0 * self.far * self.near / depth],
                [0.0, 0.0, -1.0, 0.0],
            ]
        )

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_y": self.fov_y,
            "aspect": self.aspect,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(f"bad camera description: {exc}") from exc


@dataclass
class PointLight:
    """
    `color` may be a watched Tensor so gradients w.r.t. light intensity can be taken.
    """

    position: np.ndarray
    color: ArrayLike = (1.0, 1.0, 1.0)
    attenuation: tuple[float, float, float] = (1.0, 0.07, 0.017)

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        color = self.color.data if isinstance(self.color, Tensor) else np.asarray(self.color)
        if (color < 0).any():
            raise DataError("light color components must be >= 0")
        if self.attenuation[0] <= 0:
            raise DataError("constant attenuation term K_c must be positive")

    def to_dict(self) -> dict:
        color = self.color.data if isinstance(self.color, Tensor) else np.asarray(self.color)
        return {
            "position": self.position.tolist(),
            "color": np.asarray(color, dtype=np.float64).tolist(),
            "attenuation": list(self.attenuation),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PointLight":
        data = dict(data)
        if "attenuation" in data:
            data["attenuation"] = tuple(data["attenuation"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(f"bad light description: {exc}") from exc


@dataclass
class RasterBuffers:
    """
    tri_id: int [H, W], -1 on background. bary: perspective-correct
    barycentrics [H, W, 3], zero on background. clip_pos is filled in by
    `render` with the interpolated per-pixel clip coordinates.
    """

    tri_id: np.ndarray
    bary: Tensor
    clip_pos: Optional[Tensor] = None

    @property
    def covered(self) -> np.ndarray:
        return self.tri_id >= 0

    @property
    def height(self) -> int:
        return int(self.tri_id.shape[0])

    @property
    def width(self) -> int:
        return int(self.tri_id.shape[1])


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def project_vertices(positions: Tensor, camera: Camera) -> Tensor:
    """World positions [N, 3] -> homogeneous clip coordinates [N, 4]."""
    positions = as_tensor(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DataError(f"positions must be [N, 3], got {positions.shape}")
    if positions.shape[0] and (np.abs(positions.data - camera.position).max(axis=1) == 0).any():
        raise DataError("a vertex sits exactly at the camera position")
    transform = camera.projection_matrix() @ camera.view_matrix()
    homogeneous = concat([positions, Tensor(np.ones((positions.shape[0], 1)))], axis=1)
    return matmul(homogeneous, Tensor(transform.T))


def to_screen(ndc_x: np.ndarray, ndc_y: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """NDC -> pixel coordinates with the origin at the top-left corner."""
    return (ndc_x + 1.0) * 0.5 * width, (1.0 - ndc_y) * 0.5 * height


def rasterize(clip_verts: Tensor, faces: np.ndarray, height: int, width: int) -> RasterBuffers:
    """
    Depth-tested triangle coverage at pixel centers (x + 0.5, y + 0.5).

    The smallest NDC depth wins, and on exactly equal depth the lower face
    index wins. No backface culling; faces with a vertex at w <= 0 are
    skipped, as are pixels whose depth falls outside [-1, 1].
    """
    if height < 1 or width < 1:
        raise DataError(f"raster size must be positive, got {height}x{width}")
    clip = np.asarray(as_tensor(clip_verts).data, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    zbuf = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))

    w = clip[:, 3] if len(clip) else np.zeros(0)
    safe_w = np.where(w > 0, w, 1.0)
    sx, sy = to_screen(clip[:, 0] / safe_w, clip[:, 1] / safe_w, height, width) if len(clip) else (w, w)
    sz = clip[:, 2] / safe_w if len(clip) else w

    for f, (a, b, c) in enumerate(faces):
        if w[a] <= 0 or w[b] <= 0 or w[c] <= 0:
            continue
        xs = np.array([sx[a], sx[b], sx[c]])
        ys = np.array([sy[a], sy[b], sy[c]])
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if area == 0:
            continue
        x0 = max(int(math.floor(xs.min() - 0.5)), 0)
        x1 = min(int(math.ceil(xs.max() - 0.5)), width - 1)
        y0 = max(int(math.floor(ys.min() - 0.5)), 0)
        y1 = min(int(math.ceil(ys.max() - 0.5)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        l0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)) / area
        l1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)) / area
        l2 = ((xs[0] - px) * (ys[1] - py) - (xs[1] - px) * (ys[0] - py)) / area
        depth = l0 * sz[a] + l1 * sz[b] + l2 * sz[c]
        region = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & (depth >= -1.0) & (depth <= 1.0) & (depth < region)
        if not hit.any():
            continue
        q0, q1, q2 = l0 / w[a], l1 / w[b], l2 / w[c]
        total = q0 + q1 + q2
        region[hit] = depth[hit]
        tri_id[y0 : y1 + 1, x0 : x1 + 1][hit] = f
        bary[y0 : y1 + 1, x0 : x1 + 1][hit] = np.stack([q0 / total, q1 / total, q2 / total], axis=-1)[hit]

    return RasterBuffers(tri_id=tri_id, bary=Tensor(bary))


def interpolate_attributes(attributes: Tensor, faces: np.ndarray, raster: RasterBuffers) -> Tensor:
    """Per-pixel sum of barycentric-weighted vertex values; background is 0."""
    attributes = as_tensor(attributes)
    h, w = raster.height, raster.width
    channels = attributes.shape[1]
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.shape[0] == 0:
        return zeros((h, w, channels))
    corners = faces[np.maximum(raster.tri_id, 0)].reshape(-1, 3)
    bary = raster.bary.reshape(h * w, 3)
    total = None
    for k in range(3):
        term = take(attributes, corners[:, k]) * bary[:, k : k + 1]
        total = term if total is None else total + term
    return total.reshape(h, w, channels)


def sample_texture(texture: Tensor, uv: Tensor) -> Tensor:
    """
    Bilinear lookup with wrap-around addressing. uv = (0, 1) is the top-left
    corner of the image; texel (i, j) has its center at ((j + .5) / W, 1 - (i + .5) / H).
    """
    texture, uv = as_tensor(texture), as_tensor(uv)
    th, tw = texture.shape[:2]
    lead = uv.shape[:-1]
    flat_uv = uv.reshape(-1, 2)
    x = flat_uv[:, 0:1] * tw - 0.5
    y = (1.0 - flat_uv[:, 1:2]) * th - 0.5
    x0 = np.floor(x.data).astype(np.int64)
    y0 = np.floor(y.data).astype(np.int64)
    fx = x - Tensor(x0)
    fy = y - Tensor(y0)
    texels = texture.reshape(th * tw, 3)

    def fetch(row: np.ndarray, col: np.ndarray) -> Tensor:
        return take(texels, ((row % th) * tw + (col % tw)).reshape(-1))

    top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1) * fx
    bottom = fetch(y0 + 1, x0) * (1.0 - fx) + fetch(y0 + 1, x0 + 1) * fx
    return (top * (1.0 - fy) + bottom * fy).reshape(*lead, 3)


def _normalize(v: Tensor) -> Tensor:
    sq = sum_(v * v, axis=-1, keepdims=True)
    zero = (sq.data < 1e-24).astype(sq.dtype)
    return v / sqrt(sq + Tensor(zero))


def shade_phong(
    attrs_px: Tensor,
    tex_color: Tensor,
    material: Tensor,
    lights: Union[PointLight, Sequence[PointLight]],
    camera: Camera,
    world_px: Tensor,
    coverage: np.ndarray,
    config: Optional[RenderConfig] = None,
) -> Tensor:
    """
    Per light: color * att * tex * (k_a * ambient + k_d * diffuse * max(0, n.l)),
    plus k_r * specular * color * att * max(0, r.v)^shininess when k_r != 0.
    att = 1 / (K_c + K_l d + K_q d^2). Zero-length normals shade ambient only.
    The sum over lights is masked to covered pixels and clamped to [0, 1].
    """
    config = config or RenderConfig()
    lights = [lights] if isinstance(lights, PointLight) else list(lights)
    material = as_tensor(material)
    normals = _normalize(attrs_px[..., NORMAL])
    ambient, diffuse, specular, shininess = material[0:3], material[3:6], material[6:9], material[9:10]
    view_dir = _normalize(Tensor(camera.position) - world_px) if config.k_r != 0 else None

    color: Optional[Tensor] = None
    for light in lights:
        to_light = Tensor(light.position) - world_px
        dist_sq = sum_(to_light * to_light, axis=-1, keepdims=True)
        dist = sqrt(dist_sq + 1e-12)
        direction = to_light / dist
        kc, kl, kq = light.attenuation
        att = div(1.0, kc + kl * dist + kq * dist_sq)
        intensity = as_tensor(light.color)
        n_dot_l = sum_(normals * direction, axis=-1, keepdims=True)
        term = intensity * att * tex_color * (config.k_a * ambient + config.k_d * diffuse * relu(n_dot_l))
        if view_dir is not None:
            reflect = 2.0 * n_dot_l * normals - direction
            r_dot_v = relu(sum_(reflect * view_dir, axis=-1, keepdims=True))
            term = term + config.k_r * specular * intensity * att * power(r_dot_v, shininess)
        color = term if color is None else color + term

    mask = Tensor(coverage.astype(np.float64)[..., None])
    return clamp(color * mask, 0.0, 1.0)  # type: ignore[operator]


def screen_positions(clip_px: Tensor, coverage: np.ndarray) -> tuple[Tensor, Tensor]:
    """
    Perspective-divide per-pixel clip coordinates to pixel-space (x, y).
    Uncovered pixels sit at their own pixel centers.
    """
    h, w = coverage.shape
    covered = coverage.astype(np.float64)[..., None]
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    w_safe = clip_px[..., 3:4] + Tensor(1.0 - covered)
    ndc_x = clip_px[..., 0:1] / w_safe
    ndc_y = clip_px[..., 1:2] / w_safe
    inside = Tensor(covered)
    screen_x = (ndc_x + 1.0) * (0.5 * w) * inside + Tensor((1.0 - covered) * gx[..., None])
    screen_y = (1.0 - ndc_y) * (0.5 * h) * inside + Tensor((1.0 - covered) * gy[..., None])
    return screen_x, screen_y


def splat(
    colors: Tensor,
    screen_x: Tensor,
    screen_y: Tensor,
    coverage: np.ndarray,
    radius: int = 1,
    sigma: float = 0.5,
) -> Tensor:
    """
    Each covered pixel deposits its color with a truncated Gaussian footprint
    ((2r+1)^2 taps, weights normalized per source) centered at its screen
    position. Output = accumulated color / max(accumulated weight, 1).
    """
    colors = as_tensor(colors)
    h, w = coverage.shape
    mask = Tensor(coverage.astype(np.float64)[..., None])
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    delta_x = screen_x - Tensor(gx[..., None])
    delta_y = screen_y - Tensor(gy[..., None])

    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    taps = []
    for dy, dx in offsets:
        dist_sq = (delta_x - float(dx)) ** 2 + (delta_y - float(dy)) ** 2
        taps.append(exp(dist_sq * (-0.5 / (sigma * sigma))))
    norm = taps[0]
    for tap in taps[1:]:
        norm = norm + tap
    # far-off sources underflow every tap
    norm = clamp(norm, 1e-30, None)

    widths = ((radius, radius), (radius, radius), (0, 0))
    acc_color: Optional[Tensor] = None
    acc_weight: Optional[Tensor] = None
    for (dy, dx), tap in zip(offsets, taps):
        weight = tap / norm * mask
        window = (slice(radius - dy, radius - dy + h), slice(radius - dx, radius - dx + w))
        shifted_w = getitem(pad(weight, widths), window)
        shifted_c = getitem(pad(weight * colors, widths), window)
        acc_weight = shifted_w if acc_weight is None else acc_weight + shifted_w
        acc_color = shifted_c if acc_color is None else acc_color + shifted_c
    return acc_color / clamp(acc_weight, 1.0, None)  # type: ignore[operator]


def render(
    mesh: Mesh,
    camera: Camera,
    lights: Union[PointLight, Sequence[PointLight]],
    config: Optional[RenderConfig] = None,
) -> Tensor:
    """Render a preprocessed mesh to an [H, W, 3] image in [0, 1] on a black background."""
    config = config or RenderConfig()
    h, w = config.height, config.width
    faces = mesh.visible_faces()
    if mesh.n_vertices == 0 or faces.shape[0] == 0:
        return zeros((h, w, 3))
    clip = project_vertices(mesh.positions, camera)
    raster = rasterize(clip, faces, h, w)
    coverage = raster.covered
    attrs_px = interpolate_attributes(mesh.attributes, faces, raster)
    world_px = interpolate_attributes(mesh.positions, faces, raster)
    raster.clip_pos = interpolate_attributes(clip, faces, raster)
    tex_color = sample_texture(mesh.texture, attrs_px[..., TEXCOORD])
    color = shade_phong(attrs_px, tex_color, mesh.material, lights, camera, world_px, coverage, config)
    screen_x, screen_y = screen_positions(raster.clip_pos, coverage)
    return splat(color, screen_x, screen_y, coverage, config.splat_radius, config.splat_sigma)


def sample_camera(rng: np.random.Generator, config: Optional[RenderConfig] = None) -> Camera:
    """Uniform position in the configured box, looking at the origin."""
    config = config or RenderConfig()
    position = np.array(
        [rng.uniform(*config.camera_x), rng.uniform(*config.camera_y), rng.uniform(*config.camera_z)]
    )
    return Camera(
        position=position,
        look_at=np.zeros(3),
        up=np.asarray(config.camera_up, dtype=np.float64),
        fov_y=config.fov_y,
        aspect=config.aspect,
        near=config.near,
        far=config.far,
    )


def sample_light(rng: np.random.Generator, config: Optional[RenderConfig] = None) -> PointLight:
    """Gaussian position around the configured mean."""
    config = config or RenderConfig()
    position = rng.normal(np.asarray(config.light_mean), config.light_sigma)
    return PointLight(position=position, color=config.light_color, attenuation=tuple(config.attenuation))


def sample_lights(rng: np.random.Generator, config: Optional[RenderConfig] = None) -> list[PointLight]:
    config = config or RenderConfig()
    return [sample_light(rng, config) for _ in range(config.n_lights)]
