"""
mesh_io.py
Mesh / texture / message data model, OBJ + MTL + PNG input and output, and the
preprocessing passes applied before watermarking: position normalization,
vertex normals, spherical texture coordinates and noise textures.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from asset_cache import AssetCache
from errors import DataError, UsageError
from tensor_autodiff import Tensor, as_tensor, concat, sqrt, sum_

logger = logging.getLogger(__name__)

ATTR_CHANNELS = 5
NORMAL = slice(0, 3)
TEXCOORD = slice(3, 5)
UV_TOLERANCE = 1e-6
DEFAULT_TEXTURE_SIZE = 128
# ambient RGB, diffuse RGB, specular RGB, shininess
DEFAULT_MATERIAL = (0.3, 0.3, 0.3, 0.6, 0.6, 0.6, 0.2, 0.2, 0.2, 10.0)
PathLike = Union[str, Path]

_textures = AssetCache(capacity=64)


@dataclass(frozen=True)
class Mesh:
    """
    positions [V, 3]; attributes [V, 5] = normal xyz + texcoord uv;
    faces [N_f, 3] int; texture [H_t, W_t, 3] in [0, 1]; material [10].

    `vertex_mask` (bool [V], True = kept) is set by cropping; faces touching
    a masked vertex are not rasterized.
    """

    positions: Tensor
    attributes: Tensor
    faces: np.ndarray
    texture: Tensor
    material: Tensor
    vertex_mask: Optional[np.ndarray] = None
    name: str = ""
    has_normals: bool = True
    has_texcoords: bool = True
    has_texture: bool = True

    @property
    def n_vertices(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def replace(self, **changes: object) -> "Mesh":
        return dataclasses.replace(self, **changes)

    def visible_faces(self) -> np.ndarray:
        if self.vertex_mask is None or self.n_faces == 0:
            return self.faces
        keep = self.vertex_mask[self.faces].all(axis=1)
        return self.faces[keep]


@dataclass(frozen=True)
class Message:
    """A binary payload plus, after decoding, its real-valued estimate and binarization."""

    bits: np.ndarray
    decoded: Optional[np.ndarray] = field(default=None, compare=False)
    binarized: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size == 0:
            raise DataError("a message needs at least one bit")
        if not np.isin(bits, (0, 1)).all():
            raise DataError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def n_bits(self) -> int:
        return int(self.bits.size)

    @classmethod
    def random(cls, rng: np.random.Generator, n_bits: int) -> "Message":
        return cls(rng.integers(0, 2, size=n_bits))

    @classmethod
    def from_hex(cls, text: str, n_bits: int) -> "Message":
        """
        Parse a hex string, most-significant bit first. The string must have
        exactly ceil(n_bits / 4) digits and any leading pad bits must be zero.
        """
        digits = text.lower().removeprefix("0x")
        if len(digits) != -(-n_bits // 4):
            raise UsageError(f"message {text!r} has {len(digits) * 4} bits, expected {n_bits}")
        try:
            value = int(digits, 16)
        except ValueError as exc:
            raise UsageError(f"message {text!r} is not a hex string") from exc
        if value >> n_bits:
            raise UsageError(f"message {text!r} does not fit in {n_bits} bits")
        return cls(np.array([(value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)]))

    def to_hex(self, bits: Optional[np.ndarray] = None) -> str:
        bits = self.bits if bits is None else np.asarray(bits)
        value = 0
        for b in bits:
            value = (value << 1) | int(b)
        return format(value, f"0{-(-bits.size // 4)}x")

    def digest(self) -> str:
        return hashlib.sha256(self.bits.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def load_png(path: PathLike) -> Tensor:
    """Decode an 8-bit RGB(A) PNG to a [H, W, 3] tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such image")
    key = (str(path.resolve()), path.stat().st_mtime_ns)
    return _textures.get_or_load(key, lambda: _decode_png(path))


def _decode_png(path: Path) -> Tensor:
    try:
        with Image.open(path) as img:
            if img.mode == "RGBA":
                logger.debug("%s: dropping alpha channel", path)
                img = img.convert("RGB")
            if img.mode != "RGB":
                raise DataError(f"{path}: texture mode {img.mode} is not RGB")
            data = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as exc:
        # UnidentifiedImageError and truncated data both land here
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return Tensor(data)


def to_uint8(image: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return np.clip(np.floor(data * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(image: Union[Tensor, np.ndarray], path: PathLike) -> Path:
    """Write [H, W, 3] values in [0, 1] as 8-bit RGB, rounding half up."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


# ---------------------------------------------------------------------------
# OBJ / MTL
# ---------------------------------------------------------------------------


def _floats(values: Sequence[str], count: int) -> list[float]:
    if len(values) < count:
        raise ValueError(f"expected {count} numbers")
    return [float(v) for v in values[:count]]


def _resolve(token: str, count: int) -> int:
    index = int(token)
    if index == 0:
        raise ValueError("OBJ indices are 1-based")
    if index < 0 and -index > count:
        raise ValueError(f"relative index {index} reaches before the first element")
    return index - 1 if index > 0 else count + index


def _parse_mtl(path: Path) -> tuple[list[float], Optional[Path]]:
    material = list(DEFAULT_MATERIAL)
    texture_path = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "Ka":
                material[0:3] = _floats(rest, 3)
            elif tag == "Kd":
                material[3:6] = _floats(rest, 3)
            elif tag == "Ks":
                material[6:9] = _floats(rest, 3)
            elif tag == "Ns":
                material[9] = _floats(rest, 1)[0]
            elif tag == "map_Kd":
                texture_path = path.parent / rest[-1]
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: malformed {tag!r} line") from exc
    return material, texture_path


def load_obj(path: PathLike, load_texture: bool = True) -> Mesh:
    """
    Read a Wavefront OBJ. Quads and larger polygons are fan-triangulated.
    Normals / texcoords missing from the file are zero-filled and flagged so
    `preprocess` can compute them.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such OBJ file")
    positions: list[list[float]] = []
    normals: list[list[float]] = []
    texcoords: list[list[float]] = []
    corners: list[tuple[tuple[int, int, int], int]] = []  # (v, vt, vn) per corner + line
    faces: list[tuple[int, int, int, int]] = []  # corner ids + line
    mtllib: Optional[Path] = None

    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                positions.append(_floats(rest, 3))
            elif tag == "vn":
                normals.append(_floats(rest, 3))
            elif tag == "vt":
                texcoords.append(_floats(rest, 2))
            elif tag == "f":
                if len(rest) < 3:
                    raise ValueError("a face needs at least 3 corners")
                ids = []
                for token in rest:
                    parts = token.split("/")
                    v = _resolve(parts[0], len(positions))
                    vt = _resolve(parts[1], len(texcoords)) if len(parts) > 1 and parts[1] else -1
                    vn = _resolve(parts[2], len(normals)) if len(parts) > 2 and parts[2] else -1
                    corners.append(((v, vt, vn), lineno))
                    ids.append(len(corners) - 1)
                for k in range(1, len(ids) - 1):
                    faces.append((ids[0], ids[k], ids[k + 1], lineno))
            elif tag == "mtllib" and rest:
                mtllib = path.parent / rest[0]
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: malformed {tag!r} line: {raw.strip()!r} ({exc})") from exc

    for (v, vt, vn), lineno in corners:
        if not 0 <= v < len(positions):
            raise DataError(f"{path}:{lineno}: vertex index {v + 1} out of range (file has {len(positions)})")
        if vt >= len(texcoords) or vt < -1:
            raise DataError(f"{path}:{lineno}: texcoord index {vt + 1} out of range")
        if vn >= len(normals) or vn < -1:
            raise DataError(f"{path}:{lineno}: normal index {vn + 1} out of range")

    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    nrm_src = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    uv_src = np.asarray(texcoords, dtype=np.float64).reshape(-1, 2)
    has_normals = any(c[0][2] >= 0 for c in corners)
    has_texcoords = any(c[0][1] >= 0 for c in corners)

    if has_normals or has_texcoords:
        # split vertices so every (v, vt, vn) combination gets its own attributes
        unique: dict[tuple[int, int, int], int] = {}
        corner_vertex = []
        for key, _ in corners:
            corner_vertex.append(unique.setdefault(key, len(unique)))
        keys = list(unique)
        out_pos = pos[[k[0] for k in keys]] if keys else np.zeros((0, 3))
        attrs = np.zeros((len(keys), ATTR_CHANNELS))
        for i, (_, vt, vn) in enumerate(keys):
            if vn >= 0:
                attrs[i, NORMAL] = nrm_src[vn]
            if vt >= 0:
                attrs[i, TEXCOORD] = uv_src[vt]
        source_index = [k[0] for k in keys]
    else:
        corner_vertex = [key[0] for key, _ in corners]
        out_pos = pos
        attrs = np.zeros((len(pos), ATTR_CHANNELS))
        source_index = list(range(len(pos)))

    tri = []
    for a, b, c, lineno in faces:
        va, vb, vc = corner_vertex[a], corner_vertex[b], corner_vertex[c]
        if len({source_index[va], source_index[vb], source_index[vc]}) < 3:
            logger.warning("%s:%d: dropping degenerate face", path, lineno)
            continue
        tri.append((va, vb, vc))

    material = list(DEFAULT_MATERIAL)
    texture: Optional[Tensor] = None
    if mtllib is not None:
        if mtllib.is_file():
            material, texture_path = _parse_mtl(mtllib)
            if load_texture and texture_path is not None:
                texture = load_png(texture_path)
        else:
            logger.warning("%s: material library %s not found", path, mtllib)

    return Mesh(
        positions=Tensor(out_pos),
        attributes=Tensor(attrs),
        faces=np.asarray(tri, dtype=np.int64).reshape(-1, 3),
        texture=texture if texture is not None else Tensor(np.ones((DEFAULT_TEXTURE_SIZE, DEFAULT_TEXTURE_SIZE, 3))),
        material=Tensor(material),
        name=path.stem,
        has_normals=has_normals,
        has_texcoords=has_texcoords,
        has_texture=texture is not None,
    )


def save_obj(mesh: Mesh, path: PathLike, texture_name: Optional[str] = None) -> Path:
    """Write positions, texcoords, normals and faces, plus an MTL next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pos = mesh.positions.data
    attrs = mesh.attributes.data
    mat = mesh.material.data
    mtl_path = path.with_suffix(".mtl")
    mtl_lines = [
        "newmtl meshmark",
        "Ka {:.9g} {:.9g} {:.9g}".format(*mat[0:3]),
        "Kd {:.9g} {:.9g} {:.9g}".format(*mat[3:6]),
        "Ks {:.9g} {:.9g} {:.9g}".format(*mat[6:9]),
        f"Ns {mat[9]:.9g}",
    ]
    if texture_name:
        mtl_lines.append(f"map_Kd {texture_name}")
    mtl_path.write_text("\n".join(mtl_lines) + "\n")

    lines = [f"mtllib {mtl_path.name}", "usemtl meshmark"]
    lines += ["v {:.9g} {:.9g} {:.9g}".format(*p) for p in pos]
    lines += ["vt {:.9g} {:.9g}".format(*a[TEXCOORD]) for a in attrs]
    lines += ["vn {:.9g} {:.9g} {:.9g}".format(*a[NORMAL]) for a in attrs]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in face) for face in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def validate(mesh: Mesh) -> None:
    n = mesh.n_vertices
    if mesh.attributes.shape != (n, ATTR_CHANNELS):
        raise DataError(f"attributes shape {mesh.attributes.shape} does not match {n} vertices")
    if not (np.isfinite(mesh.positions.data).all() and np.isfinite(mesh.attributes.data).all()):
        raise DataError("non-finite vertex position, normal or texcoord")
    uv = mesh.attributes.data[:, TEXCOORD]
    if uv.size and (uv.min() < -UV_TOLERANCE or uv.max() > 1.0 + UV_TOLERANCE):
        raise DataError(f"texcoords must lie in [0, 1], got [{uv.min():.4g}, {uv.max():.4g}]")
    if mesh.n_faces:
        if mesh.faces.min() < 0 or mesh.faces.max() >= n:
            raise DataError("face index out of range")
        f = mesh.faces
        if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise DataError("degenerate face")
    if mesh.texture.ndim != 3 or mesh.texture.shape[2] != 3:
        raise DataError(f"texture must be [H, W, 3], got {mesh.texture.shape}")
    if mesh.material.shape != (10,):
        raise DataError(f"material must have 10 entries, got {mesh.material.shape}")


def normalize_positions(mesh: Mesh) -> Mesh:
    """Center on the bounding box and scale uniformly so the largest half-extent is 1."""
    pos = mesh.positions.data.astype(np.float64)
    if pos.shape[0] == 0:
        raise DataError("cannot normalize an empty mesh")
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    half = (hi - lo) / 2.0
    scale = half.max()
    if scale <= 0:
        raise DataError("cannot normalize a zero-extent mesh")
    return mesh.replace(positions=Tensor((pos - (lo + hi) / 2.0) / scale))


def spherical_uv(mesh: Mesh) -> Mesh:
    """
    Equirectangular texcoords from each vertex direction d:
    u = 0.5 + atan2(d_y, d_x) / 2pi, v = 0.5 + asin(d_z / |d|) / pi.
    A vertex at the origin gets (0.5, 0.5).
    """
    pos = mesh.positions.data.astype(np.float64)
    radius = np.linalg.norm(pos, axis=1)
    at_origin = radius == 0
    safe = np.where(at_origin, 1.0, radius)
    u = 0.5 + np.arctan2(pos[:, 1], pos[:, 0]) / (2 * math.pi)
    v = 0.5 + np.arcsin(np.clip(pos[:, 2] / safe, -1.0, 1.0)) / math.pi
    u[at_origin] = 0.5
    v[at_origin] = 0.5
    attrs = mesh.attributes.numpy()
    attrs[:, TEXCOORD] = np.clip(np.stack([u, v], axis=1), 0.0, 1.0)
    return mesh.replace(attributes=Tensor(attrs), has_texcoords=True)


def compute_normals(mesh: Mesh) -> Mesh:
    """Area-weighted vertex normals; isolated vertices get +z."""
    pos = mesh.positions.data.astype(np.float64)
    acc = np.zeros_like(pos)
    if mesh.n_faces:
        f = mesh.faces
        face_normals = np.cross(pos[f[:, 1]] - pos[f[:, 0]], pos[f[:, 2]] - pos[f[:, 0]])
        for corner in range(3):
            np.add.at(acc, f[:, corner], face_normals)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    isolated = length[:, 0] == 0
    normals = acc / np.where(length == 0, 1.0, length)
    normals[isolated] = (0.0, 0.0, 1.0)
    attrs = mesh.attributes.numpy()
    attrs[:, NORMAL] = normals
    return mesh.replace(attributes=Tensor(attrs), has_normals=True)


def unit_normals(attributes: Tensor) -> Tensor:
    """Renormalize the normal channels of an attribute tensor; zero normals stay zero."""
    normals = attributes[:, NORMAL]
    sq = sum_(normals * normals, axis=1, keepdims=True)
    zero = (sq.data < 1e-24).astype(sq.dtype)
    return concat([normals / sqrt(sq + zero), attributes[:, TEXCOORD]], axis=1)


def synth_noise_texture(
    seed: int,
    height: int = DEFAULT_TEXTURE_SIZE,
    width: int = DEFAULT_TEXTURE_SIZE,
    blur_sigma: float = 2.0,
    renormalize: bool = True,
) -> Tensor:
    """
    Uniform white noise blurred with a Gaussian (sigma in pixels, truncated
    at 3 sigma, edge-clamped), then stretched per channel to span [0, 1].
    """
    if height < 8 or width < 8:
        raise DataError(f"noise texture must be at least 8x8, got {height}x{width}")
    noise = np.random.default_rng(seed).uniform(0.0, 1.0, size=(height, width, 3))
    blurred = gaussian_filter(noise, sigma=(blur_sigma, blur_sigma, 0.0), mode="nearest", truncate=3.0)
    if renormalize:
        lo = blurred.min(axis=(0, 1))
        span = blurred.max(axis=(0, 1)) - lo
        blurred = (blurred - lo) / np.where(span > 0, span, 1.0)
    return Tensor(blurred)


def load_texture_dir(path: PathLike) -> list[Tensor]:
    """Decode every PNG in a directory (sorted by name)."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")
    files = sorted(path.glob("*.png"))
    if not files:
        raise DataError(f"{path}: no PNG textures")
    return [load_png(f) for f in files]


def crop_texture(image: Tensor, rng: np.random.Generator, size: int = DEFAULT_TEXTURE_SIZE) -> Tensor:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"texture {h}x{w} is smaller than the {size}x{size} crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return Tensor(image.data[top : top + size, left : left + size])


def preprocess(
    mesh: Mesh,
    texture: Optional[Tensor] = None,
    noise_seed: int = 0,
    texture_size: int = DEFAULT_TEXTURE_SIZE,
    blur_sigma: float = 2.0,
) -> Mesh:
    """normalize -> normals (computed if missing, else renormalized) -> spherical uv (if missing) -> texture."""
    mesh = normalize_positions(mesh)
    if mesh.has_normals:
        mesh = mesh.replace(attributes=unit_normals(mesh.attributes))
    else:
        mesh = compute_normals(mesh)
    if not mesh.has_texcoords:
        mesh = spherical_uv(mesh)
    if texture is not None:
        mesh = mesh.replace(texture=as_tensor(texture), has_texture=True)
    elif not mesh.has_texture:
        mesh = mesh.replace(
            texture=synth_noise_texture(noise_seed, texture_size, texture_size, blur_sigma), has_texture=True
        )
    validate(mesh)
    return mesh


# ---------------------------------------------------------------------------
# Primitives for desk-scale datasets
# ---------------------------------------------------------------------------


def _cube() -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array(
        [
            [0, 3, 2], [0, 1, 3],  # -x
            [4, 7, 5], [4, 6, 7],  # +x
            [0, 5, 1], [0, 4, 5],  # -y
            [2, 7, 6], [2, 3, 7],  # +y
            [0, 6, 4], [0, 2, 6],  # -z
            [1, 7, 3], [1, 5, 7],  # +z
        ]
    )  # fmt: skip
    return pos, faces


def _sphere(rings: int, segments: int) -> tuple[np.ndarray, np.ndarray]:
    pos = [[0.0, 0.0, 1.0]]
    for i in range(1, rings):
        theta = math.pi * i / rings
        for j in range(segments):
            phi = 2 * math.pi * j / segments
            pos.append([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    pos.append([0.0, 0.0, -1.0])
    bottom = len(pos) - 1
    faces = []
    for j in range(segments):
        faces.append([0, 1 + j, 1 + (j + 1) % segments])
    for i in range(rings - 2):
        start = 1 + i * segments
        for j in range(segments):
            a, b = start + j, start + (j + 1) % segments
            faces.append([a, a + segments, b + segments])
            faces.append([a, b + segments, b])
    last = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append([last + j, bottom, last + (j + 1) % segments])
    return np.array(pos), np.array(faces)


def make_primitive(kind: str, resolution: int = 8, stretch: Sequence[float] = (1.0, 1.0, 1.0)) -> Mesh:
    """
    Small procedural meshes ("cube", "sphere", "plane", "tetra") with normals
    and spherical texcoords filled in and a flagged placeholder texture.
    `stretch` scales the axes before normalization so shapes differ in aspect.
    """
    if kind == "cube":
        pos, faces = _cube()
    elif kind == "sphere":
        pos, faces = _sphere(max(resolution, 3), max(2 * resolution, 4))
    elif kind == "plane":
        pos = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], dtype=np.float64)
        faces = np.array([[0, 1, 2], [0, 2, 3]])
    elif kind == "tetra":
        pos = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
        faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    else:
        raise DataError(f"unknown primitive {kind!r}")
    pos = pos * np.asarray(stretch, dtype=np.float64)
    mesh = Mesh(
        positions=Tensor(pos),
        attributes=Tensor(np.zeros((len(pos), ATTR_CHANNELS))),
        faces=faces.astype(np.int64),
        texture=Tensor(np.ones((DEFAULT_TEXTURE_SIZE, DEFAULT_TEXTURE_SIZE, 3))),
        material=Tensor(DEFAULT_MATERIAL),
        name=kind,
        has_normals=False,
        has_texcoords=False,
        has_texture=False,
    )
    mesh = normalize_positions(mesh)
    return spherical_uv(compute_normals(mesh))
