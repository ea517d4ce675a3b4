"""Domain types for Gaussians, cameras and images, plus scene ingestion."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy.spatial import cKDTree

from ugsplat.errors import (
    CameraError,
    DegenerateDirectionError,
    DimensionError,
    EmptySceneError,
    PLYParseError,
    SceneConfigError,
)
from ugsplat.ply import read_ply

log = logging.getLogger(__name__)

INITIAL_OPACITY = 0.1
# used when a cloud has a single point and no neighbour distance exists
FALLBACK_SCALE = 0.01


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_quaternions_backward(q: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given the gradient w.r.t. q/|q|."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    return (grad_unit - qn * np.sum(qn * grad_unit, axis=-1, keepdims=True)) / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quaternion_to_matrix_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion from the gradient w.r.t. its matrix."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], -1)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class GaussianSet:
    """Structure-of-arrays storage for every learnable per-Gaussian parameter.

    ``colours`` has shape (N, (d+1)^2, 3): SH coefficients per colour channel,
    band 0 being the constant RGB term.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colours: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        if self.sh_degree not in (0, 1):
            raise ValueError(f"sh_degree must be 0 or 1, got {self.sh_degree}")
        self.colours = np.asarray(self.colours, dtype=np.float64).reshape(
            n, sh_coeff_count(self.sh_degree), 3)

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.count

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    # parameter groups, in the order the optimizer sees them
    PARAMS = ("positions", "rotations", "log_scales", "opacity_logits", "colours")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAMS}

    def copy(self) -> GaussianSet:
        return GaussianSet(**{k: v.copy() for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)

    def subset(self, keep: np.ndarray) -> GaussianSet:
        return GaussianSet(**{k: v[keep].copy() for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)

    def normalize_rotations(self, rows: np.ndarray | None = None) -> None:
        if rows is None:
            self.rotations = normalize_quaternions(self.rotations)
        else:
            self.rotations[rows] = normalize_quaternions(self.rotations[rows])

    @classmethod
    def empty(cls, sh_degree: int = 0) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, sh_coeff_count(sh_degree), 3)), sh_degree)

    @classmethod
    def from_points(cls, points, rgb, log_scales, opacity=INITIAL_OPACITY,
                    sh_degree: int = 0) -> GaussianSet:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        colours = np.zeros((n, sh_coeff_count(sh_degree), 3))
        colours[:, 0] = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
        return cls(points.copy(), rot, log_scales, np.full(n, float(logit(opacity))), colours,
                   sh_degree)


@dataclass
class Camera:
    """Pinhole camera; ``world_to_camera`` maps world points into the camera frame
    (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    near_clip: float = 0.01

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise CameraError(f"world_to_camera must be 4x4, got {self.world_to_camera.shape}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise DimensionError("camera width/height must be integers")
        self.width, self.height = int(self.width), int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise DimensionError(
                f"camera dimensions must be positive, got {self.width}x{self.height}")
        if not self.near_clip > 0:
            raise CameraError(f"near_clip must be positive, got {self.near_clip}")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        r = self.rotation
        dev = np.abs(r @ r.T - np.eye(3)).max()
        if not np.isfinite(dev) or dev > 1e-6:
            raise CameraError(f"rotation block is not orthonormal (max |R R^T - I| = {dev:.3g})")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def centre(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width: int, height: int,
                fx: float, fy: float | None = None, near_clip: float = 0.01) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(fx, fx if fy is None else fy, (width - 1) / 2, (height - 1) / 2,
                   width, height, w2c, near_clip)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_to_camera": self.world_to_camera.tolist(), "near_clip": self.near_clip}


@dataclass
class ImageBuffer:
    """RGB image with channels in [0, 1], stored row-major as (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionError(f"image must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("image channels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)

    @classmethod
    def read_png(cls, path) -> ImageBuffer:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)

    def write_png(self, path) -> None:
        arr = np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(path)


@dataclass
class Scene:
    gaussians: GaussianSet
    train_views: list[tuple[Camera, ImageBuffer]]
    test_views: list[tuple[Camera, ImageBuffer]] = field(default_factory=list)
    name: str = "scene"
    bounding_box: np.ndarray | None = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.train_views:
            raise SceneConfigError("a scene needs at least one train view")
        for cam, img in self.train_views + self.test_views:
            if (img.width, img.height) != (cam.width, cam.height):
                raise DimensionError(
                    f"image is {img.width}x{img.height} but camera expects "
                    f"{cam.width}x{cam.height}")
        if self.bounding_box is None:
            self.bounding_box = bounding_box_of(self.gaussians.positions)
        self.bounding_box = np.asarray(self.bounding_box, dtype=np.float64).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def views(self, split: str) -> list[tuple[Camera, ImageBuffer]]:
        if split == "train":
            return self.train_views
        if split == "test":
            return self.test_views
        raise ValueError(f"unknown split {split!r}")


def bounding_box_of(points: np.ndarray, pad: float = 0.1) -> np.ndarray:
    """Axis-aligned box around ``points``, padded by ``pad`` of its extent on each side."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.array([[-1.0] * 3, [1.0] * 3])
    lo, hi = points.min(0), points.max(0)
    extent = np.maximum(hi - lo, 1e-3)
    margin = pad * extent.max()
    return np.stack([lo - margin, hi + margin])


# ---------------------------------------------------------------------------
# view direction
# ---------------------------------------------------------------------------

def view_direction(camera: Camera, position) -> np.ndarray:
    """Unit vector from the camera centre towards ``position``."""
    return view_directions(camera.centre, np.asarray(position, dtype=np.float64)[None])[0]


def view_directions(centre: np.ndarray, positions: np.ndarray) -> np.ndarray:
    offset = positions - centre
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateDirectionError("position coincides with the camera centre")
    return offset / norm


def view_directions_backward(centre, positions, grad_dir) -> np.ndarray:
    offset = positions - centre
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    d = offset / norm
    return (grad_dir - d * np.sum(d * grad_dir, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def nearest_neighbour_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest neighbours (fewer if the
    cloud is smaller)."""
    n = len(points)
    if n < 2:
        return np.full(n, FALLBACK_SCALE)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.maximum(mean, 1e-7)


def ingest_point_cloud(path, colour_default=(0.5, 0.5, 0.5), sh_degree: int = 0) -> GaussianSet:
    """One Gaussian per PLY vertex with identity rotation, isotropic 3-NN scale and
    opacity 0.1."""
    data = read_ply(path)
    if "vertex" not in data:
        raise PLYParseError(f"{path}: no 'vertex' element")
    vert = data["vertex"]
    missing = [c for c in "xyz" if c not in vert]
    if missing:
        raise PLYParseError(f"{path}: vertex element lacks properties {missing}")
    points = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    if len(points) == 0:
        raise EmptySceneError(f"{path}: point cloud has zero points")
    if not np.all(np.isfinite(points)):
        raise PLYParseError(f"{path}: non-finite point coordinates")

    names = [("red", "green", "blue"), ("r", "g", "b")]
    rgb = None
    for trio in names:
        if all(c in vert for c in trio):
            cols = [vert[c] for c in trio]
            rgb = np.stack(cols, axis=1).astype(np.float64)
            if cols[0].dtype.kind in "iu":
                rgb /= float(np.iinfo(cols[0].dtype).max)
            break
    if rgb is None:
        rgb = np.tile(np.asarray(colour_default, dtype=np.float64), (len(points), 1))

    log_scales = np.repeat(np.log(nearest_neighbour_scale(points))[:, None], 3, axis=1)
    return GaussianSet.from_points(points, np.clip(rgb, 0, 1), log_scales,
                                   INITIAL_OPACITY, sh_degree)


def _camera_from_config(entry: dict, where: str) -> Camera:
    try:
        return Camera(
            fx=float(entry["fx"]), fy=float(entry.get("fy", entry["fx"])),
            cx=float(entry["cx"]), cy=float(entry["cy"]),
            width=entry["width"], height=entry["height"],
            world_to_camera=np.asarray(entry["world_to_camera"], dtype=np.float64),
            near_clip=float(entry.get("near_clip", 0.01)),
        )
    except KeyError as exc:
        raise SceneConfigError(f"{where}: missing camera key {exc.args[0]!r}") from None
    except (CameraError, DimensionError) as exc:
        raise type(exc)(f"{where}: {exc}") from None


def load_scene(config_path) -> Scene:
    """Build a Scene from a YAML (or JSON) config.

    Keys: ``points_path``, ``views`` (list of camera dicts with an ``image`` path),
    ``split`` (``train``/``test`` index lists), optional ``sh_degree``,
    ``bounding_box`` ([[lo], [hi]]), ``background``, ``name``.  Relative paths are
    resolved against the config's directory.
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise SceneConfigError(f"scene config not found: {config_path}")
    cfg = yaml.safe_load(config_path.read_text()) or {}
    root = config_path.parent

    def resolve(p) -> Path:
        p = Path(os.path.expandvars(str(p)))
        return p if p.is_absolute() else root / p

    for key in ("points_path", "views"):
        if key not in cfg:
            raise SceneConfigError(f"{config_path}: missing key {key!r}")
    points_path = resolve(cfg["points_path"])
    if not points_path.exists():
        raise SceneConfigError(f"point cloud not found: {points_path}")
    sh_degree = int(cfg.get("sh_degree", 0))
    gaussians = ingest_point_cloud(points_path, sh_degree=sh_degree)

    views = []
    for i, entry in enumerate(cfg["views"]):
        where = f"{config_path}: views[{i}]"
        cam = _camera_from_config(entry, where)
        if "image" not in entry:
            raise SceneConfigError(f"{where}: missing key 'image'")
        img_path = resolve(entry["image"])
        if not img_path.exists():
            raise SceneConfigError(f"{where}: image not found: {img_path}")
        img = ImageBuffer.read_png(img_path)
        if (img.width, img.height) != (cam.width, cam.height):
            raise DimensionError(f"{where}: image {img_path.name} is {img.width}x{img.height}, "
                                 f"camera expects {cam.width}x{cam.height}")
        views.append((cam, img))

    split = cfg.get("split", {"train": list(range(len(views))), "test": []})
    try:
        train = [views[i] for i in split.get("train", [])]
        test = [views[i] for i in split.get("test", [])]
    except IndexError:
        raise SceneConfigError(f"{config_path}: split index out of range") from None

    bbox = cfg.get("bounding_box")
    if bbox is not None:
        bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        inside = np.all((gaussians.positions >= bbox[0]) & (gaussians.positions <= bbox[1]))
        if not inside:
            raise SceneConfigError(f"{config_path}: bounding_box does not contain all points")
    return Scene(gaussians, train, test, name=str(cfg.get("name", config_path.stem)),
                 bounding_box=bbox, background=cfg.get("background", (0.0, 0.0, 0.0)))
