"""
Depth value types, depth-map I/O, validity masking and camera projection.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import DepthIOError, InvalidDepthError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

UINT16_MAX = 65535


class DepthKind(str, Enum):
    METRIC = "metric"
    RELATIVE = "relative"


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth with a validity mask.

    Metric maps hold meters; relative maps hold dimensionless values in (0, 1).
    Arrays are copied and frozen on construction.
    """

    values: np.ndarray
    valid: np.ndarray
    kind: DepthKind = DepthKind.METRIC

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2:
            raise InvalidDepthError(f"depth values must be 2-D, got shape {values.shape}")
        if valid.shape != values.shape:
            raise InvalidDepthError(f"valid mask shape {valid.shape} != values shape {values.shape}")
        kind = DepthKind(self.kind)
        picked = values[valid]
        if picked.size and not (np.all(np.isfinite(picked)) and np.all(picked > 0)):
            raise InvalidDepthError("valid pixels must hold finite positive depth")
        if kind is DepthKind.RELATIVE and picked.size and np.any(picked >= 1):
            raise InvalidDepthError("relative depth must lie in (0, 1) on valid pixels")
        values.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def dense(cls, values: np.ndarray, kind: DepthKind = DepthKind.METRIC) -> "DepthMap":
        """All pixels valid."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool), kind)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def check_bounds(self, height: int, width: int) -> None:
        if not (0 <= self.cx <= width and 0 <= self.cy <= height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")


@dataclass(frozen=True)
class ValidityPolicy:
    """Inclusive depth range identifying scored or supervised pixels."""

    min_depth: float = 0.001
    max_depth: float = 10.0

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(f"need 0 < min_depth < max_depth, got ({self.min_depth}, {self.max_depth})")


NYU_POLICY = ValidityPolicy(0.001, 10.0)
KITTI_POLICY = ValidityPolicy(0.001, 80.0)
POLICIES = {"nyu": NYU_POLICY, "kitti": KITTI_POLICY}


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    """Pinhole camera used by the synthetic scenes (about 53 degrees horizontal FOV)."""
    return CameraIntrinsics(fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0)


def load_depth_png(path: PathLike, divisor: float) -> DepthMap:
    """Read a 16-bit depth PNG; raw 0 marks missing depth."""
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    path = Path(path)
    if not path.is_file():
        raise DepthIOError(f"depth file not found: {path}")
    try:
        with Image.open(path) as img:
            mode = img.mode
            raw = np.array(img)
    except (UnidentifiedImageError, OSError) as e:
        raise DepthIOError(f"cannot read depth image {path}: {e}")

    if not mode.startswith("I;16") and mode != "I":
        raise DepthIOError(f"{path} is not a 16-bit single-channel image (mode {mode})")
    if raw.ndim != 2 or raw.min(initial=0) < 0 or raw.max(initial=0) > UINT16_MAX:
        raise DepthIOError(f"{path} does not hold 16-bit depth values")

    raw = raw.astype(np.float64)
    valid = raw > 0
    return DepthMap(raw / divisor, valid, DepthKind.METRIC)


def save_depth_png(depth: DepthMap, path: PathLike, divisor: float) -> None:
    """Write a metric map as a 16-bit PNG of round(depth * divisor)."""
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    if depth.kind is not DepthKind.METRIC:
        raise InvalidDepthError("only metric depth maps can be saved as depth PNGs")

    scaled = np.where(depth.valid, np.rint(depth.values * divisor), 0.0)
    if np.any(scaled > UINT16_MAX):
        worst = float(depth.values[depth.valid].max())
        raise InvalidDepthError(
            f"depth {worst} m with divisor {divisor} overflows the 16-bit range ({UINT16_MAX})"
        )
    if np.any(depth.valid & (scaled < 1)):
        raise InvalidDepthError(f"valid depth below {0.5 / divisor} m would be stored as missing")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(scaled.astype(np.uint16)).save(path, format="PNG")
    except OSError as e:
        raise DepthIOError(f"cannot write {path}: {e}")
    logger.debug("Wrote depth PNG %s (divisor %s, %d valid)", path, divisor, depth.n_valid)


def clip_to_png_range(depth: DepthMap, divisor: float) -> Tuple[DepthMap, int]:
    """Clamp valid values into the range save_depth_png can encode; also returns how many moved."""
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    values = np.where(depth.valid, np.clip(depth.values, 1.0 / divisor, UINT16_MAX / divisor), depth.values)
    moved = int((depth.valid & (values != depth.values)).sum())
    return DepthMap(values, depth.valid, depth.kind), moved


def load_rgb_png(path: PathLike) -> np.ndarray:
    """Read an 8-bit RGB image as an H x W x 3 float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DepthIOError(f"image not found: {path}")
    except (UnidentifiedImageError, OSError) as e:
        raise DepthIOError(f"cannot read image {path}: {e}")
    return rgb


def save_rgb_png(image: np.ndarray, path: PathLike) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(image).save(path, format="PNG")
    except OSError as e:
        raise DepthIOError(f"cannot write {path}: {e}")


def apply_validity(depth: DepthMap, policy: ValidityPolicy) -> DepthMap:
    """Restrict the mask to [min_depth, max_depth]; values are untouched."""
    if depth.kind is not DepthKind.METRIC:
        raise InvalidDepthError("validity policies apply to metric depth only")
    in_range = (depth.values >= policy.min_depth) & (depth.values <= policy.max_depth)
    return DepthMap(depth.values, depth.valid & in_range, depth.kind)


def project_point_cloud(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Back-project valid pixels to camera coordinates, one (x, y, z) row each."""
    if depth.kind is not DepthKind.METRIC:
        raise InvalidDepthError("point clouds need metric depth")
    height, width = depth.shape
    K.check_bounds(height, width)

    v, u = np.nonzero(depth.valid)
    z = depth.values[v, u]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=1)


def write_ply(points: np.ndarray, path: PathLike) -> None:
    """ASCII PLY with float x/y/z vertices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header)
            np.savetxt(fh, points, fmt="%.6f")
    except OSError as e:
        raise DepthIOError(f"cannot write {path}: {e}")
    logger.info("Wrote %d points to %s", len(points), path)
