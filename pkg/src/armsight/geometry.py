"""Pinhole camera model, hemisphere camera sampling, and the bounded
inverse-depth transform.

Conventions used throughout the package:

* image coordinates are (row, col), origin at the top-left pixel center,
  sub-pixel positions are continuous;
* camera frame is x right, y down, z forward (points in front of the
  camera have z > 0);
* world frame is z up, with the scene centered at the origin.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Pixel(NamedTuple):
    row: float
    col: float


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths and principal point of an ideal pinhole camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**d)


def project(point, intrinsics: CameraIntrinsics):
    """Project a camera-frame 3D point to a continuous (row, col) pixel.

    Returns (Pixel, depth_z).  Rejects points at or behind the camera.
    """
    x, y, z = point
    if z <= 0:
        raise ValueError(f"cannot project point with non-positive depth z={z}")
    col = intrinsics.fx * x / z + intrinsics.cx
    row = intrinsics.fy * y / z + intrinsics.cy
    return Pixel(row, col), float(z)


def backproject(pixel, depth_z: float, intrinsics: CameraIntrinsics) -> Point3:
    """Lift a pixel back to a camera-frame 3D point at the given depth.

    Exact right inverse of :func:`project`.
    """
    if depth_z <= 0:
        raise ValueError(f"depth must be positive, got {depth_z}")
    row, col = pixel
    x = (col - intrinsics.cx) * depth_z / intrinsics.fx
    y = (row - intrinsics.cy) * depth_z / intrinsics.fy
    return Point3(float(x), float(y), float(depth_z))


def project_points(points, intrinsics: CameraIntrinsics):
    """Vectorized projection of (..., 3) camera-frame points.

    Returns (pixels (..., 2) in (row, col) order, z (...,)).  No depth
    check is performed; callers filter on z themselves.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = intrinsics.fx * pts[..., 0] / z + intrinsics.cx
        row = intrinsics.fy * pts[..., 1] / z + intrinsics.cy
    return np.stack([row, col], axis=-1), z


def is_in_frame(pixels, intrinsics: CameraIntrinsics):
    """True where (row, col) pixels fall inside [0, H) x [0, W)."""
    px = np.asarray(pixels)
    row, col = px[..., 0], px[..., 1]
    return (row >= 0) & (row < intrinsics.height) & (col >= 0) & (col < intrinsics.width)


@dataclass(frozen=True)
class CameraPose:
    """Camera position on a hemisphere around the scene center.

    The derived transform is rigid and the optical axis always passes
    through the origin (look-at constraint).
    """

    radius: float
    inclination: float
    azimuth: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if not 0 <= self.inclination <= math.pi:
            raise ValueError("inclination must lie in [0, pi]")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        st, ct = math.sin(self.inclination), math.cos(self.inclination)
        sp, cp = math.sin(self.azimuth), math.cos(self.azimuth)
        return self.radius * np.array([st * cp, st * sp, ct])

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation (rows are the camera axes in world coords)."""
        if self.radius <= 0:
            raise ValueError("camera coincides with the scene center")
        forward = -self.position / self.radius
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up_hint) > 1.0 - 1e-9:
            up_hint = np.array([1.0, 0.0, 0.0])
        x_axis = np.cross(forward, up_hint)
        x_axis /= np.linalg.norm(x_axis)
        y_axis = np.cross(forward, x_axis)
        return np.stack([x_axis, y_axis, forward])

    def translation(self) -> np.ndarray:
        return -self.rotation() @ self.position

    def world_to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation().T + self.translation()

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "inclination": self.inclination,
            "azimuth": self.azimuth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(**d)


def sample_camera_pose(rng: np.random.Generator, r_max: float,
                       r_min: float = 0.0,
                       incl_max: float = math.pi) -> CameraPose:
    """Draw a camera pose with uniform radius, inclination and azimuth.

    Marginals: radius ~ U(r_min, r_max), inclination ~ U(0, incl_max),
    azimuth ~ U(0, 2*pi).  Uniform per coordinate, not area-uniform.
    """
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if not 0.0 <= r_min < r_max:
        raise ValueError("need 0 <= r_min < r_max")
    if not 0.0 < incl_max <= math.pi:
        raise ValueError("need 0 < incl_max <= pi")
    radius = rng.uniform(r_min, r_max)
    inclination = rng.uniform(0.0, incl_max)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    return CameraPose(radius, inclination, azimuth)


@dataclass(frozen=True)
class InverseDepthTransform:
    """Invertible map between metric depth and the unit interval.

    d = a / z + b, chosen so that d(z_min) = 1 and d(z_max) = 0; strictly
    decreasing in z.  Out-of-range inputs are clamped (optionally flagged).
    """

    a: float
    b: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not 0 < self.z_min < self.z_max:
            raise ValueError("need 0 < z_min < z_max")
        if self.a <= 0:
            raise ValueError("coefficient a must be positive for a decreasing map")
        if abs(self.a / self.z_min + self.b - 1.0) > 1e-9:
            raise ValueError("transform does not satisfy d(z_min) = 1")
        if abs(self.a / self.z_max + self.b) > 1e-9:
            raise ValueError("transform does not satisfy d(z_max) = 0")

    @classmethod
    def from_range(cls, z_min: float, z_max: float) -> "InverseDepthTransform":
        """Solve the 2x2 boundary system d(z_min)=1, d(z_max)=0."""
        if not 0 < z_min < z_max:
            raise ValueError("need 0 < z_min < z_max")
        a = 1.0 / (1.0 / z_min - 1.0 / z_max)
        b = -a / z_max
        return cls(a=a, b=b, z_min=z_min, z_max=z_max)

    def to_unit(self, z, return_clamped: bool = False):
        """Map metric depth to [0, 1]; depths outside the range are clamped."""
        z_arr = np.asarray(z, dtype=np.float64)
        clamped = (z_arr < self.z_min) | (z_arr > self.z_max)
        z_c = np.clip(z_arr, self.z_min, self.z_max)
        d = self.a / z_c + self.b
        d = np.clip(d, 0.0, 1.0)
        if np.isscalar(z) or z_arr.ndim == 0:
            d, clamped = float(d), bool(clamped)
        if return_clamped:
            return d, clamped
        return d

    def to_depth(self, d, return_clamped: bool = False):
        """Inverse map from the unit interval back to metric depth."""
        d_arr = np.asarray(d, dtype=np.float64)
        clamped = (d_arr < 0.0) | (d_arr > 1.0)
        d_c = np.clip(d_arr, 0.0, 1.0)
        z = self.a / (d_c - self.b)
        z = np.clip(z, self.z_min, self.z_max)
        if np.isscalar(d) or d_arr.ndim == 0:
            z, clamped = float(z), bool(clamped)
        if return_clamped:
            return z, clamped
        return z

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "z_min": self.z_min, "z_max": self.z_max}

    @classmethod
    def from_dict(cls, d: dict) -> "InverseDepthTransform":
        return cls(**d)
