"""Pinhole camera geometry: lifting, projection, and pose arithmetic.

Conventions
    * Pixel coordinates are (u, v) floats with u along width and v along
      height; (0, 0) is the center of the top-left pixel.
    * Depth is the z-coordinate in the camera frame (not ray length).
    * Poses map camera coordinates to world coordinates:
      ``X_world = R @ X_cam + t``.
    * All math runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError

# Reprojection "error" reported when the lifted point falls behind the
# target camera; compares above any finite threshold.
BEHIND_CAMERA = math.inf


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        try:
            return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                       cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))
        except KeyError as e:
            raise ConfigError(f"intrinsics missing field {e}") from None


ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ConfigError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ConfigError(f"translation must have 3 entries, got {t.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ROTATION_TOL):
            raise ConfigError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ConfigError(f"rotation determinant {np.linalg.det(r):.8f} != 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def cam_to_world(self, xyz: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(xyz, dtype=np.float64) + self.translation

    def world_to_cam(self, xyz: np.ndarray) -> np.ndarray:
        return self.rotation.T @ (np.asarray(xyz, dtype=np.float64) - self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        try:
            return cls(np.asarray(d["rotation"], dtype=np.float64),
                       np.asarray(d["translation"], dtype=np.float64))
        except KeyError as e:
            raise ConfigError(f"pose missing field {e}") from None


@dataclass
class CameraFrame:
    """One posed view: intrinsics, pose, a depth map, optional validity mask.

    Depth uses 0 (or any non-positive value) as the invalid marker; the
    optional mask further restricts which pixels count.
    """

    intrinsics: Intrinsics
    pose: Pose
    depth: np.ndarray  # (height, width) float
    mask: np.ndarray | None = None  # (height, width) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != expected:
            raise ConfigError(
                f"depth shape {self.depth.shape} does not match intrinsics size {expected}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != expected:
                raise ConfigError(
                    f"mask shape {self.mask.shape} does not match intrinsics size {expected}"
                )


def unproject(pixel: tuple[float, float], depth: float, intr: Intrinsics) -> np.ndarray:
    """Lift a pixel at a given depth into camera coordinates."""
    if depth <= 0:
        raise DataError(f"cannot unproject non-positive depth {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth],
        dtype=np.float64,
    )


def project(xyz: np.ndarray, intr: Intrinsics) -> tuple[float, float]:
    """Project a camera-frame point to pixel coordinates.

    Raises :class:`~p3d.errors.DataError` for points at or behind the
    camera plane (z <= 0); callers that need a sentinel catch it.
    """
    x, y, z = np.asarray(xyz, dtype=np.float64)
    if z <= 0:
        raise DataError(f"point behind camera (z={z})")
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def depth_at(frame: CameraFrame, pixel: tuple[float, float]) -> float:
    """Nearest-neighbor depth lookup at a (possibly fractional) pixel.

    Returns the stored depth; raises :class:`~p3d.errors.DataError` when
    the pixel is outside the image or the depth there is invalid
    (non-positive or masked off).
    """
    u, v = float(pixel[0]), float(pixel[1])
    col = int(np.rint(u))
    row = int(np.rint(v))
    h, w = frame.depth.shape
    if not (0 <= col < w and 0 <= row < h):
        raise DataError(f"pixel ({u}, {v}) outside {w}x{h} image")
    if frame.mask is not None and not frame.mask[row, col]:
        raise DataError(f"pixel ({u}, {v}) masked invalid")
    d = float(frame.depth[row, col])
    if d <= 0:
        raise DataError(f"invalid depth {d} at pixel ({u}, {v})")
    return d


def lift_to_world(frame: CameraFrame, pixel: tuple[float, float]) -> np.ndarray:
    """Unproject a pixel through its stored depth and move it to world space."""
    d = depth_at(frame, pixel)
    return frame.pose.cam_to_world(unproject(pixel, d, frame.intrinsics))


def relative_angle(pose_a: Pose, pose_b: Pose) -> float:
    """Geodesic angle, in degrees, between two camera orientations.

    Uses the rotation component only: translation does not change the
    viewpoint angle.
    """
    r_rel = pose_b.rotation.T @ pose_a.rotation
    cos_theta = (np.trace(r_rel) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_theta))))


def reprojection_error_2d(
    pixel_a: tuple[float, float],
    pixel_b: tuple[float, float],
    frame_a: CameraFrame,
    frame_b: CameraFrame,
) -> float:
    """Pixel distance between ``pixel_b`` and the reprojection of
    ``pixel_a`` (lifted through frame A's depth) into frame B.

    Returns :data:`BEHIND_CAMERA` (infinite) when the lifted point lands
    behind frame B; invalid source depth raises
    :class:`~p3d.errors.DataError` so the caller can drop the sample.
    """
    world = lift_to_world(frame_a, pixel_a)
    cam_b = frame_b.pose.world_to_cam(world)
    try:
        u, v = project(cam_b, frame_b.intrinsics)
    except DataError:
        return BEHIND_CAMERA
    return math.hypot(u - pixel_b[0], v - pixel_b[1])


def metric_error_3d(
    pixel_a: tuple[float, float],
    pixel_b: tuple[float, float],
    frame_a: CameraFrame,
    frame_b: CameraFrame,
) -> float:
    """World-space distance between the two pixels lifted through their own
    depth maps.  Invalid depth on either side raises
    :class:`~p3d.errors.DataError`."""
    pa = lift_to_world(frame_a, pixel_a)
    pb = lift_to_world(frame_b, pixel_b)
    return float(np.linalg.norm(pa - pb))


def normals_from_depth(depth: np.ndarray, intr: Intrinsics,
                       d_du: np.ndarray, d_dv: np.ndarray) -> np.ndarray:
    """Analytic surface normals of a depth field with known derivatives.

    The surface point P(u, v) = ((u-cx) d / fx, (v-cy) d / fy, d) has
    tangents dP/du and dP/dv; the normal is their unit cross product,
    oriented to face the camera (negative z).  Returns (3, H, W).
    """
    h, w = depth.shape
    if np.any(depth <= 0):
        raise DegenerateInputError("normals_from_depth: depth must be positive everywhere")
    u = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    v = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1)
    x_u = (depth + (u - intr.cx) * d_du) / intr.fx
    y_u = (v - intr.cy) * d_du / intr.fy
    z_u = d_du
    x_v = (u - intr.cx) * d_dv / intr.fx
    y_v = (depth + (v - intr.cy) * d_dv) / intr.fy
    z_v = d_dv
    tu = np.stack([x_u, y_u, z_u])
    tv = np.stack([x_v, y_v, z_v])
    n = np.cross(tu, tv, axis=0)
    norm = np.linalg.norm(n, axis=0, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("normals_from_depth: degenerate tangents")
    n = n / norm
    flip = np.where(n[2] > 0, -1.0, 1.0)
    return n * flip
