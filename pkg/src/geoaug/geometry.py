"""Pinhole camera model, pictorial depth cues, and 3D box geometry.

Everything uses the KITTI camera frame: X right, Y down, Z forward, in
meters. Pixels are continuous (u, v) with u along columns and v along rows.
Object locations refer to the bottom-face center of the 3D box.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DEFAULT_MIN_DEPTH = 0.5


class GeometryError(ValueError):
    """Base class for geometric precondition violations."""


class BehindCamera(GeometryError):
    """A point or box corner has non-positive depth."""


class DegenerateCue(GeometryError):
    """A depth cue was evaluated on degenerate input (e.g. zero pixel height)."""


class AboveHorizon(GeometryError):
    """A ground-contact row lies on or above the horizon line."""


class ObjectTooClose(GeometryError):
    """A transform would move geometry below the minimum working depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length and principal point, in pixels."""

    f: float
    c_u: float
    c_v: float

    def __post_init__(self):
        if not self.f > 0:
            raise GeometryError(f"focal length must be positive, got {self.f}")

    def as_projection(self) -> np.ndarray:
        """3x4 projection matrix with isotropic focal length and zero baseline."""
        return np.array([
            [self.f, 0.0, self.c_u, 0.0],
            [0.0, self.f, self.c_v, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])


@dataclass(frozen=True)
class GroundModel:
    """Flat-ground description: camera height above ground and horizon row."""

    y_cam: float
    v_h: float

    def __post_init__(self):
        if not self.y_cam > 0:
            raise GeometryError(f"camera height must be positive, got {self.y_cam}")


@dataclass
class Object3D:
    """One labeled object in the camera frame.

    (x, y, z) locate the bottom-face center, (w, h, l) are the box
    dimensions, yaw rotates about the camera Y axis and alpha is the
    observation angle yaw - atan2(x, z).
    """

    class_name: str
    w: float
    h: float
    l: float
    x: float
    y: float
    z: float
    yaw: float
    alpha: float = 0.0
    box2d: tuple[float, float, float, float] | None = None
    truncated: float = 0.0
    occluded: int = 0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def moved_to(self, x: float, y: float, z: float) -> "Object3D":
        return replace(self, x=x, y=y, z=z)


def normalize_angle(angle):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


def alpha_from_yaw(yaw: float, x: float, z: float) -> float:
    """Observation angle consistent with a yaw and a viewing ray."""
    return float(normalize_angle(yaw - np.arctan2(x, z)))


def project(points, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2).

    Raises BehindCamera if any depth is non-positive.
    """
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("cannot project points with depth <= 0")
    u = K.f * pts[..., 0] / z + K.c_u
    v = K.f * pts[..., 1] / z + K.c_v
    return np.stack([u, v], axis=-1)


def backproject(pixels, z, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixels (..., 2) at depth z (broadcastable) back to 3D points."""
    px = np.asarray(pixels, dtype=float)
    depth = np.asarray(z, dtype=float)
    if np.any(depth <= 0):
        raise BehindCamera("cannot backproject to depth <= 0")
    x = (px[..., 0] - K.c_u) * depth / K.f
    y = (px[..., 1] - K.c_v) * depth / K.f
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def rotation_y(yaw: float) -> np.ndarray:
    """Rotation matrix about the camera Y (down) axis."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# Local box corners before rotation: x spans the length, z the width, and the
# first four corners form the bottom face (y = 0), the last four the top.
_CORNER_SIGNS_X = np.array([0.5, 0.5, -0.5, -0.5, 0.5, 0.5, -0.5, -0.5])
_CORNER_SIGNS_Z = np.array([0.5, -0.5, -0.5, 0.5, 0.5, -0.5, -0.5, 0.5])
_CORNER_TOP = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])


def corners_3d(obj: Object3D) -> np.ndarray:
    """The 8 corners of an object's 3D box, shape (8, 3).

    Corners 0-3 are the bottom face at y = obj.y, corners 4-7 the top face
    at obj.y - obj.h.
    """
    local = np.stack([
        _CORNER_SIGNS_X * obj.l,
        -_CORNER_TOP * obj.h,
        _CORNER_SIGNS_Z * obj.w,
    ])
    return (rotation_y(obj.yaw) @ local).T + obj.center


def project_box2d(obj: Object3D, K: CameraIntrinsics) -> tuple[float, float, float, float]:
    """Axis-aligned hull of the 8 projected box corners (u1, v1, u2, v2)."""
    corners = corners_3d(obj)
    if np.any(corners[:, 2] <= 0):
        raise BehindCamera(f"box corner behind camera for object at z={obj.z:.2f}")
    uv = project(corners, K)
    u1, v1 = uv.min(axis=0)
    u2, v2 = uv.max(axis=0)
    return float(u1), float(v1), float(u2), float(v2)


def clip_box2d(box, width: int, height: int) -> tuple[tuple[float, float, float, float], float]:
    """Clip a 2D box to image bounds [0, width-1] x [0, height-1].

    Returns the clipped box and the truncation fraction (area removed by
    clipping over original area). A box fully outside clips to a degenerate
    box with truncation 1.0.
    """
    u1, v1, u2, v2 = box
    cu1 = min(max(u1, 0.0), width - 1.0)
    cu2 = min(max(u2, 0.0), width - 1.0)
    cv1 = min(max(v1, 0.0), height - 1.0)
    cv2 = min(max(v2, 0.0), height - 1.0)
    area = max(u2 - u1, 0.0) * max(v2 - v1, 0.0)
    clipped_area = max(cu2 - cu1, 0.0) * max(cv2 - cv1, 0.0)
    truncation = 0.0 if area <= 0 else 1.0 - clipped_area / area
    return (cu1, cv1, cu2, cv2), truncation


def iou_2d(a, b) -> float:
    """Intersection over union of two axis-aligned boxes (u1, v1, u2, v2)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def degenerate_box_height(obj: Object3D, K: CameraIntrinsics) -> float:
    """Pixel height of the object's zero-footprint proxy box (w = l = 0).

    This is the apparent-size quantity the size cue reasons about; it equals
    f * h / z and is computed through the corner-projection pipeline so it
    exercises the same code path as real boxes.
    """
    proxy = replace(obj, w=0.0, l=0.0)
    _, v1, _, v2 = project_box2d(proxy, K)
    return v2 - v1


def depth_from_size(f: float, h_world: float, h_px):
    """Depth implied by an apparent pixel height: z = f * H / h."""
    h = np.asarray(h_px, dtype=float)
    if np.any(h <= 0):
        raise DegenerateCue("apparent height must be positive")
    out = f * h_world / h
    return float(out) if out.ndim == 0 else out


def depth_from_position(f: float, ground: GroundModel, v):
    """Depth implied by a ground-contact row: z = f * y_cam / (v - v_h)."""
    rows = np.asarray(v, dtype=float)
    if np.any(rows <= ground.v_h):
        raise AboveHorizon("contact row must lie below the horizon")
    out = f * ground.y_cam / (rows - ground.v_h)
    return float(out) if out.ndim == 0 else out


def apparent_height_at_depth(f: float, h_world: float, z):
    """Inverse of depth_from_size: pixel height of height H at depth z."""
    depth = np.asarray(z, dtype=float)
    if np.any(depth <= 0):
        raise BehindCamera("depth must be positive")
    out = f * h_world / depth
    return float(out) if out.ndim == 0 else out


def vertical_contact_at_depth(f: float, ground: GroundModel, z):
    """Inverse of depth_from_position: contact row of the ground at depth z."""
    depth = np.asarray(z, dtype=float)
    if np.any(depth <= 0):
        raise BehindCamera("depth must be positive")
    out = ground.v_h + f * ground.y_cam / depth
    return float(out) if out.ndim == 0 else out


def scale_transform(points, s: float, K: CameraIntrinsics) -> np.ndarray:
    """Depth-scaling transform matched to a 1/s image resize.

    s scales depth; the paired image resize factor is r = 1/s, and the
    projected pixel of the transformed point equals (1/s) times the original
    pixel, componentwise.
    """
    if not s > 0:
        raise GeometryError(f"scale must be positive, got {s}")
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    x = pts[..., 0] + (1.0 - s) * (K.c_u / K.f) * z
    y = pts[..., 1] + (1.0 - s) * (K.c_v / K.f) * z
    return np.stack([x, y, s * z], axis=-1)


def translate_camera(points, d: float, min_depth: float = DEFAULT_MIN_DEPTH) -> np.ndarray:
    """Shift points away from (d > 0) or toward (d < 0) the camera along Z."""
    pts = np.asarray(points, dtype=float)
    new_z = pts[..., 2] + d
    if np.any(new_z <= min_depth):
        raise ObjectTooClose(f"depth would drop to <= {min_depth} m")
    out = pts.copy()
    out[..., 2] = new_z
    return out


def horizon_row(K: CameraIntrinsics, pitch: float = 0.0) -> float:
    """Horizon row of a flat ground plane for a camera pitched down by `pitch`."""
    if not abs(pitch) < np.pi / 2:
        raise GeometryError("pitch must be within (-pi/2, pi/2)")
    return float(K.c_v + K.f * np.tan(pitch))
