"""Bit-exact readers and writers for KITTI-format dataset files.

Covers calibration text files, 15/16-field label files, 16-bit depth-map
PNGs (depth = raw / 256, raw 0 = missing), single-channel instance-id mask
PNGs, and 8-bit color scene images. Serialization is canonical so that
serialize -> parse -> serialize is byte-identical.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, Object3D, alpha_from_yaw

DONT_CARE = "DontCare"


class FormatError(ValueError):
    """Malformed file content."""


class MissingKey(FormatError):
    """A required calibration key is absent."""


class FieldCount(FormatError):
    """A label line has the wrong number of fields."""


@dataclass
class CalibFile:
    """Parsed calibration file.

    `projections` holds 3x4 matrices for "P<n>" keys; every other key is
    kept verbatim in `passthrough` so unknown blocks survive a round trip.
    `order` preserves the original key order for canonical rewriting.
    """

    projections: dict[str, np.ndarray]
    passthrough: dict[str, str]
    order: list[str]

    def intrinsics(self, camera: str = "P2") -> CameraIntrinsics:
        """Decompose a projection matrix into pinhole intrinsics.

        Uses f = P[0][0]; warns when the two focal lengths differ by more
        than 0.1% relatively.
        """
        if camera not in self.projections:
            raise MissingKey(camera)
        p = self.projections[camera]
        fx, fy = p[0, 0], p[1, 1]
        if abs(fx - fy) / fx > 1e-3:
            warnings.warn(
                f"anisotropic focal lengths in {camera} (fx={fx}, fy={fy}); using fx",
                stacklevel=2,
            )
        return CameraIntrinsics(f=float(fx), c_u=float(p[0, 2]), c_v=float(p[1, 2]))

    def with_projection(self, camera: str, matrix: np.ndarray) -> "CalibFile":
        projections = dict(self.projections)
        projections[camera] = np.asarray(matrix, dtype=float).reshape(3, 4)
        order = list(self.order) if camera in self.order else list(self.order) + [camera]
        return CalibFile(projections, dict(self.passthrough), order)


def _as_text(data) -> str:
    if isinstance(data, bytes):
        return data.decode("ascii")
    return data


def parse_calib(data) -> CalibFile:
    """Parse a KITTI calibration file (bytes or str)."""
    projections: dict[str, np.ndarray] = {}
    passthrough: dict[str, str] = {}
    order: list[str] = []
    for lineno, line in enumerate(_as_text(data).splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"calib line {lineno}: missing ':' separator")
        key, rest = line.split(":", 1)
        key = key.strip()
        if key.startswith("P") and key[1:].isdigit():
            fields = rest.split()
            if len(fields) != 12:
                raise FormatError(
                    f"calib line {lineno}: {key} has {len(fields)} elements, expected 12"
                )
            try:
                values = np.array([float(x) for x in fields]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"calib line {lineno}: bad number in {key}") from exc
            projections[key] = values
        else:
            passthrough[key] = rest.strip()
        order.append(key)
    if "P2" not in projections:
        raise MissingKey("P2")
    p2 = projections["P2"]
    if not (p2[0, 0] > 0 and p2[1, 1] > 0):
        raise FormatError("P2 focal lengths must be positive")
    return CalibFile(projections, passthrough, order)


def write_calib(calib: CalibFile) -> bytes:
    """Serialize a CalibFile canonically (%.12e numbers, original key order)."""
    lines = []
    for key in calib.order:
        if key in calib.projections:
            nums = " ".join("%.12e" % x for x in calib.projections[key].ravel())
            lines.append(f"{key}: {nums}")
        else:
            lines.append(f"{key}: {calib.passthrough[key]}")
    return ("\n".join(lines) + "\n").encode("ascii")


@dataclass
class LabelRecord:
    """One line of a KITTI label or result file.

    Dimensions are stored in file order (height, width, length); location
    is the bottom-face center (x, y, z) in the camera frame.
    """

    class_name: str
    truncated: float
    occluded: int
    alpha: float
    box2d: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    @property
    def is_dont_care(self) -> bool:
        return self.class_name == DONT_CARE


def parse_labels(data) -> list[LabelRecord]:
    """Parse label lines into records, one per line, in file order."""
    records = []
    for lineno, line in enumerate(_as_text(data).splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) not in (15, 16):
            raise FieldCount(f"label line {lineno}: {len(fields)} fields, expected 15 or 16")
        try:
            values = [float(x) for x in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"label line {lineno}: non-numeric field") from exc
        box2d = tuple(values[3:7])
        if box2d[3] < box2d[1] or box2d[2] < box2d[0]:
            raise FormatError(f"label line {lineno}: inverted 2D box {box2d}")
        records.append(LabelRecord(
            class_name=fields[0],
            truncated=values[0],
            occluded=int(values[1]),
            alpha=values[2],
            box2d=box2d,
            dimensions=tuple(values[7:10]),
            location=tuple(values[10:13]),
            rotation_y=values[13],
            score=values[14] if len(values) == 15 else None,
        ))
    return records


def write_labels(records: list[LabelRecord], include_score: bool = False) -> bytes:
    """Serialize records canonically: reals with 2 fractional digits.

    parse_labels(write_labels(records)) equals the input after rounding to
    2 decimals, and write -> parse -> write is byte-identical.
    """
    lines = []
    for i, rec in enumerate(records):
        values = [rec.truncated, rec.alpha, *rec.box2d, *rec.dimensions,
                  *rec.location, rec.rotation_y]
        if include_score:
            if rec.score is None:
                raise FormatError(f"record {i}: score requested but missing")
            values.append(rec.score)
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"record {i}: non-finite field value")
        parts = [rec.class_name, "%.2f" % rec.truncated, "%d" % rec.occluded,
                 "%.2f" % rec.alpha]
        parts += ["%.2f" % v for v in rec.box2d]
        parts += ["%.2f" % v for v in rec.dimensions]
        parts += ["%.2f" % v for v in rec.location]
        parts.append("%.2f" % rec.rotation_y)
        if include_score:
            parts.append("%.2f" % rec.score)
        lines.append(" ".join(parts))
    return ("".join(line + "\n" for line in lines)).encode("ascii")


def record_to_object(rec: LabelRecord) -> Object3D:
    """Convert a label record to the geometry-level object type."""
    h, w, l = rec.dimensions
    x, y, z = rec.location
    return Object3D(
        class_name=rec.class_name, w=w, h=h, l=l, x=x, y=y, z=z,
        yaw=rec.rotation_y, alpha=rec.alpha, box2d=rec.box2d,
        truncated=rec.truncated, occluded=rec.occluded,
    )


def object_to_record(obj: Object3D, score: float | None = None) -> LabelRecord:
    box2d = obj.box2d if obj.box2d is not None else (0.0, 0.0, 0.0, 0.0)
    return LabelRecord(
        class_name=obj.class_name, truncated=obj.truncated, occluded=obj.occluded,
        alpha=obj.alpha, box2d=tuple(box2d), dimensions=(obj.h, obj.w, obj.l),
        location=(obj.x, obj.y, obj.z), rotation_y=obj.yaw, score=score,
    )


@dataclass
class DepthMap:
    """Metric per-pixel depth with an explicit validity mask.

    Missing pixels are flagged in `valid`, never treated as depth 0.
    """

    depth: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def _read_array(src) -> np.ndarray:
    """Decode an image from bytes or read it from a path, unchanged."""
    if isinstance(src, (bytes, bytearray)):
        buf = np.frombuffer(src, dtype=np.uint8)
        img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    else:
        img = cv2.imread(str(src), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"could not decode image ({type(src).__name__} input)")
    return img


def _encode_png(array: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", array)
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def load_depth(src) -> DepthMap:
    """Load a 16-bit single-channel depth PNG (bytes or path)."""
    raw = _read_array(src)
    if raw.ndim != 2:
        raise FormatError(f"depth map must be single-channel, got shape {raw.shape}")
    return DepthMap(depth=raw.astype(np.float64) / 256.0, valid=raw > 0)


def encode_depth(dm: DepthMap) -> np.ndarray:
    """Quantize a DepthMap back to the 16-bit raw encoding (0 = missing)."""
    raw = np.rint(np.clip(dm.depth * 256.0, 0, 65535)).astype(np.uint16)
    raw[~dm.valid] = 0
    return raw


def write_depth(dm: DepthMap) -> bytes:
    return _encode_png(encode_depth(dm))


def load_mask(src) -> np.ndarray:
    """Load a single-channel instance-id mask (0 = background)."""
    raw = _read_array(src)
    if raw.ndim != 2:
        raise FormatError(f"mask must be single-channel, got shape {raw.shape}")
    return raw.astype(np.int32)


def write_mask(mask: np.ndarray) -> bytes:
    arr = np.asarray(mask)
    if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
        raise FormatError("mask ids must fit in uint16")
    return _encode_png(arr.astype(np.uint16))


def load_image(src) -> np.ndarray:
    """Load an 8-bit color image as RGB (H, W, 3)."""
    raw = _read_array(src)
    if raw.ndim == 2:
        return np.repeat(raw[:, :, None], 3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)


def write_image(img: np.ndarray) -> bytes:
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got shape {arr.shape}")
    return _encode_png(cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))


def save_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)
