"""Image-level augmentations that keep 3D labels and depth cues consistent.

Each augmentation maps a Sample to a new Sample whose image, intrinsics,
ground model, and object labels agree: for every surviving object the
apparent-size and ground-contact cues still recover its labeled depth.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import raster
from .geometry import (
    DEFAULT_MIN_DEPTH,
    CameraIntrinsics,
    GroundModel,
    Object3D,
    ObjectTooClose,
    alpha_from_yaw,
    clip_box2d,
    normalize_angle,
    project_box2d,
    scale_transform,
    translate_camera,
)
from .kitti_io import DepthMap, LabelRecord
from .raster import Region


class MissingDepthMap(ValueError):
    """The augmentation needs a per-pixel depth map and the sample has none."""


class AllObjectsDropped(RuntimeError):
    """Every labeled object was removed by the transform."""


@dataclass
class Sample:
    """One frame: image, camera, ground model, labels, optional depth."""

    frame_id: str
    image: np.ndarray
    K: CameraIntrinsics
    ground: GroundModel
    objects: list[Object3D]
    depth: DepthMap | None = None
    dont_care: list[LabelRecord] = field(default_factory=list)

    @property
    def image_size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.image.shape[1], self.image.shape[0]


@dataclass(frozen=True)
class AugmentSpec:
    """One applied transform, for manifests and exact replay."""

    kind: str
    params: dict
    seed: int


def refresh_box2d(obj: Object3D, K: CameraIntrinsics, width: int, height: int) -> Object3D:
    """Recompute an object's 2D box from its 3D box, clipped to the image."""
    box, truncation = clip_box2d(project_box2d(obj, K), width, height)
    return replace(obj, box2d=box, truncated=truncation)


def normalized_depth(obj: Object3D, K: CameraIntrinsics) -> float:
    """Camera-intrinsic-free depth target z / f."""
    return obj.z / K.f


def denormalize_depth(value: float, K: CameraIntrinsics) -> float:
    return value * K.f


def augment_scale(sample: Sample, s: float,
                  min_depth: float = DEFAULT_MIN_DEPTH) -> Sample:
    """Resize the image by 1/s and move every object to depth s * z.

    The intrinsics stay fixed (the resize is treated as the whole scene
    moving); dimensions, yaw, and alpha are unchanged. The horizon row
    scales with the image, the camera height does not.
    """
    r = 1.0 / s
    image = raster.resize(sample.image, r)
    width, height = image.shape[1], image.shape[0]
    objects = []
    for obj in sample.objects:
        new_center = scale_transform(obj.center, s, sample.K)
        if new_center[2] <= min_depth:
            raise ObjectTooClose(
                f"scale {s} puts object at z={new_center[2]:.2f} m (min {min_depth})")
        moved = obj.moved_to(*new_center)
        objects.append(refresh_box2d(moved, sample.K, width, height))
    depth = None
    if sample.depth is not None:
        raw = raster._resize_nearest(sample.depth.depth, (width, height)) * s
        valid = raster._resize_nearest(sample.depth.valid.astype(np.uint8),
                                       (width, height)).astype(bool)
        depth = DepthMap(depth=raw, valid=valid)
    dont_care = [replace(dc, box2d=tuple(r * np.asarray(dc.box2d)))
                 for dc in sample.dont_care]
    ground = GroundModel(y_cam=sample.ground.y_cam, v_h=sample.ground.v_h * r)
    return Sample(frame_id=sample.frame_id, image=image, K=sample.K, ground=ground,
                  objects=objects, depth=depth, dont_care=dont_care)


def sample_crop_region(rng: np.random.Generator, width: int, height: int,
                       crop_w: int, crop_h: int) -> Region:
    """Uniformly sample a crop window, clamped to the image extent."""
    w = min(crop_w, width)
    h = min(crop_h, height)
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return Region(x=x, y=y, w=w, h=h)


def _area(box) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def augment_crop(sample: Sample, region: Region,
                 drop_area_fraction: float = 0.25) -> Sample:
    """Crop columns, zero-pad rows, and keep every 3D label untouched.

    The horizontal crop becomes a principal-point shift; retained pixels
    and surviving boxes keep their row indices so the vertical-position cue
    is preserved. Objects keeping less than `drop_area_fraction` of their
    2D box area inside the retained region are dropped.
    """
    width, height = sample.image_size
    region.check_inside(width, height)
    image = raster.crop_then_pad(sample.image, region)
    K = CameraIntrinsics(f=sample.K.f, c_u=sample.K.c_u - region.x, c_v=sample.K.c_v)

    def shift_and_clip(box2d):
        u1, v1, u2, v2 = box2d
        shifted = (u1 - region.x, v1, u2 - region.x, v2)
        retained = (max(shifted[0], 0.0), max(v1, float(region.y)),
                    min(shifted[2], region.w - 1.0),
                    min(v2, region.y + region.h - 1.0))
        visible = _area(retained) / _area(shifted) if _area(shifted) > 0 else 0.0
        # Row indices are preserved on purpose: only columns are clipped.
        kept_box = (max(shifted[0], 0.0), v1, min(shifted[2], region.w - 1.0), v2)
        return kept_box, visible

    objects = []
    for obj in sample.objects:
        box2d = obj.box2d if obj.box2d is not None \
            else clip_box2d(project_box2d(obj, sample.K), width, height)[0]
        kept_box, visible = shift_and_clip(box2d)
        if visible < drop_area_fraction:
            continue
        truncated = min(1.0, 1.0 - (1.0 - obj.truncated) * visible)
        objects.append(replace(obj, box2d=kept_box, truncated=truncated))
    depth = None
    if sample.depth is not None:
        depth = DepthMap(depth=raster.crop_then_pad(sample.depth.depth, region),
                         valid=raster.crop_then_pad(sample.depth.valid, region))
    dont_care = []
    for dc in sample.dont_care:
        kept_box, visible = shift_and_clip(dc.box2d)
        if visible > 0:
            dont_care.append(replace(dc, box2d=kept_box))
    return Sample(frame_id=sample.frame_id, image=image, K=K, ground=sample.ground,
                  objects=objects, depth=depth, dont_care=dont_care)


def augment_move_camera(sample: Sample, d: float,
                        min_depth: float = DEFAULT_MIN_DEPTH) -> Sample:
    """Move the camera along Z: re-render via forward warping, shift depths by d.

    Objects whose new depth falls at or below min_depth are dropped;
    DontCare regions carry no depth and are dropped as well.
    """
    if sample.depth is None:
        raise MissingDepthMap(f"frame {sample.frame_id}: moving the camera needs a depth map")
    warp = raster.forward_warp(sample.image, sample.depth, sample.K, d, min_depth)
    width, height = sample.image_size
    objects = []
    for obj in sample.objects:
        try:
            new_center = translate_camera(obj.center, d, min_depth)
        except ObjectTooClose:
            continue
        moved = obj.moved_to(*new_center)
        objects.append(refresh_box2d(moved, sample.K, width, height))
    if sample.objects and not objects:
        raise AllObjectsDropped(f"frame {sample.frame_id}: move d={d} dropped every object")
    return Sample(frame_id=sample.frame_id, image=warp.image, K=sample.K,
                  ground=sample.ground, objects=objects, depth=warp.depth, dont_care=[])


def flip_horizontal(sample: Sample) -> Sample:
    """Mirror the image and labels about the vertical axis.

    Keeps the intrinsics fixed and moves x instead, so projection stays
    exact: the projected center of a flipped object is W - 1 - u.
    """
    width, height = sample.image_size
    image = np.ascontiguousarray(sample.image[:, ::-1])

    def flip_box(box2d):
        u1, v1, u2, v2 = box2d
        return (width - 1.0 - u2, v1, width - 1.0 - u1, v2)

    objects = []
    for obj in sample.objects:
        x = (width - 1.0 - 2.0 * sample.K.c_u) * obj.z / sample.K.f - obj.x
        yaw = float(normalize_angle(np.pi - obj.yaw))
        flipped = replace(obj, x=x, yaw=yaw, alpha=alpha_from_yaw(yaw, x, obj.z))
        if obj.box2d is not None:
            flipped = replace(flipped, box2d=flip_box(obj.box2d))
        objects.append(flipped)
    depth = None
    if sample.depth is not None:
        depth = DepthMap(depth=np.ascontiguousarray(sample.depth.depth[:, ::-1]),
                         valid=np.ascontiguousarray(sample.depth.valid[:, ::-1]))
    dont_care = [replace(dc, box2d=flip_box(dc.box2d)) for dc in sample.dont_care]
    return Sample(frame_id=sample.frame_id, image=image, K=sample.K,
                  ground=sample.ground, objects=objects, depth=depth,
                  dont_care=dont_care)
