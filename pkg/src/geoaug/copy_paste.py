"""Instance database construction and geometry-guided copy-paste.

Pasting relocates a segmented instance to a sampled depth in a target
frame. In the consistent mode both depth cues (apparent size and ground
contact) are re-derived for the new depth; the size-only and pos-only
modes deliberately update just one cue and are used to probe detectors.
"""
from __future__ import annotations

import ast
import enum
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kitti_io, raster
from .augment import Sample, refresh_box2d
from .config import AugmentConfig
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    GroundModel,
    Object3D,
    apparent_height_at_depth,
    depth_from_position,
    depth_from_size,
    iou_2d,
    project,
    vertical_contact_at_depth,
)

DB_FORMAT_VERSION = 1


class PasteError(RuntimeError):
    pass


class PasteMode(enum.Enum):
    CONSISTENT = "consistent"
    SIZE_ONLY = "size-only"
    POS_ONLY = "pos-only"


@dataclass
class InstancePatch:
    """Cropped object pixels plus the source geometry needed for pasting."""

    pixels: np.ndarray
    mask: np.ndarray
    obj: Object3D
    K: CameraIntrinsics
    ground: GroundModel
    contact: tuple[float, float]  # ground-contact pixel in the patch frame
    origin: tuple[int, int]       # patch top-left in the source image
    frame_id: str = ""

    @property
    def source_contact(self) -> tuple[float, float]:
        """Contact pixel in source-image coordinates."""
        return (self.contact[0] + self.origin[0], self.contact[1] + self.origin[1])


@dataclass
class InstanceDB:
    patches: list[InstancePatch]
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class AdmissionStats:
    """Per-filter admission counters from building an instance database."""

    admitted: int = 0
    rejected_class: int = 0
    rejected_truncated: int = 0
    rejected_occluded: int = 0
    rejected_height: int = 0
    rejected_horizon: int = 0
    rejected_mask: int = 0

    def as_text(self) -> str:
        lines = [f"{name} = {value}" for name, value in vars(self).items()]
        return "\n".join(lines) + "\n"


def implied_horizon(obj: Object3D, K: CameraIntrinsics, ground: GroundModel) -> float:
    """Horizon row implied by an object's contact row and labeled depth.

    On flat ground matching the model this equals ground.v_h; the residual
    grows as f * dy / z when the local ground height is off by dy.
    """
    contact_row = project(obj.center, K)[1]
    return float(contact_row - K.f * ground.y_cam / obj.z)


def extract_patch(sample: Sample, mask: np.ndarray, instance_id: int,
                  obj: Object3D) -> InstancePatch | None:
    """Cut one instance out of a frame; None if the mask is empty."""
    selected = mask == instance_id
    if not selected.any():
        return None
    rows = np.nonzero(selected.any(axis=1))[0]
    cols = np.nonzero(selected.any(axis=0))[0]
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    contact_uv = project(obj.center, sample.K)
    contact = (float(contact_uv[0]) - x0, float(contact_uv[1]) - y0)
    if not (-2 <= contact[0] <= x1 - x0 + 2 and -2 <= contact[1] <= y1 - y0 + 2):
        return None
    contact = (min(max(contact[0], 0.0), x1 - x0 - 1.0),
               min(max(contact[1], 0.0), y1 - y0 - 1.0))
    return InstancePatch(
        pixels=sample.image[y0:y1, x0:x1].copy(),
        mask=selected[y0:y1, x0:x1].copy(),
        obj=replace(obj), K=sample.K, ground=sample.ground,
        contact=contact, origin=(x0, y0), frame_id=sample.frame_id,
    )


def build_instance_db(frames: list[tuple[Sample, np.ndarray]],
                      config: AugmentConfig | None = None,
                      ) -> tuple[InstanceDB, AdmissionStats]:
    """Collect pasteable instances from (sample, instance-mask) pairs.

    Instance id k in a mask corresponds to the k-th labeled object
    (1-based, DontCare lines excluded). Admission requires low truncation,
    full visibility, a minimum pixel height, and a flat-ground check: the
    horizon row implied by the object's contact point and depth must agree
    with the frame's ground model.
    """
    config = config or AugmentConfig()
    classes = set(config.class_list())
    stats = AdmissionStats()
    patches = []
    for sample, mask in frames:
        for index, obj in enumerate(sample.objects):
            if obj.class_name not in classes:
                stats.rejected_class += 1
                continue
            if obj.truncated > config.max_truncation:
                stats.rejected_truncated += 1
                continue
            if obj.occluded > config.max_occlusion:
                stats.rejected_occluded += 1
                continue
            box2d = obj.box2d or (0.0, 0.0, 0.0, 0.0)
            if box2d[3] - box2d[1] < config.min_patch_height_px:
                stats.rejected_height += 1
                continue
            if abs(implied_horizon(obj, sample.K, sample.ground) - sample.ground.v_h) \
                    > config.vp_filter_px:
                stats.rejected_horizon += 1
                continue
            patch = extract_patch(sample, mask, index + 1, obj)
            if patch is None:
                stats.rejected_mask += 1
                continue
            patches.append(patch)
            stats.admitted += 1
    if not patches:
        warnings.warn("no admissible instances: the database is empty", stacklevel=2)
    return InstanceDB(patches=patches, meta={"version": str(DB_FORMAT_VERSION)}), stats


@dataclass
class PastePlan:
    """Everything needed to composite one instance and label the result.

    `obj` carries the geometry-consistent labels at the planned depth.
    For the size-only and pos-only modes the rendered evidence diverges
    from those labels on purpose; `expected_z_size` and `expected_z_pos`
    record the depth each cue actually encodes, and `placed_box2d` is the
    rendered footprint.
    """

    obj: Object3D
    anchor: tuple[float, float]
    scale: float
    mode: PasteMode
    placed_box2d: tuple[float, float, float, float]
    expected_z_size: float
    expected_z_pos: float
    placed_height: float
    expected_height: float

    @property
    def depth(self) -> float:
        return self.obj.z


def plan_paste(patch: InstancePatch, target: Sample, depth: float,
               mode: PasteMode = PasteMode.CONSISTENT) -> PastePlan:
    """Derive the paste geometry for one instance at a sampled depth.

    Yaw, alpha, and dimensions are copied; x scales with depth so the
    viewing ray (and therefore alpha) is preserved; y comes from the
    target's ground contact at the new depth. The patch resize factor
    makes the apparent size match the new depth exactly.
    """
    if not depth > 0:
        raise PasteError(f"paste depth must be positive, got {depth}")
    src = patch.obj
    f_t, f_s = target.K.f, patch.K.f
    width, height = target.image_size

    x_hat = src.x * depth / src.z
    v_contact = vertical_contact_at_depth(f_t, target.ground, depth)
    y_hat = (v_contact - target.K.c_v) * depth / f_t
    obj = replace(src, x=x_hat, y=y_hat, z=depth,
                  alpha=src.alpha, truncated=0.0, occluded=0)

    scale_for_size = (f_t * src.z) / (f_s * depth)
    u_anchor = f_t * x_hat / depth + target.K.c_u
    if mode is PasteMode.CONSISTENT:
        anchor_v, scale = v_contact, scale_for_size
    elif mode is PasteMode.SIZE_ONLY:
        anchor_v, scale = patch.source_contact[1], scale_for_size
    else:
        anchor_v, scale = v_contact, f_t / f_s

    # Depths the two cues encode for the placement actually rendered.
    h_src_cue = apparent_height_at_depth(f_s, src.h, src.z)
    expected_z_size = depth_from_size(f_t, src.h, scale * h_src_cue)
    expected_z_pos = depth_from_position(f_t, target.ground, anchor_v)

    # Footprint of the scaled patch anchored at (u_anchor, anchor_v).
    ph, pw = patch.mask.shape
    left = u_anchor - patch.contact[0] * scale
    top = anchor_v - patch.contact[1] * scale
    placed = (max(left, 0.0), max(top, 0.0),
              min(left + pw * scale, width - 1.0), min(top + ph * scale, height - 1.0))

    # Ground mismatch test: transport the source's model-implied top row to
    # the target depth about the horizon; with matching ground models the
    # placed height equals f * h / z exactly.
    expected_height = apparent_height_at_depth(f_t, src.h, depth)
    placed_height = f_t * (target.ground.y_cam - patch.ground.y_cam + src.h) / depth

    if mode is PasteMode.CONSISTENT:
        obj = refresh_box2d(obj, target.K, width, height)
    else:
        obj = replace(obj, box2d=placed)
    return PastePlan(obj=obj, anchor=(float(u_anchor), float(anchor_v)), scale=float(scale),
                     mode=mode, placed_box2d=placed,
                     expected_z_size=float(expected_z_size),
                     expected_z_pos=float(expected_z_pos),
                     placed_height=float(placed_height),
                     expected_height=float(expected_height))


def consistency_check(plan: PastePlan, tol: float = 0.1) -> bool:
    """Accept a plan when its placed height matches the size relation.

    The relative residual |placed - f * h / z| / (f * h / z) exceeds tol
    when the source and target ground models disagree (or the source broke
    the flat-ground assumption), which is exactly when a paste cannot keep
    both depth cues coherent.
    """
    if not np.isfinite(tol):
        return True
    residual = abs(plan.placed_height - plan.expected_height) / plan.expected_height
    return residual <= tol


def cue_residuals(plan: PastePlan) -> tuple[float, float]:
    """Relative deviation of each cue-implied depth from the planned depth."""
    z = plan.depth
    return (abs(plan.expected_z_size - z) / z, abs(plan.expected_z_pos - z) / z)


def apply_paste(target: Sample, plan: PastePlan, patch: InstancePatch,
                overlap_iou_max: float = 0.3) -> Sample:
    """Composite one planned paste and append its labels.

    Rejects placements overlapping an existing 2D box at IoU above
    `overlap_iou_max`. Consistent-mode objects join the label list; the
    violated modes keep their expected values in the plan only, so the
    written labels never carry geometry the image contradicts.
    """
    for existing in target.objects:
        if existing.box2d is not None and \
                iou_2d(plan.placed_box2d, existing.box2d) > overlap_iou_max:
            raise PasteError(
                f"placement overlaps {existing.class_name} box at IoU > {overlap_iou_max}")
    image = raster.composite_patch(target.image, patch.pixels, patch.mask,
                                   patch.contact, plan.anchor, plan.scale)
    objects = list(target.objects)
    if plan.mode is PasteMode.CONSISTENT:
        objects.append(plan.obj)
    return Sample(frame_id=target.frame_id, image=image, K=target.K,
                  ground=target.ground, objects=objects, depth=target.depth,
                  dont_care=list(target.dont_care))


def paste_instances(target: Sample, db: InstanceDB, rng: np.random.Generator,
                    config: AugmentConfig | None = None,
                    mode: PasteMode = PasteMode.CONSISTENT,
                    count: int | None = None,
                    max_attempts: int = 50) -> tuple[Sample, list[PastePlan]]:
    """Paste up to `count` database instances into a frame.

    Samples a patch and a depth per attempt, rejects plans that fail the
    height-consistency check, land off-image, or stack onto existing boxes,
    then composites the accepted plans far to near.
    """
    config = config or AugmentConfig()
    if count is None:
        count = config.paste_instances
    if not db.patches:
        raise PasteError("instance database is empty")
    width, height = target.image_size
    accepted: list[tuple[PastePlan, InstancePatch]] = []
    attempts = 0
    lo = max(config.paste_depth_min, config.min_depth + 1e-6)
    while len(accepted) < count and attempts < max_attempts:
        attempts += 1
        patch = db.patches[int(rng.integers(0, len(db.patches)))]
        depth = float(rng.uniform(lo, config.paste_depth_max))
        try:
            plan = plan_paste(patch, target, depth, mode)
        except GeometryError:
            continue  # e.g. a box corner behind the camera at a near depth
        if not consistency_check(plan, config.paste_tol):
            continue
        if not (0 <= plan.anchor[0] < width and 0 <= plan.anchor[1] < height):
            continue
        boxes = [p.placed_box2d for p, _ in accepted] + \
                [o.box2d for o in target.objects if o.box2d is not None]
        if any(iou_2d(plan.placed_box2d, b) > config.overlap_iou_max for b in boxes):
            continue
        accepted.append((plan, patch))

    result = target
    plans = []
    for plan, patch in sorted(accepted, key=lambda pair: -pair[0].depth):
        result = apply_paste(result, plan, patch, config.overlap_iou_max)
        plans.append(plan)
    return result, plans


def save_instance_db(db: InstanceDB, root) -> None:
    """Persist a database as a directory of patch/mask images plus metadata.

    Layout: db.txt (versioned manifest), then per instance NNNNN.png,
    NNNNN_mask.png, and NNNNN_meta.txt with key = value geometry fields.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"version = {DB_FORMAT_VERSION}", f"count = {len(db.patches)}"]
    (root / "db.txt").write_text("\n".join(lines) + "\n")
    for i, patch in enumerate(db.patches):
        stem = f"{i:05d}"
        kitti_io.save_bytes(root / f"{stem}.png", kitti_io.write_image(patch.pixels))
        kitti_io.save_bytes(root / f"{stem}_mask.png",
                            kitti_io.write_mask(patch.mask.astype(np.uint16)))
        obj = patch.obj
        meta = {
            "frame_id": patch.frame_id, "class_name": obj.class_name,
            "w": obj.w, "h": obj.h, "l": obj.l,
            "x": obj.x, "y": obj.y, "z": obj.z,
            "yaw": obj.yaw, "alpha": obj.alpha,
            "box2d": None if obj.box2d is None else tuple(obj.box2d),
            "truncated": obj.truncated, "occluded": obj.occluded,
            "f": patch.K.f, "c_u": patch.K.c_u, "c_v": patch.K.c_v,
            "y_cam": patch.ground.y_cam, "v_h": patch.ground.v_h,
            "contact_u": patch.contact[0], "contact_v": patch.contact[1],
            "origin_x": patch.origin[0], "origin_y": patch.origin[1],
        }
        text = "\n".join(f"{k} = {v!r}" for k, v in meta.items())
        (root / f"{stem}_meta.txt").write_text(text + "\n")


def load_instance_db(root) -> InstanceDB:
    root = Path(root)
    manifest = root / "db.txt"
    if not manifest.exists():
        raise PasteError(f"{root} is not an instance database (db.txt missing)")
    info = dict(line.split(" = ", 1) for line in manifest.read_text().splitlines() if line)
    if int(info.get("version", -1)) != DB_FORMAT_VERSION:
        raise PasteError(f"unsupported database version {info.get('version')}")
    patches = []
    for i in range(int(info["count"])):
        stem = f"{i:05d}"
        meta = {}
        for line in (root / f"{stem}_meta.txt").read_text().splitlines():
            if line:
                key, value = line.split(" = ", 1)
                meta[key] = ast.literal_eval(value)
        obj = Object3D(
            class_name=meta["class_name"], w=meta["w"], h=meta["h"], l=meta["l"],
            x=meta["x"], y=meta["y"], z=meta["z"], yaw=meta["yaw"], alpha=meta["alpha"],
            box2d=meta["box2d"], truncated=meta["truncated"], occluded=meta["occluded"],
        )
        patches.append(InstancePatch(
            pixels=kitti_io.load_image(root / f"{stem}.png"),
            mask=kitti_io.load_mask(root / f"{stem}_mask.png") > 0,
            obj=obj,
            K=CameraIntrinsics(f=meta["f"], c_u=meta["c_u"], c_v=meta["c_v"]),
            ground=GroundModel(y_cam=meta["y_cam"], v_h=meta["v_h"]),
            contact=(meta["contact_u"], meta["contact_v"]),
            origin=(meta["origin_x"], meta["origin_y"]),
            frame_id=meta["frame_id"],
        ))
    return InstanceDB(patches=patches, meta=info)
