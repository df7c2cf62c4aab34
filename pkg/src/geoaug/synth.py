"""Synthetic flat-ground scenes with exactly consistent labels.

Frames rendered here satisfy every geometric invariant by construction:
objects sit on the modeled ground plane, their drawn pixels fill the
projected-corner hull, and the depth map encodes the same geometry. They
back the demos, the test-suite fixtures, and the end-to-end checks.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import kitti_io
from .augment import Sample
from .geometry import (
    CameraIntrinsics,
    GroundModel,
    Object3D,
    alpha_from_yaw,
    clip_box2d,
    horizon_row,
    iou_2d,
    project_box2d,
)

FAR_WALL_M = 120.0


def make_camera(width: int = 1280, height: int = 384, f: float = 700.0) -> CameraIntrinsics:
    return CameraIntrinsics(f=f, c_u=(width - 1) / 2.0, c_v=(height - 1) / 2.0 - 20.0)


def make_ground(K: CameraIntrinsics, y_cam: float = 1.65, pitch: float = 0.0) -> GroundModel:
    return GroundModel(y_cam=y_cam, v_h=horizon_row(K, pitch))


def random_objects(rng: np.random.Generator, count: int, K: CameraIntrinsics,
                   ground: GroundModel, width: int, height: int,
                   z_range: tuple[float, float] = (8.0, 38.0)) -> list[Object3D]:
    """Sample car-like boxes standing on the ground, fully inside the image."""
    objects: list[Object3D] = []
    attempts = 0
    while len(objects) < count and attempts < 200:
        attempts += 1
        z = float(rng.uniform(*z_range))
        w = float(rng.uniform(1.5, 1.9))
        h = float(rng.uniform(1.35, 1.75))
        l = float(rng.uniform(3.4, 4.4))
        yaw = float(rng.uniform(-np.pi, np.pi))
        x = float(rng.uniform(-0.3, 0.3)) * z * (width / 2) / K.f
        obj = Object3D(class_name="Car", w=w, h=h, l=l, x=x, y=ground.y_cam, z=z,
                       yaw=yaw, alpha=alpha_from_yaw(yaw, x, z))
        box = project_box2d(obj, K)
        if box[0] < 4 or box[1] < 4 or box[2] > width - 5 or box[3] > height - 5:
            continue
        if any(iou_2d(box, other.box2d) > 0.05 for other in objects):
            continue
        obj.box2d, obj.truncated = clip_box2d(box, width, height)
        objects.append(obj)
    return objects


def render_scene(K: CameraIntrinsics, ground: GroundModel, objects: list[Object3D],
                 width: int, height: int) -> tuple[np.ndarray, kitti_io.DepthMap, np.ndarray]:
    """Draw a frame, its complete depth map, and its instance mask.

    The ground plane fills rows below the horizon with depth from the
    contact relation; rows above see a far wall. Each object is a textured
    block covering its projected-corner hull at its labeled depth, drawn
    far to near so occlusion comes out right.
    """
    vv, uu = np.mgrid[0:height, 0:width]
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[..., 0] = (40 + 0.10 * uu + 0.20 * vv).astype(np.uint8)
    image[..., 1] = (90 + 0.05 * uu).astype(np.uint8)
    image[..., 2] = (60 + 0.15 * vv).astype(np.uint8)
    below = vv > ground.v_h + 1.0
    checker = (((uu // 16) + (vv // 16)) % 2 == 0) & below
    image[checker] = image[checker] // 2 + 40

    depth = np.full((height, width), FAR_WALL_M, dtype=np.float64)
    rows = vv[below].astype(np.float64)
    depth[below] = np.minimum(K.f * ground.y_cam / (rows - ground.v_h), FAR_WALL_M)

    mask = np.zeros((height, width), dtype=np.int32)
    order = sorted(range(len(objects)), key=lambda i: -objects[i].z)
    for idx in order:
        obj = objects[idx]
        u1, v1, u2, v2 = obj.box2d
        iu1, iv1 = int(np.floor(u1)), int(np.floor(v1))
        iu2, iv2 = int(np.ceil(u2)) + 1, int(np.ceil(v2)) + 1
        base = np.array([60 + (idx * 53) % 160, 60 + (idx * 91) % 160,
                         60 + (idx * 139) % 160], dtype=np.uint8)
        block = image[iv1:iv2, iu1:iu2]
        block[:] = base
        stripe = (np.arange(iv1, iv2) % 8 < 4)
        block[stripe] = np.minimum(block[stripe].astype(int) + 35, 255).astype(np.uint8)
        depth[iv1:iv2, iu1:iu2] = obj.z
        mask[iv1:iv2, iu1:iu2] = idx + 1
    return image, kitti_io.DepthMap(depth=depth, valid=np.ones_like(depth, dtype=bool)), mask


def make_frame(frame_id: str, rng: np.random.Generator, n_objects: int = 3,
               width: int = 1280, height: int = 384, f: float = 700.0,
               y_cam: float = 1.65) -> tuple[Sample, np.ndarray]:
    K = make_camera(width, height, f)
    ground = make_ground(K, y_cam)
    objects = random_objects(rng, n_objects, K, ground, width, height)
    image, depth, mask = render_scene(K, ground, objects, width, height)
    sample = Sample(frame_id=frame_id, image=image, K=K, ground=ground,
                    objects=objects, depth=depth)
    return sample, mask


def synthetic_calib(K: CameraIntrinsics) -> kitti_io.CalibFile:
    p = K.as_projection()
    projections = {name: p.copy() for name in ("P0", "P1", "P2", "P3")}
    r0 = " ".join("%.12e" % x for x in np.eye(3).ravel())
    tr = " ".join("%.12e" % x for x in np.hstack([np.eye(3), [[0], [0], [0]]]).ravel())
    passthrough = {"R0_rect": r0, "Tr_velo_to_cam": tr, "Tr_imu_to_velo": tr}
    order = ["P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam", "Tr_imu_to_velo"]
    return kitti_io.CalibFile(projections, passthrough, order)


DONT_CARE_RECORD = kitti_io.LabelRecord(
    class_name="DontCare", truncated=-1.0, occluded=-1, alpha=-10.0,
    box2d=(12.0, 40.0, 70.0, 64.0), dimensions=(-1.0, -1.0, -1.0),
    location=(-1000.0, -1000.0, -1000.0), rotation_y=-10.0,
)


def write_frame(root, sample: Sample, mask: np.ndarray | None = None,
                calib: kitti_io.CalibFile | None = None) -> None:
    """Write one frame in the KITTI directory layout."""
    root = Path(root)
    for sub in ("image_2", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    fid = sample.frame_id
    kitti_io.save_bytes(root / "image_2" / f"{fid}.png", kitti_io.write_image(sample.image))
    records = [kitti_io.object_to_record(o) for o in sample.objects] + sample.dont_care
    kitti_io.save_bytes(root / "label_2" / f"{fid}.txt", kitti_io.write_labels(records))
    calib = calib or synthetic_calib(sample.K)
    kitti_io.save_bytes(root / "calib" / f"{fid}.txt", kitti_io.write_calib(calib))
    if sample.depth is not None:
        (root / "depth").mkdir(exist_ok=True)
        kitti_io.save_bytes(root / "depth" / f"{fid}.png", kitti_io.write_depth(sample.depth))
    if mask is not None:
        (root / "masks").mkdir(exist_ok=True)
        kitti_io.save_bytes(root / "masks" / f"{fid}.png", kitti_io.write_mask(mask))


def make_mini_dataset(root, n_frames: int = 5, seed: int = 0, n_objects: int = 3,
                      with_dont_care: bool = True) -> list[str]:
    """Generate a small, fully consistent KITTI-layout dataset."""
    rng = np.random.default_rng(seed)
    frame_ids = []
    for i in range(n_frames):
        fid = f"{i:06d}"
        sample, mask = make_frame(fid, rng, n_objects=n_objects)
        if with_dont_care:
            sample.dont_care.append(DONT_CARE_RECORD)
        write_frame(root, sample, mask)
        frame_ids.append(fid)
    return frame_ids
