"""Geometry-consistent augmentation and diagnosis for monocular 3D detection data.

The package splits into pinhole geometry (`geometry`), KITTI file formats
(`kitti_io`), pixel operations (`raster`), the image-level augmentations
(`augment`), instance copy-paste (`copy_paste`), detector diagnosis
(`diagnose`), synthetic scenes (`synth`), and the batch CLI (`cli`).
"""

from .augment import (
    AugmentSpec,
    Sample,
    augment_crop,
    augment_move_camera,
    augment_scale,
    flip_horizontal,
    normalized_depth,
    denormalize_depth,
)
from .config import AugmentConfig
from .copy_paste import (
    InstanceDB,
    InstancePatch,
    PasteMode,
    PastePlan,
    apply_paste,
    build_instance_db,
    consistency_check,
    paste_instances,
    plan_paste,
)
from .diagnose import (
    DiagnosisReport,
    ManipulationRecord,
    Prediction,
    ap40,
    bev_iou,
    component_swap_eval,
    depth_deviation_report,
    generate_suite,
    iou_3d,
    match,
)
from .geometry import (
    CameraIntrinsics,
    GroundModel,
    Object3D,
    backproject,
    corners_3d,
    depth_from_position,
    depth_from_size,
    apparent_height_at_depth,
    vertical_contact_at_depth,
    horizon_row,
    project,
    project_box2d,
    scale_transform,
    translate_camera,
)
from .kitti_io import (
    CalibFile,
    DepthMap,
    LabelRecord,
    load_depth,
    load_image,
    load_mask,
    parse_calib,
    parse_labels,
    write_calib,
    write_labels,
)
from .raster import Region, composite_patch, crop_then_pad, forward_warp, resize

__version__ = "0.1.0"
