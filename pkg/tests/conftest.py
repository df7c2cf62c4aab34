import numpy as np
import pytest

from geoaug.geometry import (
    CameraIntrinsics,
    GroundModel,
    Object3D,
    alpha_from_yaw,
    degenerate_box_height,
    depth_from_size,
    project,
    vertical_contact_at_depth,
)


@pytest.fixture
def cam() -> CameraIntrinsics:
    return CameraIntrinsics(f=700.0, c_u=600.0, c_v=180.0)


@pytest.fixture
def ground() -> GroundModel:
    # Zero pitch: the horizon sits on the principal row.
    return GroundModel(y_cam=1.65, v_h=180.0)


def make_car(x=2.0, z=20.0, y=1.65, w=1.7, h=1.5, l=4.0, yaw=0.3,
             class_name="Car") -> Object3D:
    return Object3D(class_name=class_name, w=w, h=h, l=l, x=x, y=y, z=z,
                    yaw=yaw, alpha=alpha_from_yaw(yaw, x, z))


def cue_residuals_analytic(obj: Object3D, K: CameraIntrinsics,
                           ground: GroundModel) -> tuple[float, float]:
    """(relative size-cue depth error, contact-row error in pixels).

    Evaluated from the labels alone, independent of any raster content.
    """
    size_depth = depth_from_size(K.f, obj.h, degenerate_box_height(obj, K))
    row = float(project(obj.center, K)[1])
    expected_row = vertical_contact_at_depth(K.f, ground, obj.z)
    return abs(size_depth - obj.z) / obj.z, abs(row - expected_row)
