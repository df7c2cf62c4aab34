import numpy as np
import pytest

from geoaug.geometry import (
    AboveHorizon,
    BehindCamera,
    CameraIntrinsics,
    DegenerateCue,
    GeometryError,
    GroundModel,
    ObjectTooClose,
    apparent_height_at_depth,
    backproject,
    clip_box2d,
    corners_3d,
    degenerate_box_height,
    depth_from_position,
    depth_from_size,
    horizon_row,
    iou_2d,
    normalize_angle,
    project,
    project_box2d,
    rotation_y,
    scale_transform,
    translate_camera,
    vertical_contact_at_depth,
)

from conftest import make_car


class TestProject:
    def test_principal_ray(self, cam):
        assert np.allclose(project([0.0, 0.0, 10.0], cam), [600.0, 180.0])

    def test_offset_point(self, cam):
        # u = 700 * 1 / 10 + 600
        assert np.allclose(project([1.0, 0.0, 10.0], cam), [670.0, 180.0])

    def test_behind_camera(self, cam):
        with pytest.raises(BehindCamera):
            project([0.0, 0.0, -1.0], cam)

    def test_backproject_principal(self, cam):
        assert np.allclose(backproject([600.0, 180.0], 10.0, cam), [0.0, 0.0, 10.0])

    def test_backproject_zero_depth(self, cam):
        with pytest.raises(BehindCamera):
            backproject([600.0, 180.0], 0.0, cam)

    def test_round_trip_random(self, cam):
        rng = np.random.default_rng(1)
        pixels = rng.uniform([0, 0], [1280, 384], size=(10_000, 2))
        z = rng.uniform(1.0, 80.0, size=10_000)
        points = backproject(pixels, z, cam)
        back = project(points, cam)
        rel = np.abs(back - pixels) / np.maximum(np.abs(pixels), 1.0)
        assert rel.max() < 1e-9


class TestCorners:
    def test_hand_expanded(self):
        # Direct expansion of the corner template at yaw 0: x spans +-l/2,
        # z spans +-w/2, bottom face at y, top face at y - h.
        obj = make_car(x=0.0, z=10.0, y=1.65, w=2.0, h=1.5, l=4.0, yaw=0.0)
        corners = corners_3d(obj)
        assert sorted(set(np.round(corners[:, 0], 9))) == [-2.0, 2.0]
        assert sorted(set(np.round(corners[:, 1], 9))) == [0.15, 1.65]
        assert sorted(set(np.round(corners[:, 2], 9))) == [9.0, 11.0]
        assert np.allclose(corners[:4, 1], 1.65)  # bottom face first

    def test_quarter_turn_swaps_extents(self):
        obj = make_car(x=0.0, z=10.0, w=2.0, h=1.5, l=4.0, yaw=np.pi / 2)
        corners = corners_3d(obj)
        assert np.allclose(sorted(set(np.round(corners[:, 0], 9))), [-1.0, 1.0])
        assert np.allclose(sorted(set(np.round(corners[:, 2], 9))), [8.0, 12.0])

    def test_zero_height_collapses(self):
        obj = make_car(h=0.0)
        corners = corners_3d(obj)
        assert np.allclose(corners[:4], corners[4:])

    def test_translation_equivariance(self):
        obj = make_car(x=1.0, z=15.0)
        moved = obj.moved_to(obj.x + 2.0, obj.y - 0.5, obj.z + 3.0)
        shift = np.array([2.0, -0.5, 3.0])
        assert np.allclose(corners_3d(moved), corners_3d(obj) + shift)

    def test_half_turn_maps_corners_onto_themselves(self):
        obj = make_car(yaw=0.7)
        flipped = corners_3d(make_car(yaw=normalize_angle(0.7 + np.pi)))
        original = corners_3d(obj)
        a = sorted(map(tuple, np.round(original, 9)))
        b = sorted(map(tuple, np.round(flipped, 9)))
        assert a == b

    def test_matches_rotation_matrix_oracle(self):
        # Independent corner construction: rotate each template corner by hand.
        obj = make_car(x=1.2, z=18.0, y=1.4, w=1.8, h=1.6, l=4.2, yaw=0.55)
        template = [(obj.l / 2, 0, obj.w / 2), (obj.l / 2, 0, -obj.w / 2),
                    (-obj.l / 2, 0, -obj.w / 2), (-obj.l / 2, 0, obj.w / 2),
                    (obj.l / 2, -obj.h, obj.w / 2), (obj.l / 2, -obj.h, -obj.w / 2),
                    (-obj.l / 2, -obj.h, -obj.w / 2), (-obj.l / 2, -obj.h, obj.w / 2)]
        expected = np.array([rotation_y(obj.yaw) @ c for c in template]) + obj.center
        assert np.allclose(corners_3d(obj), expected)


class TestBox2D:
    def test_degenerate_box_height(self, cam):
        obj = make_car(x=0.0, z=15.0, w=0.0, l=0.0, h=1.5, yaw=0.0)
        _, v1, _, v2 = project_box2d(obj, cam)
        assert v2 - v1 == pytest.approx(70.0, abs=1e-12)  # f * h / z

    def test_degenerate_height_halves_with_depth(self, cam):
        near = make_car(x=0.0, z=15.0, w=0.0, l=0.0, h=1.5)
        far = make_car(x=0.0, z=30.0, w=0.0, l=0.0, h=1.5)
        h_near = degenerate_box_height(near, cam)
        h_far = degenerate_box_height(far, cam)
        assert abs(h_far - h_near / 2) < 1e-9

    def test_full_hull_contains_degenerate(self, cam):
        full = make_car(x=0.0, z=15.0, w=2.0, h=1.5, l=4.0, yaw=0.4)
        proxy = make_car(x=0.0, z=15.0, w=0.0, l=0.0, h=1.5, yaw=0.4)
        fb = project_box2d(full, cam)
        pb = project_box2d(proxy, cam)
        assert fb[0] < pb[0] and fb[1] < pb[1] and fb[2] > pb[2] and fb[3] > pb[3]

    def test_corner_behind_camera(self, cam):
        # Length along the optical axis: the near corner crosses z = 0.
        obj = make_car(x=0.0, z=1.0, l=4.0, yaw=np.pi / 2)
        with pytest.raises(BehindCamera):
            project_box2d(obj, cam)

    def test_clip_box2d(self):
        box, trunc = clip_box2d((-10.0, 0.0, 10.0, 10.0), 100, 100)
        assert box == (0.0, 0.0, 10.0, 10.0)
        assert trunc == pytest.approx(0.5)
        box, trunc = clip_box2d((5.0, 5.0, 20.0, 20.0), 100, 100)
        assert trunc == 0.0


class TestDepthCues:
    def test_depth_from_size_unit(self):
        assert depth_from_size(1.0, 1.0, 1.0) == 1.0

    def test_depth_from_size_matches_projection(self, cam):
        # Agrees with the projected height of a degenerate box at z = 15.
        obj = make_car(x=0.0, z=15.0, w=0.0, l=0.0, h=1.5)
        h = degenerate_box_height(obj, cam)
        assert depth_from_size(cam.f, 1.5, h) == pytest.approx(15.0, abs=1e-9)

    def test_depth_from_size_degenerate(self):
        with pytest.raises(DegenerateCue):
            depth_from_size(700.0, 1.5, 0.0)

    def test_depth_from_position(self, ground):
        assert depth_from_position(700.0, ground, 180.0 + 77.0) == pytest.approx(
            700.0 * 1.65 / 77.0)

    def test_horizon_singularity(self, ground):
        with pytest.raises(AboveHorizon):
            depth_from_position(700.0, ground, ground.v_h)

    def test_position_round_trip(self, ground):
        rng = np.random.default_rng(2)
        z = rng.uniform(1.0, 80.0, size=1000)
        rows = vertical_contact_at_depth(700.0, ground, z)
        back = depth_from_position(700.0, ground, rows)
        assert np.max(np.abs(back - z) / z) < 1e-9

    def test_apparent_height(self):
        assert apparent_height_at_depth(700.0, 1.5, 15.0) == pytest.approx(70.0)

    def test_apparent_height_z_identity(self):
        rng = np.random.default_rng(3)
        z = rng.uniform(1.0, 80.0, size=100)
        h = apparent_height_at_depth(700.0, 1.5, z)
        assert np.allclose(h * z, 700.0 * 1.5)

    def test_contact_row_approaches_horizon(self, ground):
        rows = vertical_contact_at_depth(700.0, ground, np.array([5.0, 50.0, 500.0, 5e4]))
        assert np.all(np.diff(rows) < 0) and np.all(rows > ground.v_h)


class TestTransforms:
    def test_scale_identity(self, cam):
        p = np.array([1.0, 2.0, 10.0])
        assert np.allclose(scale_transform(p, 1.0, cam), p)

    def test_scale_hand_example(self):
        K = CameraIntrinsics(f=1000.0, c_u=500.0, c_v=300.0)  # c_u/f=0.5, c_v/f=0.3
        out = scale_transform([0.0, 0.0, 10.0], 0.5, K)
        assert np.allclose(out, [2.5, 1.5, 5.0])

    def test_scale_projection_coherence(self, cam):
        rng = np.random.default_rng(4)
        points = np.stack([rng.uniform(-20, 20, 500), rng.uniform(-5, 5, 500),
                           rng.uniform(2, 80, 500)], axis=-1)
        for s in rng.uniform(0.8, 1.2, size=8):
            moved = scale_transform(points, s, cam)
            expected = project(points, cam) / s
            err = np.abs(project(moved, cam) - expected) / np.maximum(np.abs(expected), 1.0)
            assert err.max() < 1e-9

    def test_scale_composition(self, cam):
        p = np.array([3.0, 1.0, 25.0])
        once = scale_transform(scale_transform(p, 0.9, cam), 1.15, cam)
        assert np.allclose(once, scale_transform(p, 0.9 * 1.15, cam), atol=1e-12)

    def test_scale_rejects_nonpositive(self, cam):
        with pytest.raises(GeometryError):
            scale_transform([0, 0, 10.0], 0.0, cam)

    def test_translate_identity(self):
        p = np.array([1.0, 1.0, 10.0])
        assert np.allclose(translate_camera(p, 0.0), p)

    def test_translate_offset(self):
        assert np.allclose(translate_camera([1.0, 1.0, 10.0], 5.0), [1.0, 1.0, 15.0])

    def test_translate_too_close(self):
        with pytest.raises(ObjectTooClose):
            translate_camera([0.0, 0.0, 1.0], -1.0)

    def test_horizon_row_zero_pitch(self, cam):
        assert horizon_row(cam, 0.0) == cam.c_v

    def test_horizon_row_pitch_down(self, cam):
        assert horizon_row(cam, 0.1) > cam.c_v

    def test_horizon_consistent_with_ground_projection(self, cam):
        ground = GroundModel(y_cam=1.65, v_h=horizon_row(cam, 0.0))
        z = 17.0
        row = project([0.0, ground.y_cam, z], cam)[1]
        assert depth_from_position(cam.f, ground, row) == pytest.approx(z, abs=1e-9)


class TestMisc:
    def test_normalize_angle_range(self):
        rng = np.random.default_rng(5)
        angles = normalize_angle(rng.uniform(-30, 30, size=1000))
        assert np.all(angles >= -np.pi) and np.all(angles < np.pi)
        assert normalize_angle(0.3) == pytest.approx(0.3)

    def test_iou_2d(self):
        a = (0.0, 0.0, 10.0, 10.0)
        assert iou_2d(a, a) == pytest.approx(1.0)
        assert iou_2d(a, (20.0, 20.0, 30.0, 30.0)) == 0.0
        assert iou_2d(a, (5.0, 0.0, 15.0, 10.0)) == pytest.approx(50.0 / 150.0)

    def test_intrinsics_validation(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(f=-1.0, c_u=0.0, c_v=0.0)
        with pytest.raises(GeometryError):
            GroundModel(y_cam=0.0, v_h=100.0)
