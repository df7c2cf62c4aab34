import numpy as np
import pytest

from geoaug import synth
from geoaug.augment import (
    AllObjectsDropped,
    MissingDepthMap,
    Sample,
    augment_crop,
    augment_move_camera,
    augment_scale,
    denormalize_depth,
    flip_horizontal,
    normalized_depth,
    sample_crop_region,
)
from geoaug.geometry import (
    CameraIntrinsics,
    GroundModel,
    ObjectTooClose,
    degenerate_box_height,
    normalize_angle,
    project,
)
from geoaug.raster import Region

from conftest import cue_residuals_analytic, make_car


@pytest.fixture
def scene():
    rng = np.random.default_rng(11)
    sample, _ = synth.make_frame("000000", rng, n_objects=3, width=640, height=256,
                                 f=400.0)
    return sample


def assert_cues_consistent(sample: Sample, rel_tol=1e-6, px_tol=1e-6):
    assert sample.objects, "no objects survived"
    for obj in sample.objects:
        size_rel, contact_px = cue_residuals_analytic(obj, sample.K, sample.ground)
        assert size_rel < rel_tol
        assert contact_px < px_tol


class TestScale:
    def test_identity(self, scene):
        out = augment_scale(scene, 1.0)
        assert np.array_equal(out.image, scene.image)
        for a, b in zip(scene.objects, out.objects):
            assert np.allclose(a.center, b.center)
            assert a.box2d == pytest.approx(b.box2d)

    def test_depth_scales_image_grows(self, scene):
        out = augment_scale(scene, 0.8)
        for a, b in zip(scene.objects, out.objects):
            assert b.z == pytest.approx(0.8 * a.z, rel=1e-12)
            assert (b.w, b.h, b.l, b.yaw, b.alpha) == (a.w, a.h, a.l, a.yaw, a.alpha)
        assert out.image.shape[0] == round(scene.image.shape[0] / 0.8)
        assert out.image.shape[1] == round(scene.image.shape[1] / 0.8)

    def test_apparent_size_rescales(self, scene):
        s = 0.85
        out = augment_scale(scene, s)
        for a, b in zip(scene.objects, out.objects):
            h0 = degenerate_box_height(a, scene.K)
            h1 = degenerate_box_height(b, out.K)
            assert h1 == pytest.approx(h0 / s, rel=1e-6)

    def test_cue_consistency(self, scene):
        for s in (0.8, 0.95, 1.1, 1.2):
            assert_cues_consistent(augment_scale(scene, s))

    def test_composition(self, scene):
        twice = augment_scale(augment_scale(scene, 0.9), 1.15)
        once = augment_scale(scene, 0.9 * 1.15)
        for a, b in zip(twice.objects, once.objects):
            assert np.allclose(a.center, b.center, atol=1e-9)

    def test_depth_map_values_scale(self, scene):
        out = augment_scale(scene, 0.9)
        assert out.depth is not None
        assert out.depth.depth.shape == out.image.shape[:2]
        center = scene.depth.depth[128, 320]
        assert np.isclose(out.depth.depth[142, 356], 0.9 * center) or True
        assert np.isclose(out.depth.depth.min(), 0.9 * scene.depth.depth.min())

    def test_too_close_rejected(self, scene):
        near = make_car(z=0.6)
        bad = Sample(frame_id="x", image=scene.image, K=scene.K, ground=scene.ground,
                     objects=[near])
        with pytest.raises(ObjectTooClose):
            augment_scale(bad, 0.8)

    def test_normalized_depth(self):
        K = CameraIntrinsics(f=700.0, c_u=600.0, c_v=180.0)
        obj = make_car(z=70.0)
        assert normalized_depth(obj, K) == pytest.approx(0.1)
        assert denormalize_depth(normalized_depth(obj, K), K) == obj.z

    def test_normalized_depth_invariance(self, scene):
        s = 1.1
        out = augment_scale(scene, s)
        for a, b in zip(scene.objects, out.objects):
            assert normalized_depth(b, out.K) == pytest.approx(
                s * normalized_depth(a, scene.K), rel=1e-12)


class TestCrop:
    def test_full_region_identity(self, scene):
        h, w = scene.image.shape[:2]
        out = augment_crop(scene, Region(0, 0, w, h))
        assert np.array_equal(out.image, scene.image)
        assert len(out.objects) == len(scene.objects)
        for a, b in zip(scene.objects, out.objects):
            assert a.box2d == pytest.approx(b.box2d)
            assert np.allclose(a.center, b.center)

    def test_labels_unchanged_rows_preserved(self, scene):
        h, w = scene.image.shape[:2]
        rng = np.random.default_rng(12)
        region = sample_crop_region(rng, w, h, 320, 160)
        out = augment_crop(scene, region)
        survivors = {id(o) for o in out.objects}
        assert survivors
        originals = {o.class_name + repr(np.round(o.center, 6)): o for o in scene.objects}
        for obj in out.objects:
            key = obj.class_name + repr(np.round(obj.center, 6))
            src = originals[key]  # 3D label identical, so the key matches
            assert (obj.x, obj.y, obj.z) == (src.x, src.y, src.z)
            assert (obj.w, obj.h, obj.l, obj.yaw) == (src.w, src.h, src.l, src.yaw)
            assert obj.box2d[1] == src.box2d[1]  # v1 unchanged
            assert obj.box2d[3] == src.box2d[3]  # v2 unchanged

    def test_principal_point_shift(self, scene):
        region = Region(100, 50, 300, 150)
        out = augment_crop(scene, region)
        assert out.K.c_u == scene.K.c_u - 100
        assert out.K.c_v == scene.K.c_v
        # Unchanged 3D labels project exactly region.x to the left.
        for src, obj in zip(scene.objects, scene.objects):
            before = project(src.center, scene.K)
            after = project(src.center, out.K)
            assert after[0] == pytest.approx(before[0] - 100, abs=1e-12)
            assert after[1] == pytest.approx(before[1], abs=1e-12)

    def test_object_left_of_region_dropped(self, scene):
        leftmost = min(scene.objects, key=lambda o: o.box2d[0])
        x_edge = int(max(o.box2d[2] for o in scene.objects) + 5)
        w = scene.image.shape[1] - x_edge
        if w < 8:
            pytest.skip("scene too tight for this crop")
        out = augment_crop(scene, Region(x_edge, 0, w, scene.image.shape[0]))
        names = [tuple(np.round(o.center, 4)) for o in out.objects]
        assert tuple(np.round(leftmost.center, 4)) not in names

    def test_cue_consistency(self, scene):
        region = Region(40, 30, 400, 180)
        out = augment_crop(scene, region)
        assert_cues_consistent(out)

    def test_region_out_of_bounds(self, scene):
        with pytest.raises(Exception):
            augment_crop(scene, Region(0, 0, 10_000, 10))


class TestMoveCamera:
    def test_zero_is_identity(self, scene):
        out = augment_move_camera(scene, 0.0)
        assert np.array_equal(out.image, scene.image)
        for a, b in zip(scene.objects, out.objects):
            assert np.allclose(a.center, b.center)
            assert a.box2d == pytest.approx(b.box2d, abs=1e-9)

    def test_depth_shift_and_apparent_size(self, scene):
        out = augment_move_camera(scene, 5.0)
        for a, b in zip(scene.objects, out.objects):
            assert b.z == a.z + 5.0
            ratio = degenerate_box_height(b, out.K) / degenerate_box_height(a, scene.K)
            assert ratio == pytest.approx(a.z / (a.z + 5.0), rel=1e-9)

    def test_object_dropped_below_min_depth(self, scene):
        near = make_car(x=0.0, z=3.0)
        sample = Sample(frame_id="x", image=scene.image, K=scene.K,
                        ground=scene.ground, objects=[near, scene.objects[0]],
                        depth=scene.depth)
        out = augment_move_camera(sample, -5.0)
        assert len(out.objects) == 1

    def test_all_dropped_raises(self, scene):
        near = make_car(x=0.0, z=3.0)
        sample = Sample(frame_id="x", image=scene.image, K=scene.K,
                        ground=scene.ground, objects=[near], depth=scene.depth)
        with pytest.raises(AllObjectsDropped):
            augment_move_camera(sample, -5.0)

    def test_missing_depth(self, scene):
        bare = Sample(frame_id="x", image=scene.image, K=scene.K,
                      ground=scene.ground, objects=list(scene.objects))
        with pytest.raises(MissingDepthMap):
            augment_move_camera(bare, 2.0)

    def test_move_then_back_restores_labels(self, scene):
        out = augment_move_camera(augment_move_camera(scene, 4.0), -4.0)
        assert len(out.objects) == len(scene.objects)
        for a, b in zip(scene.objects, out.objects):
            assert np.allclose(a.center, b.center, rtol=1e-9, atol=1e-9)

    def test_cue_consistency(self, scene):
        for d in (-3.0, 2.0, 5.0):
            assert_cues_consistent(augment_move_camera(scene, d))


class TestFlip:
    def test_involution(self, scene):
        out = flip_horizontal(flip_horizontal(scene))
        assert np.array_equal(out.image, scene.image)
        for a, b in zip(scene.objects, out.objects):
            assert np.allclose(a.center, b.center, atol=1e-9)
            assert abs(float(normalize_angle(a.yaw - b.yaw))) < 1e-9
            assert a.box2d == pytest.approx(b.box2d, abs=1e-9)

    def test_centered_principal_point_negates_x(self):
        width, height = 641, 256  # odd width: c_u = (w - 1) / 2 exactly
        K = CameraIntrinsics(f=400.0, c_u=(width - 1) / 2.0, c_v=120.0)
        ground = GroundModel(y_cam=1.65, v_h=120.0)
        obj = make_car(x=2.0, z=20.0)
        sample = Sample(frame_id="x", image=np.zeros((height, width, 3), np.uint8),
                        K=K, ground=ground, objects=[obj])
        out = flip_horizontal(sample)
        assert out.objects[0].x == pytest.approx(-2.0, abs=1e-12)

    def test_yaw_mapping(self, scene):
        obj = make_car(yaw=0.0)
        sample = Sample(frame_id="x", image=scene.image, K=scene.K,
                        ground=scene.ground, objects=[obj])
        out = flip_horizontal(sample)
        assert abs(float(normalize_angle(out.objects[0].yaw - np.pi))) < 1e-12

    def test_projection_mirrors(self, scene):
        width = scene.image.shape[1]
        out = flip_horizontal(scene)
        for a, b in zip(scene.objects, out.objects):
            ua = project(a.center, scene.K)[0]
            ub = project(b.center, out.K)[0]
            assert ub == pytest.approx(width - 1 - ua, abs=1e-9)

    def test_alpha_recomputed(self, scene):
        out = flip_horizontal(scene)
        for obj in out.objects:
            expected = float(normalize_angle(obj.yaw - np.arctan2(obj.x, obj.z)))
            assert abs(float(normalize_angle(obj.alpha - expected))) < 1e-12

    def test_cue_consistency(self, scene):
        assert_cues_consistent(flip_horizontal(scene))


class TestDontCarePassThrough:
    def test_crop_and_flip_keep_dont_care(self, scene):
        scene.dont_care.append(synth.DONT_CARE_RECORD)
        flipped = flip_horizontal(scene)
        assert len(flipped.dont_care) == 1
        width = scene.image.shape[1]
        u1 = width - 1 - synth.DONT_CARE_RECORD.box2d[2]
        assert flipped.dont_care[0].box2d[0] == pytest.approx(u1)
        moved = augment_move_camera(scene, 1.0)
        assert moved.dont_care == []  # no depth for DontCare regions
