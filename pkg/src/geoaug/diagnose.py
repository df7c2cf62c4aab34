"""Manipulation suites with oracle labels, and detector evaluation.

A suite sweeps the augmentations over configured grids and records, per
output frame, what a geometrically consistent detector must predict. The
evaluation side matches detector outputs to those expectations and reports
rotated-box IoU metrics, AP at 40 recall positions, component-swap scores,
and expected-versus-estimated depth deviations.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import Polygon

from . import augment as aug
from . import copy_paste as cp
from .augment import Sample
from .config import AugmentConfig
from .geometry import Object3D, corners_3d, iou_2d
from .raster import Region


class MatchError(ValueError):
    """Predictions reference frames the suite does not contain."""


class DegenerateBox(ValueError):
    """IoU requested for a box with zero footprint."""


# ---------------------------------------------------------------------------
# Rotated-box overlap metrics
# ---------------------------------------------------------------------------

def _ground_polygon(obj: Object3D) -> Polygon:
    if obj.w * obj.l <= 0:
        raise DegenerateBox(f"zero-area footprint for {obj.class_name} (w={obj.w}, l={obj.l})")
    corners = corners_3d(obj)[:4]
    return Polygon(corners[:, [0, 2]])


def bev_iou(a: Object3D, b: Object3D) -> float:
    """IoU of the two yaw-rotated ground rectangles, seen from above."""
    pa, pb = _ground_polygon(a), _ground_polygon(b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return float(inter / union) if union > 0 else 0.0


def iou_3d(a: Object3D, b: Object3D) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap over volume union."""
    pa, pb = _ground_polygon(a), _ground_polygon(b)
    inter_area = pa.intersection(pb).area
    # Boxes span [y - h, y] in the downward camera frame.
    overlap_h = min(a.y, b.y) - max(a.y - a.h, b.y - b.h)
    inter_vol = inter_area * max(overlap_h, 0.0)
    vol_a = a.w * a.h * a.l
    vol_b = b.w * b.h * b.l
    if vol_a <= 0 or vol_b <= 0:
        raise DegenerateBox("zero-volume box")
    union = vol_a + vol_b - inter_vol
    return float(inter_vol / union)


# ---------------------------------------------------------------------------
# Matching and AP at 40 recall positions
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """A detector output: an object hypothesis plus its confidence."""

    obj: Object3D
    score: float


def match(predictions: list[Prediction], truths: list[Object3D],
          iou_threshold: float = 0.5) -> list[tuple[int, int]]:
    """Greedy one-to-one assignment, highest score first, on 2D IoU.

    Returns (prediction_index, truth_index) pairs.
    """
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i].score, i))
    taken = [False] * len(truths)
    pairs = []
    for pi in order:
        pbox = predictions[pi].obj.box2d
        if pbox is None:
            continue
        best, best_iou = -1, iou_threshold
        for ti, truth in enumerate(truths):
            if taken[ti] or truth.box2d is None:
                continue
            overlap = iou_2d(pbox, truth.box2d)
            if overlap >= best_iou:
                best, best_iou = ti, overlap
        if best >= 0:
            taken[best] = True
            pairs.append((pi, best))
    return pairs


_RECALL_POSITIONS = np.arange(1, 41) / 40.0


def ap40(frames: list[tuple[list[Object3D], list[Prediction]]],
         iou_fn=iou_3d, iou_threshold: float = 0.5) -> float | None:
    """Average precision over 40 equally spaced recall positions.

    Predictions across all frames are ranked by score; each one greedily
    claims the best still-unclaimed truth in its frame when the IoU from
    `iou_fn` reaches the threshold. Precision at recall r is the maximum
    precision at any recall >= r. Returns None when there are no truths.
    """
    total_truths = sum(len(truths) for truths, _ in frames)
    if total_truths == 0:
        return None
    scored: list[tuple[float, int, int]] = []  # (-score, frame, pred index)
    for fi, (_, preds) in enumerate(frames):
        for pi, pred in enumerate(preds):
            scored.append((-pred.score, fi, pi))
    scored.sort()
    claimed = [set() for _ in frames]
    tp_flags = []
    for _, fi, pi in scored:
        truths, preds = frames[fi]
        pred = preds[pi]
        best, best_iou = -1, iou_threshold
        for ti, truth in enumerate(truths):
            if ti in claimed[fi]:
                continue
            overlap = iou_fn(pred.obj, truth)
            if overlap >= best_iou:
                best, best_iou = ti, overlap
        if best >= 0:
            claimed[fi].add(best)
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not t for t in tp_flags])
    recalls = tp / total_truths
    precisions = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in _RECALL_POSITIONS:
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return float(ap / len(_RECALL_POSITIONS))


# ---------------------------------------------------------------------------
# Component-swap evaluation
# ---------------------------------------------------------------------------

COMPONENTS = ("Depth", "Dim", "Pos")


def _hybrid(pred: Object3D, truth: Object3D, component: str) -> Object3D:
    """Replace one truth component with its predicted counterpart.

    Depth: predicted z, all else truth. Dim: predicted (w, h, l). Pos: the
    predicted projected-center ray, rescaled to the truth depth.
    """
    if component == "Depth":
        return replace(truth, z=pred.z, box2d=truth.box2d)
    if component == "Dim":
        return replace(truth, w=pred.w, h=pred.h, l=pred.l)
    if component == "Pos":
        ratio = truth.z / pred.z
        return replace(truth, x=pred.x * ratio, y=pred.y * ratio)
    raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")


def component_swap_eval(frames: list[tuple[list[Object3D], list[Prediction]]],
                        component: str, match_iou: float = 0.5,
                        eval_iou: float = 0.5, iou_fn=iou_3d) -> float | None:
    """AP after substituting one predicted component into matched truths.

    Matching uses 2D boxes; unmatched truths stay as misses and unmatched
    predictions stay as false positives.
    """
    hybrid_frames = []
    for truths, preds in frames:
        pairs = dict(match(preds, truths, match_iou))
        hybrids = []
        for pi, pred in enumerate(preds):
            if pi in pairs:
                hybrids.append(Prediction(_hybrid(pred.obj, truths[pairs[pi]], component),
                                          pred.score))
            else:
                hybrids.append(pred)
        hybrid_frames.append((truths, hybrids))
    return ap40(hybrid_frames, iou_fn=iou_fn, iou_threshold=eval_iou)


# ---------------------------------------------------------------------------
# KITTI difficulty buckets
# ---------------------------------------------------------------------------

# (min 2D box height px, max occlusion, max truncation)
_DIFFICULTY = {"easy": (40.0, 0, 0.15), "moderate": (25.0, 1, 0.30), "hard": (25.0, 2, 0.50)}


def difficulty_of(obj: Object3D) -> str:
    if obj.box2d is None:
        return "unknown"
    height = obj.box2d[3] - obj.box2d[1]
    for name, (min_h, max_occ, max_trunc) in _DIFFICULTY.items():
        if height >= min_h and obj.occluded <= max_occ and obj.truncated <= max_trunc:
            return name
    return "unknown"


# ---------------------------------------------------------------------------
# Suite generation
# ---------------------------------------------------------------------------

@dataclass
class ExpectedObject:
    """Oracle labels for one object in a manipulated frame.

    `expected_z` is the headline depth; the per-cue fields differ from it
    only for geometry-violating paste modes. `manipulated` marks objects
    whose evidence the manipulation targeted (the pasted instances).
    """

    obj: Object3D
    expected_z: float
    expected_z_size: float
    expected_z_pos: float
    manipulated: bool = False


@dataclass
class ManipulationRecord:
    """One applied manipulation with its oracle expectations."""

    frame_id: str
    base_frame_id: str
    kind: str
    magnitude: float
    mode: str = ""
    expected: list[ExpectedObject] = field(default_factory=list)


@dataclass
class SuiteConfig:
    """Grids swept by generate_suite. Identity settings are included."""

    scales: tuple = (0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2)
    moves: tuple = (-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    crops_per_frame: int = 1
    paste_depths: tuple = (15.0, 25.0, 35.0, 45.0)
    paste_modes: tuple = ("consistent", "size-only", "pos-only")
    include_flip: bool = True


def _attempt_paste(sample: Sample, db, depth: float, mode, config, rng,
                   max_attempts: int = 20):
    """Paste one instance at a fixed depth, resampling the patch on rejection."""
    for _ in range(max_attempts):
        patch = db.patches[int(rng.integers(0, len(db.patches)))]
        try:
            plan = cp.plan_paste(patch, sample, depth, mode)
        except (cp.PasteError, GeometryError):
            continue
        if mode is cp.PasteMode.CONSISTENT and \
                not cp.consistency_check(plan, config.paste_tol):
            continue
        try:
            return cp.apply_paste(sample, plan, patch, config.overlap_iou_max), plan
        except cp.PasteError:
            continue
    return None, None


def _plain_expected(sample: Sample, expected_z_of) -> list[ExpectedObject]:
    out = []
    for obj in sample.objects:
        z = float(expected_z_of(obj))
        out.append(ExpectedObject(obj=obj, expected_z=z,
                                  expected_z_size=z, expected_z_pos=z))
    return out


def generate_suite(samples: list[Sample], config: AugmentConfig | None = None,
                   suite: SuiteConfig | None = None, seed: int = 0,
                   db: cp.InstanceDB | None = None,
                   ) -> list[tuple[Sample, ManipulationRecord]]:
    """Sweep the manipulations over every sample and attach oracle labels.

    Expected depths: scale -> s * z, crop -> z, move -> z + d, paste -> the
    sampled depth. Paste entries need an instance database; move entries
    need per-pixel depth.
    """
    config = config or AugmentConfig()
    suite = suite or SuiteConfig()
    entries: list[tuple[Sample, ManipulationRecord]] = []
    for si, sample in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, si]))
        for i, s in enumerate(suite.scales):
            out = aug.augment_scale(sample, s, config.min_depth)
            out = replace(out, frame_id=f"{sample.frame_id}_scale{i:02d}")
            record = ManipulationRecord(out.frame_id, sample.frame_id, "scale", float(s),
                                        expected=_plain_expected(out, lambda o: o.z))
            entries.append((out, record))
        for i in range(suite.crops_per_frame):
            region = aug.sample_crop_region(rng, sample.image.shape[1],
                                            sample.image.shape[0],
                                            config.crop_w, config.crop_h)
            out = aug.augment_crop(sample, region, config.drop_area_fraction)
            out = replace(out, frame_id=f"{sample.frame_id}_crop{i:02d}")
            record = ManipulationRecord(out.frame_id, sample.frame_id, "crop",
                                        float(region.x),
                                        expected=_plain_expected(out, lambda o: o.z))
            entries.append((out, record))
        if sample.depth is not None:
            for i, d in enumerate(suite.moves):
                out = aug.augment_move_camera(sample, d, config.min_depth)
                out = replace(out, frame_id=f"{sample.frame_id}_move{i:02d}")
                record = ManipulationRecord(out.frame_id, sample.frame_id, "move", float(d),
                                            expected=_plain_expected(out, lambda o: o.z))
                entries.append((out, record))
        if suite.include_flip:
            out = aug.flip_horizontal(sample)
            out = replace(out, frame_id=f"{sample.frame_id}_flip00")
            record = ManipulationRecord(out.frame_id, sample.frame_id, "flip", 0.0,
                                        expected=_plain_expected(out, lambda o: o.z))
            entries.append((out, record))
        if db is not None and db.patches:
            index = 0
            for mode_name in suite.paste_modes:
                mode = cp.PasteMode(mode_name)
                for depth in suite.paste_depths:
                    out, plan = _attempt_paste(sample, db, float(depth), mode,
                                               config, rng)
                    if out is None:
                        continue
                    out = replace(out, frame_id=f"{sample.frame_id}_paste{index:02d}")
                    index += 1
                    expected = _plain_expected(sample, lambda o: o.z)
                    expected.append(ExpectedObject(
                        obj=replace(plan.obj, box2d=plan.placed_box2d),
                        expected_z=plan.depth,
                        expected_z_size=plan.expected_z_size,
                        expected_z_pos=plan.expected_z_pos,
                        manipulated=True))
                    record = ManipulationRecord(out.frame_id, sample.frame_id, "paste",
                                                float(depth), mode=mode.value,
                                                expected=expected)
                    entries.append((out, record))
    return entries


# ---------------------------------------------------------------------------
# Depth-deviation report
# ---------------------------------------------------------------------------

@dataclass
class DeviationRow:
    kind: str
    mode: str
    magnitude: float
    num_expected: int
    num_matched: int
    mean_deviation: float
    std_deviation: float
    mean_expected: float
    mean_predicted: float

    @property
    def flagged(self) -> bool:
        return self.num_matched == 0


@dataclass
class DiagnosisReport:
    rows: list[DeviationRow]

    HEADER = ("kind", "mode", "magnitude", "num_expected", "num_matched",
              "mean_deviation", "std_deviation", "mean_expected",
              "mean_predicted", "flag")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for row in self.rows:
            writer.writerow([
                row.kind, row.mode, f"{row.magnitude:g}", row.num_expected,
                row.num_matched,
                "" if math.isnan(row.mean_deviation) else f"{row.mean_deviation:.6f}",
                "" if math.isnan(row.std_deviation) else f"{row.std_deviation:.6f}",
                "" if math.isnan(row.mean_expected) else f"{row.mean_expected:.6f}",
                "" if math.isnan(row.mean_predicted) else f"{row.mean_predicted:.6f}",
                "no_matches" if row.flagged else "",
            ])
        return buf.getvalue()


def depth_deviation_report(records: list[ManipulationRecord],
                           predictions: dict[str, list[Prediction]],
                           iou_threshold: float = 0.5) -> DiagnosisReport:
    """Mean and std of (predicted z - expected z) per manipulation setting.

    Prediction frame ids must all belong to the suite; for paste entries
    only the pasted instances count, for image-level entries every object
    does. Settings with zero matches are flagged, never dropped.
    """
    known = {rec.frame_id for rec in records}
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise MatchError(f"predictions reference unknown frames: {unknown[:5]}")
    groups: dict[tuple[str, str, float], list[tuple[float, float]]] = {}
    counts: dict[tuple[str, str, float], int] = {}
    for rec in records:
        key = (rec.kind, rec.mode, rec.magnitude)
        expected = [e for e in rec.expected if e.manipulated] if rec.kind == "paste" \
            else rec.expected
        counts[key] = counts.get(key, 0) + len(expected)
        groups.setdefault(key, [])
        preds = predictions.get(rec.frame_id, [])
        pairs = match(preds, [e.obj for e in expected], iou_threshold)
        for pi, ti in pairs:
            groups[key].append((preds[pi].obj.z, expected[ti].expected_z))
    rows = []
    for key in sorted(groups):
        kind, mode, magnitude = key
        pairs = groups[key]
        if pairs:
            predicted = np.array([p for p, _ in pairs])
            expected = np.array([e for _, e in pairs])
            dev = predicted - expected
            rows.append(DeviationRow(kind, mode, magnitude, counts[key], len(pairs),
                                     float(dev.mean()), float(dev.std()),
                                     float(expected.mean()), float(predicted.mean())))
        else:
            nan = float("nan")
            rows.append(DeviationRow(kind, mode, magnitude, counts[key], 0,
                                     nan, nan, nan, nan))
    return DiagnosisReport(rows=rows)
