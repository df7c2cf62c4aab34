"""Batch front end: augment, build-db, diagnose, eval, and validate.

Datasets use the KITTI layout (image_2/, label_2/, calib/, optional depth/
and masks/). Every run takes an explicit seed and derives one rng stream
per (frame, kind), so outputs are byte-identical across reruns and across
worker counts. Exit codes: 0 success, 1 validation or per-frame failures,
2 input error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import copy_paste as cp
from . import diagnose as diag
from . import kitti_io
from .augment import Sample
from .config import AugmentConfig
from .geometry import (
    GroundModel,
    degenerate_box_height,
    depth_from_size,
    clip_box2d,
    horizon_row,
    project,
    project_box2d,
    vertical_contact_at_depth,
)

log = logging.getLogger("geoaug")

KINDS = ("scale", "crop", "move", "paste", "flip")
MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# geoaug manifest v1\n# output_id\tsource_id\tkind\tparams\tseed\ty_cam\tv_h\n"


class InputError(Exception):
    """Bad paths or arguments; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

def frame_ids(root: Path) -> list[str]:
    image_dir = root / "image_2"
    if not image_dir.is_dir():
        raise InputError(f"missing required directory {image_dir}")
    ids = sorted(p.stem for p in image_dir.glob("*.png"))
    if not ids:
        raise InputError(f"no frames found under {image_dir}")
    return ids


def load_frame(root: Path, frame_id: str, config: AugmentConfig,
               ground: GroundModel | None = None) -> tuple[Sample, kitti_io.CalibFile]:
    calib_path = root / "calib" / f"{frame_id}.txt"
    label_path = root / "label_2" / f"{frame_id}.txt"
    if not calib_path.exists() or not label_path.exists():
        raise InputError(f"frame {frame_id}: missing calib or label file")
    calib = kitti_io.parse_calib(calib_path.read_bytes())
    K = calib.intrinsics("P2")
    if ground is None:
        ground = GroundModel(y_cam=config.cam_height, v_h=horizon_row(K, config.cam_pitch))
    records = kitti_io.parse_labels(label_path.read_bytes())
    objects = [kitti_io.record_to_object(r) for r in records if not r.is_dont_care]
    dont_care = [r for r in records if r.is_dont_care]
    image = kitti_io.load_image(root / "image_2" / f"{frame_id}.png")
    depth_path = root / "depth" / f"{frame_id}.png"
    depth = kitti_io.load_depth(depth_path.read_bytes()) if depth_path.exists() else None
    sample = Sample(frame_id=frame_id, image=image, K=K, ground=ground,
                    objects=objects, depth=depth, dont_care=dont_care)
    return sample, calib


def write_sample(root: Path, sample: Sample, calib: kitti_io.CalibFile) -> None:
    for sub in ("image_2", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    fid = sample.frame_id
    kitti_io.save_bytes(root / "image_2" / f"{fid}.png", kitti_io.write_image(sample.image))
    records = [kitti_io.object_to_record(o) for o in sample.objects] + sample.dont_care
    kitti_io.save_bytes(root / "label_2" / f"{fid}.txt", kitti_io.write_labels(records))
    kitti_io.save_bytes(root / "calib" / f"{fid}.txt", kitti_io.write_calib(calib))
    if sample.depth is not None:
        (root / "depth").mkdir(exist_ok=True)
        kitti_io.save_bytes(root / "depth" / f"{fid}.png", kitti_io.write_depth(sample.depth))


def adjusted_calib(calib: kitti_io.CalibFile, sample: Sample) -> kitti_io.CalibFile:
    """Rewrite P2 so the stored intrinsics match the sample's (crop shifts c_u)."""
    p2 = calib.projections["P2"].copy()
    p2[0, 0] = p2[1, 1] = sample.K.f
    p2[0, 2] = sample.K.c_u
    p2[1, 2] = sample.K.c_v
    return calib.with_projection("P2", p2)


def read_manifest_grounds(root: Path) -> dict[str, GroundModel]:
    path = root / MANIFEST_NAME
    grounds: dict[str, GroundModel] = {}
    if not path.exists():
        return grounds
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise InputError(f"malformed manifest line: {line!r}")
        grounds[fields[0]] = GroundModel(y_cam=float(fields[5]), v_h=float(fields[6]))
    return grounds


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

_KIND_INDEX = {kind: i for i, kind in enumerate(KINDS)}


def _kind_rng(seed: int, frame_index: int, kind: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, frame_index, _KIND_INDEX[kind]]))


def _apply_kind(sample: Sample, kind: str, rng: np.random.Generator,
                config: AugmentConfig, db: cp.InstanceDB | None,
                mode: cp.PasteMode) -> tuple[Sample, str]:
    """Apply one augmentation kind; returns the new sample and a params string."""
    if kind == "scale":
        s = float(rng.uniform(config.scale_min, config.scale_max))
        return aug.augment_scale(sample, s, config.min_depth), f"s={s!r}"
    if kind == "crop":
        width, height = sample.image_size
        region = aug.sample_crop_region(rng, width, height, config.crop_w, config.crop_h)
        out = aug.augment_crop(sample, region, config.drop_area_fraction)
        return out, f"x={region.x};y={region.y};w={region.w};h={region.h}"
    if kind == "move":
        d = float(rng.uniform(config.cam_move_min, config.cam_move_max))
        return aug.augment_move_camera(sample, d, config.min_depth), f"d={d!r}"
    if kind == "flip":
        return aug.flip_horizontal(sample), ""
    if kind == "paste":
        if db is None:
            raise InputError("paste requested but no instance database available")
        out, plans = cp.paste_instances(sample, db, rng, config, mode)
        depths = ",".join(repr(p.depth) for p in plans)
        return out, f"mode={mode.value};depths={depths}"
    raise InputError(f"unknown kind {kind!r}")


def _augment_one_frame(root: Path, out_root: Path, frame_id: str, frame_index: int,
                       kinds: list[str], config: AugmentConfig, seed: int,
                       db: cp.InstanceDB | None, mode: cp.PasteMode,
                       ) -> tuple[list[str], list[str]]:
    rows, failures = [], []
    try:
        sample, calib = load_frame(root, frame_id, config)
    except (kitti_io.FormatError, InputError) as exc:
        return [], [f"{frame_id}: {exc}"]
    for kind in kinds:
        rng = _kind_rng(seed, frame_index, kind)
        try:
            out, params = _apply_kind(sample, kind, rng, config, db, mode)
        except (aug.MissingDepthMap, aug.AllObjectsDropped, cp.PasteError,
                ValueError) as exc:
            failures.append(f"{frame_id}/{kind}: {exc}")
            continue
        out = replace(out, frame_id=f"{frame_id}_{kind}")
        write_sample(out_root, out, adjusted_calib(calib, out))
        rows.append("\t".join([out.frame_id, frame_id, kind, params, str(seed),
                               repr(float(out.ground.y_cam)), repr(float(out.ground.v_h))]))
    return rows, failures


def cmd_augment(args) -> int:
    config = _load_config(args)
    root, out_root = Path(args.input), Path(args.output)
    ids = frame_ids(root)
    kinds = _parse_kinds(args.kinds)
    mode = cp.PasteMode(args.mode)
    db = None
    if "paste" in kinds:
        db = _obtain_db(args, root, config)
        if not db.patches:
            raise InputError("paste requested but the instance database is empty")
    out_root.mkdir(parents=True, exist_ok=True)

    worker = lambda item: _augment_one_frame(  # noqa: E731
        root, out_root, item[1], item[0], kinds, config, args.seed, db, mode)
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(worker, enumerate(ids)))
    else:
        results = [worker(item) for item in enumerate(ids)]

    rows, failures = [], []
    for frame_rows, frame_failures in results:
        rows.extend(frame_rows)
        failures.extend(frame_failures)
    manifest = MANIFEST_HEADER + "".join(sorted(row + "\n" for row in rows))
    (out_root / MANIFEST_NAME).write_text(manifest)
    for failure in failures:
        log.error("failed: %s", failure)
    print(f"augment: {len(rows)} outputs from {len(ids)} frames, "
          f"{len(failures)} failures")
    return 1 if failures else 0


def _obtain_db(args, root: Path, config: AugmentConfig) -> cp.InstanceDB:
    if getattr(args, "db", None):
        return cp.load_instance_db(args.db)
    masks_dir = root / "masks"
    if not masks_dir.is_dir():
        raise InputError("paste needs --db or a masks/ directory in the input")
    frames = []
    for fid in frame_ids(root):
        mask_path = masks_dir / f"{fid}.png"
        if not mask_path.exists():
            continue
        sample, _ = load_frame(root, fid, config)
        frames.append((sample, kitti_io.load_mask(mask_path.read_bytes())))
    db, _ = cp.build_instance_db(frames, config)
    return db


# ---------------------------------------------------------------------------
# build-db
# ---------------------------------------------------------------------------

def cmd_build_db(args) -> int:
    config = _load_config(args)
    root = Path(args.input)
    masks_dir = root / "masks"
    if not masks_dir.is_dir():
        raise InputError(f"missing required directory {masks_dir}")
    frames = []
    for fid in frame_ids(root):
        mask_path = masks_dir / f"{fid}.png"
        if not mask_path.exists():
            raise InputError(f"frame {fid}: mask file missing")
        sample, _ = load_frame(root, fid, config)
        frames.append((sample, kitti_io.load_mask(mask_path.read_bytes())))
    db, stats = cp.build_instance_db(frames, config)
    out_root = Path(args.output)
    cp.save_instance_db(db, out_root)
    (out_root / "stats.txt").write_text(stats.as_text())
    print(f"build-db: admitted {stats.admitted} instances into {out_root}")
    print(stats.as_text(), end="")
    if not db.patches:
        log.warning("instance database is empty")
    return 0


# ---------------------------------------------------------------------------
# diagnose and eval
# ---------------------------------------------------------------------------

EXPECTED_HEADER = ("frame_id", "base_frame_id", "kind", "mode", "magnitude",
                   "index", "class", "expected_z", "expected_z_size",
                   "expected_z_pos", "manipulated")


def cmd_diagnose(args) -> int:
    config = _load_config(args)
    root, out_root = Path(args.input), Path(args.output)
    ids = frame_ids(root)
    samples, calibs = [], {}
    for fid in ids:
        sample, calib = load_frame(root, fid, config)
        samples.append(sample)
        calibs[fid] = calib
    db = None
    if (root / "masks").is_dir() or getattr(args, "db", None):
        db = _obtain_db(args, root, config)
    entries = diag.generate_suite(samples, config, seed=args.seed, db=db)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    csv_rows = []
    for sample, record in entries:
        write_sample(out_root, sample, adjusted_calib(calibs[record.base_frame_id], sample))
        manifest_rows.append("\t".join([
            sample.frame_id, record.base_frame_id, record.kind,
            f"magnitude={record.magnitude!r};mode={record.mode}", str(args.seed),
            repr(float(sample.ground.y_cam)), repr(float(sample.ground.v_h))]))
        for index, exp in enumerate(record.expected):
            csv_rows.append([record.frame_id, record.base_frame_id, record.kind,
                             record.mode, repr(record.magnitude), index,
                             exp.obj.class_name, repr(exp.expected_z),
                             repr(exp.expected_z_size), repr(exp.expected_z_pos),
                             int(exp.manipulated)])
        # Suite labels are the oracle expectations, pasted instances included.
        records = [kitti_io.object_to_record(e.obj) for e in record.expected]
        kitti_io.save_bytes(out_root / "label_2" / f"{sample.frame_id}.txt",
                            kitti_io.write_labels(records))
    (out_root / MANIFEST_NAME).write_text(
        MANIFEST_HEADER + "".join(sorted(r + "\n" for r in manifest_rows)))
    with open(out_root / "expected.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EXPECTED_HEADER)
        writer.writerows(csv_rows)
    print(f"diagnose: wrote {len(entries)} manipulated frames to {out_root}")
    return 0


def _load_suite(suite_root: Path) -> list[diag.ManipulationRecord]:
    expected_path = suite_root / "expected.csv"
    if not expected_path.exists():
        raise InputError(f"{suite_root} is not a suite directory (expected.csv missing)")
    by_frame: dict[str, diag.ManipulationRecord] = {}
    objects_cache: dict[str, list] = {}
    with open(expected_path, newline="") as handle:
        for row in csv.DictReader(handle):
            fid = row["frame_id"]
            if fid not in by_frame:
                by_frame[fid] = diag.ManipulationRecord(
                    frame_id=fid, base_frame_id=row["base_frame_id"],
                    kind=row["kind"], magnitude=float(row["magnitude"]),
                    mode=row["mode"])
                label_path = suite_root / "label_2" / f"{fid}.txt"
                objects_cache[fid] = [kitti_io.record_to_object(r)
                                      for r in kitti_io.parse_labels(label_path.read_bytes())]
            record = by_frame[fid]
            index = int(row["index"])
            record.expected.append(diag.ExpectedObject(
                obj=objects_cache[fid][index], expected_z=float(row["expected_z"]),
                expected_z_size=float(row["expected_z_size"]),
                expected_z_pos=float(row["expected_z_pos"]),
                manipulated=bool(int(row["manipulated"]))))
    return list(by_frame.values())


def _load_predictions(pred_root: Path) -> dict[str, list[diag.Prediction]]:
    predictions: dict[str, list[diag.Prediction]] = {}
    for path in sorted(pred_root.glob("*.txt")):
        preds = []
        for rec in kitti_io.parse_labels(path.read_bytes()):
            score = rec.score if rec.score is not None else 1.0
            preds.append(diag.Prediction(kitti_io.record_to_object(rec), score))
        predictions[path.stem] = preds
    return predictions


def cmd_eval(args) -> int:
    suite_root, pred_root = Path(args.suite), Path(args.predictions)
    if not pred_root.is_dir():
        raise InputError(f"missing predictions directory {pred_root}")
    records = _load_suite(suite_root)
    predictions = _load_predictions(pred_root)
    try:
        report = diag.depth_deviation_report(records, predictions)
    except diag.MatchError as exc:
        raise InputError(str(exc)) from exc
    out_root = Path(args.output)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "deviation.csv").write_text(report.to_csv())

    kinds = sorted({r.kind for r in records})
    frames_of = lambda kind: [  # noqa: E731
        ([e.obj for e in r.expected], predictions.get(r.frame_id, []))
        for r in records if r.kind == kind]

    with open(out_root / "swap.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["kind", "variant", "ap40"])
        for kind in kinds:
            frames = frames_of(kind)
            base = diag.ap40(frames)
            writer.writerow([kind, "Base", "" if base is None else f"{base:.4f}"])
            for component in diag.COMPONENTS:
                value = diag.component_swap_eval(frames, component)
                writer.writerow([kind, f"{component}*",
                                 "" if value is None else f"{value:.4f}"])

    with open(out_root / "ap.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["kind", "class", "difficulty", "ap40_3d"])
        classes = sorted({e.obj.class_name for r in records for e in r.expected})
        cumulative = {"easy": ("easy",), "moderate": ("easy", "moderate"),
                      "hard": ("easy", "moderate", "hard")}
        for kind in kinds:
            for cls in classes:
                for level, allowed in cumulative.items():
                    frames = [
                        ([e.obj for e in r.expected
                          if e.obj.class_name == cls
                          and diag.difficulty_of(e.obj) in allowed],
                         [p for p in predictions.get(r.frame_id, [])
                          if p.obj.class_name == cls])
                        for r in records if r.kind == kind]
                    value = diag.ap40(frames)
                    writer.writerow([kind, cls, level,
                                     "" if value is None else f"{value:.4f}"])
    print(f"eval: wrote deviation.csv, swap.csv, ap.csv to {out_root}")
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def _validate_object(obj, K, ground, width, height, config, tol_scale) -> list[str]:
    problems = []
    box_tol = config.box_tol_px * tol_scale
    contact_tol = config.contact_tol_px * tol_scale
    if not (obj.w > 0 and obj.h > 0 and obj.l > 0):
        return [f"non-positive dimensions ({obj.w}, {obj.h}, {obj.l})"]
    if not obj.z > 0:
        return [f"non-positive depth {obj.z}"]
    if abs(obj.yaw) > np.pi + 0.011 or abs(obj.alpha) > np.pi + 0.011:
        problems.append(f"angle out of range (yaw={obj.yaw}, alpha={obj.alpha})")
    # Apparent-size relation, evaluated through the corner pipeline.
    size_depth = depth_from_size(K.f, obj.h, degenerate_box_height(obj, K))
    if abs(size_depth - obj.z) / obj.z > 1e-6:
        problems.append(f"size cue recovers z={size_depth:.3f} for labeled z={obj.z:.3f}")
    # Ground-contact relation.
    contact_row = float(project(obj.center, K)[1])
    expected_row = vertical_contact_at_depth(K.f, ground, obj.z)
    if abs(contact_row - expected_row) > contact_tol:
        problems.append(
            f"contact row {contact_row:.2f} vs ground model {expected_row:.2f} "
            f"(residual {abs(contact_row - expected_row):.2f} px)")
    # Stored 2D box against the projected corners.
    if obj.box2d is not None:
        recomputed, _ = clip_box2d(project_box2d(obj, K), width, height)
        deltas = [abs(a - b) for a, b in zip(obj.box2d, recomputed)]
        if max(deltas) > box_tol:
            problems.append(
                f"box2d {tuple(round(v, 1) for v in obj.box2d)} disagrees with projected "
                f"corners {tuple(round(v, 1) for v in recomputed)} (max {max(deltas):.2f} px)")
    return problems


def cmd_validate(args) -> int:
    config = _load_config(args)
    root = Path(args.path)
    label_dir = root / "label_2"
    if not label_dir.is_dir():
        raise InputError(f"missing required directory {label_dir}")
    ids = frame_ids(root)
    grounds = read_manifest_grounds(root)
    failures = 0
    checked = 0
    for fid in ids:
        try:
            sample, _ = load_frame(root, fid, config, ground=grounds.get(fid))
        except (kitti_io.FormatError, InputError) as exc:
            print(f"FAIL {fid}: {exc}")
            failures += 1
            continue
        width, height = sample.image_size
        for index, obj in enumerate(sample.objects):
            checked += 1
            for problem in _validate_object(obj, sample.K, sample.ground,
                                            width, height, config, args.tol):
                print(f"FAIL {fid}[{index}] {obj.class_name}: {problem}")
                failures += 1
    status = "PASS" if failures == 0 else "FAIL"
    print(f"validate: {status} ({checked} objects over {len(ids)} frames, "
          f"{failures} failures)")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _load_config(args) -> AugmentConfig:
    config = AugmentConfig.load(args.config) if getattr(args, "config", None) \
        else AugmentConfig()
    if getattr(args, "scale_range", None):
        config.scale_min, config.scale_max = _parse_pair(args.scale_range, "scale-range")
    if getattr(args, "cam_range", None):
        config.cam_move_min, config.cam_move_max = _parse_pair(args.cam_range, "cam-range")
    if getattr(args, "crop_size", None):
        try:
            w, h = args.crop_size.lower().split("x")
            config.crop_w, config.crop_h = int(w), int(h)
        except ValueError as exc:
            raise InputError(f"bad --crop-size {args.crop_size!r}, expected WxH") from exc
    if getattr(args, "depth_range", None):
        config.paste_depth_min, config.paste_depth_max = \
            _parse_pair(args.depth_range, "depth-range")
    if getattr(args, "paste_tol", None) is not None:
        config.paste_tol = args.paste_tol
    return config


def _parse_pair(raw: str, flag: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in raw.split(","))
    except ValueError as exc:
        raise InputError(f"bad --{flag} {raw!r}, expected LO,HI") from exc
    if hi < lo:
        raise InputError(f"--{flag}: {hi} < {lo}")
    return lo, hi


def _parse_kinds(raw: str) -> list[str]:
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    for kind in kinds:
        if kind not in KINDS:
            raise InputError(f"unknown kind {kind!r}; choose from {','.join(KINDS)}")
    if not kinds:
        raise InputError("no augmentation kinds selected")
    return kinds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoaug",
        description="Geometry-consistent augmentation and diagnosis for "
                    "KITTI-format monocular 3D detection datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value config file")
        if seed:
            p.add_argument("--seed", type=int, required=True,
                           help="rng seed (required for reproducibility)")

    p = sub.add_parser("augment", help="write an augmented copy of a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--kinds", default=",".join(KINDS),
                   help="comma list from scale,crop,move,paste,flip")
    p.add_argument("--mode", default="consistent",
                   choices=[m.value for m in cp.PasteMode])
    p.add_argument("--db", help="prebuilt instance database for paste")
    p.add_argument("--scale-range", dest="scale_range", help="LO,HI")
    p.add_argument("--cam-range", dest="cam_range", help="LO,HI meters")
    p.add_argument("--crop-size", dest="crop_size", help="WxH pixels")
    p.add_argument("--depth-range", dest="depth_range", help="LO,HI meters for paste")
    p.add_argument("--tol", dest="paste_tol", type=float,
                   help="paste height-consistency tolerance (ratio)")
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("build-db", help="collect an instance database from masks")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    common(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("diagnose", help="generate a manipulation suite with oracles")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--db", help="prebuilt instance database for paste entries")
    p.add_argument("--depth-range", dest="depth_range", help="LO,HI meters for paste")
    p.add_argument("--tol", dest="paste_tol", type=float)
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval", help="score detector predictions against a suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--output", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="check a dataset's geometric consistency")
    p.add_argument("path")
    p.add_argument("--tol", type=float, default=1.0,
                   help="multiplier on the default validation tolerances")
    common(p, seed=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
