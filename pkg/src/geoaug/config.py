"""Run configuration with a key = value text file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    """Knobs for the augmentations, pasting, and validation tolerances."""

    # image-level augmentation ranges
    scale_min: float = 0.8
    scale_max: float = 1.2
    crop_w: int = 960
    crop_h: int = 320
    cam_move_min: float = -5.0
    cam_move_max: float = 5.0
    min_depth: float = 0.5
    drop_area_fraction: float = 0.25
    # copy-paste
    paste_depth_min: float = 0.0
    paste_depth_max: float = 60.0
    paste_instances: int = 2
    paste_tol: float = 0.1
    vp_filter_px: float = 15.0
    min_patch_height_px: float = 24.0
    max_truncation: float = 0.1
    max_occlusion: int = 0
    overlap_iou_max: float = 0.3
    paste_classes: str = "Car,Pedestrian,Cyclist"
    # scene / ground model
    cam_height: float = 1.65
    cam_pitch: float = 0.0
    # validation tolerances (absolute pixels unless noted)
    box_tol_px: float = 2.0
    contact_tol_px: float = 1.5
    angle_tol_rad: float = 0.02

    def class_list(self) -> list[str]:
        return [c.strip() for c in self.paste_classes.split(",") if c.strip()]

    def save(self, path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "AugmentConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(known[key], raw, f"{path}:{lineno}")
        return cls(**kwargs)


def _coerce(type_name: str, raw: str, where: str):
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {raw!r} for {type_name}") from exc
