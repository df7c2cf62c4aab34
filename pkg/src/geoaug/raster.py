"""Image-buffer operations behind the augmentations.

Color interpolation is bilinear, masks are nearest so labels never bleed.
All functions return new buffers; inputs are never mutated.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

import cv2
import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, DEFAULT_MIN_DEPTH
from .kitti_io import DepthMap


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """A rectangle inside an image: top-left (x, y) and extent (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def check_inside(self, width: int, height: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise RasterError(f"region extent must be positive, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise RasterError(
                f"region {self} does not fit inside a {width}x{height} image"
            )


def resize(img: np.ndarray, r: float) -> np.ndarray:
    """Resize by factor r with bilinear sampling; output dims = round(r * dims)."""
    if not r > 0:
        raise RasterError(f"resize factor must be positive, got {r}")
    h, w = img.shape[:2]
    new_w, new_h = int(round(r * w)), int(round(r * h))
    if new_w < 1 or new_h < 1:
        raise RasterError(f"resize factor {r} collapses a {w}x{h} image")
    if (new_w, new_h) == (w, h):
        return img.copy()
    return cv2.resize(img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)


def _resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if (size[0], size[1]) == (arr.shape[1], arr.shape[0]):
        return arr.copy()
    return cv2.resize(arr, size, interpolation=cv2.INTER_NEAREST)


def crop_then_pad(img: np.ndarray, region: Region) -> np.ndarray:
    """Crop columns to the region but keep rows at their original indices.

    The output has the input's height and the region's width. Rows outside
    [region.y, region.y + region.h) are zero-filled, so every retained pixel
    keeps its row index.
    """
    h, w = img.shape[:2]
    region.check_inside(w, h)
    out = np.zeros((h, region.w) + img.shape[2:], dtype=img.dtype)
    out[region.y:region.y + region.h] = \
        img[region.y:region.y + region.h, region.x:region.x + region.w]
    return out


def composite_patch(img: np.ndarray, pixels: np.ndarray, mask: np.ndarray,
                    contact: tuple[float, float], at: tuple[float, float],
                    scale: float) -> np.ndarray:
    """Paste a masked patch so its contact pixel lands at `at` after scaling.

    `contact` is the patch-frame reference pixel (u, v). Color is resized
    bilinearly, the mask nearest. Masked pixels overwrite the destination;
    parts falling off the image are clipped.
    """
    if not scale > 0:
        raise RasterError(f"patch scale must be positive, got {scale}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return img.copy()
    ph, pw = pixels.shape[:2]
    if scale != 1.0:
        new_w = max(1, int(round(scale * pw)))
        new_h = max(1, int(round(scale * ph)))
        pixels = cv2.resize(pixels, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        mask = _resize_nearest(mask.astype(np.uint8), (new_w, new_h)).astype(bool)
    else:
        new_w, new_h = pw, ph
    left = int(round(at[0] - contact[0] * scale))
    top = int(round(at[1] - contact[1] * scale))
    h, w = img.shape[:2]
    x0, y0 = max(left, 0), max(top, 0)
    x1, y1 = min(left + new_w, w), min(top + new_h, h)
    if x0 >= x1 or y0 >= y1:
        raise RasterError("patch placement falls entirely off the image")
    out = img.copy()
    sub_mask = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    out[y0:y1, x0:x1][sub_mask] = pixels[y0 - top:y1 - top, x0 - left:x1 - left][sub_mask]
    return out


def _offsets_for_squared_distance(d2: int) -> list[tuple[int, int]]:
    """All integer offsets (dr, dc) with dr^2 + dc^2 == d2, sorted by (dr, dc)."""
    offsets = []
    top = isqrt(d2)
    for dr in range(-top, top + 1):
        rem = d2 - dr * dr
        dc = isqrt(rem)
        if dc * dc == rem:
            if dc == 0:
                offsets.append((dr, 0))
            else:
                offsets.append((dr, -dc))
                offsets.append((dr, dc))
    offsets.sort()
    return offsets


def nearest_fill(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid pixels from the nearest valid pixel (Euclidean).

    Ties are broken deterministically toward the smaller row, then the
    smaller column, of the donor pixel.
    """
    valid = np.asarray(valid, dtype=bool)
    out = values.copy()
    if valid.all():
        return out
    if not valid.any():
        raise RasterError("cannot fill: no valid pixels at all")
    h, w = valid.shape
    dist = ndimage.distance_transform_edt(~valid)
    hole_r, hole_c = np.nonzero(~valid)
    d2 = np.rint(dist[hole_r, hole_c] ** 2).astype(np.int64)
    for value in np.unique(d2):
        sel = d2 == value
        rows, cols = hole_r[sel], hole_c[sel]
        pending = np.ones(len(rows), dtype=bool)
        for dr, dc in _offsets_for_squared_distance(int(value)):
            if not pending.any():
                break
            rr, cc = rows + dr, cols + dc
            ok = pending & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            ok[ok] = valid[rr[ok], cc[ok]]
            if ok.any():
                out[rows[ok], cols[ok]] = values[rr[ok], cc[ok]]
                pending &= ~ok
    return out


@dataclass
class WarpResult:
    """Forward-warp output: new image, new depth, and direct-write coverage."""

    image: np.ndarray
    depth: DepthMap
    coverage: float


def forward_warp(img: np.ndarray, depth: DepthMap, K: CameraIntrinsics, d: float,
                 min_depth: float = DEFAULT_MIN_DEPTH) -> WarpResult:
    """Re-render the image as if the scene moved by d along the camera Z axis.

    Every source pixel with valid depth z splats to the projection of its
    3D point shifted to depth z + d. Collisions keep the nearest new depth
    (z-buffer, ties to the first source pixel in row-major order); pixels
    whose new depth falls at or below min_depth are dropped. Holes are
    filled from the nearest written pixel. Returns the warped image, the
    warped depth map (z + d), and the fraction of directly written pixels.
    """
    h, w = img.shape[:2]
    if depth.shape != (h, w):
        raise RasterError(f"depth dims {depth.shape} do not match image {(h, w)}")
    usable = depth.valid & (depth.depth + d > min_depth)
    if not usable.any():
        raise RasterError("no usable depth: every pixel is missing or too close")

    src_v, src_u = np.nonzero(usable)
    z = depth.depth[src_v, src_u]
    z_new = z + d
    m = z / z_new
    u_new = np.rint((src_u - K.c_u) * m + K.c_u).astype(np.int64)
    v_new = np.rint((src_v - K.c_v) * m + K.c_v).astype(np.int64)
    inside = (u_new >= 0) & (u_new < w) & (v_new >= 0) & (v_new < h)
    if not inside.any():
        raise RasterError("warp maps every source pixel outside the image")
    src_v, src_u = src_v[inside], src_u[inside]
    z_new = z_new[inside]
    target = v_new[inside] * w + u_new[inside]

    # Winner per target pixel: smallest new depth, then first source pixel.
    order = np.lexsort((np.arange(len(target)), z_new, target))
    target_sorted = target[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = target_sorted[1:] != target_sorted[:-1]
    winners = order[keep]
    tgt = target[winners]

    out = np.zeros_like(img)
    out.reshape(h * w, -1)[tgt] = img[src_v[winners], src_u[winners]].reshape(len(tgt), -1)
    out_depth = np.zeros((h, w), dtype=np.float64)
    out_depth.reshape(-1)[tgt] = z_new[winners]
    written = np.zeros(h * w, dtype=bool)
    written[tgt] = True
    written = written.reshape(h, w)

    coverage = float(written.sum()) / (h * w)
    out = nearest_fill(out, written)
    out_depth = nearest_fill(out_depth, written)
    return WarpResult(image=out, depth=DepthMap(depth=out_depth, valid=np.ones((h, w), dtype=bool)),
                      coverage=coverage)
