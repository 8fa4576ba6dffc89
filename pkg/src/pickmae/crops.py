"""Crop windows, model-input resampling, pick-location images, pick features.

All window math happens in source-scene pixels; augmentation magnitudes are
specified at 512-row scenes and scaled proportionally for other resolutions.
"""

import dataclasses
import math

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngmod
from .scenegen import PickCandidate, PickScene


class CropError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int
    source_h: int
    source_w: int
    dx: int = 0
    dy: int = 0
    pad: int = 0

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0


def target_bbox(scene: PickScene, target_item_id: int) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(scene.instance_mask == target_item_id)
    if ys.size == 0:
        raise CropError(f"target item {target_item_id} has no visible pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def full_window(scene: PickScene) -> CropWindow:
    h, w = scene.instance_mask.shape
    return CropWindow(0, 0, w, h, source_h=h, source_w=w)


def compute_local_crop(
    scene: PickScene,
    target_item_id: int,
    padding: float,
    augment: bool,
    rng_seed: int,
    shift_max: float = 25.0,
    pad_step: float = 50.0,
    pad_max: float = 150.0,
) -> CropWindow:
    """Target bbox expanded by `padding`, optionally shift/pad augmented.

    The target segment is always re-included before the final clamp, so no
    augmentation can push any target pixel out of view. Augment magnitudes are
    in 512-row-scene pixels and scale with the scene height.
    """
    h, w = scene.instance_mask.shape
    bx0, by0, bx1, by1 = target_bbox(scene, target_item_id)
    scale = h / 512.0
    pad = int(round(padding * scale))
    x0, y0 = bx0 - pad, by0 - pad
    x1, y1 = bx1 + pad, by1 + pad
    dx = dy = extra = 0
    if augment:
        rng = rngmod.stream(rng_seed, "crop_augment")
        smax = max(0, int(round(shift_max * scale)))
        dx = int(rng.integers(-smax, smax + 1))
        dy = int(rng.integers(-smax, smax + 1))
        steps = int(round(pad_max / pad_step)) if pad_step > 0 else 0
        extra = int(round(pad_step * int(rng.integers(steps + 1)) * scale))
        x0, y0 = x0 - extra + dx, y0 - extra + dy
        x1, y1 = x1 + extra + dx, y1 + extra + dy
    # re-include the full target segment
    x0, y0 = min(x0, bx0), min(y0, by0)
    x1, y1 = max(x1, bx1), max(y1, by1)
    # clamp to source bounds (target bbox is inside, so it survives)
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    return CropWindow(x0, y0, x1, y1, source_h=h, source_w=w, dx=dx, dy=dy, pad=extra)


def _resize(plane: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(plane, dtype=np.float32))
    t = t.unsqueeze(0) if t.ndim == 3 else t.unsqueeze(0).unsqueeze(0)
    if mode == "bilinear":
        out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(out_h, out_w), mode="nearest-exact")
    return out.squeeze(0).numpy()


def crop_and_resize(scene: PickScene, window: CropWindow, input_size: int,
                    semantic_downsample: int = 4) -> dict[str, np.ndarray]:
    """Identical window applied to every modality.

    Returns model-ready planes: rgb (3,S,S) in [0,1], depth (1,S,S) normalized
    by the scene depth range, semantic (S/4,S/4) class ids.
    """
    x0, y0, x1, y1 = window.x0, window.y0, window.x1, window.y1
    rgb = scene.rgb[y0:y1, x0:x1].astype(np.float32).transpose(2, 0, 1) / 255.0
    d = scene.depth.astype(np.float32)
    dmin, dmax = float(d.min()), float(d.max())
    depth = (d[y0:y1, x0:x1] - dmin) / max(1e-6, dmax - dmin)
    rgb_out = _resize(rgb, input_size, input_size, "bilinear")
    depth_out = _resize(depth[None], input_size, input_size, "bilinear")
    # semantics live on the 1/4 grid: window coords divided by 4, rounded outward
    q = semantic_downsample
    sx0, sy0 = x0 // q, y0 // q
    sx1, sy1 = math.ceil(x1 / q), math.ceil(y1 / q)
    sem = scene.semantic_mask[sy0:sy1, sx0:sx1]
    sem_out = _resize(sem[None].astype(np.float32), input_size // q, input_size // q,
                      "nearest")[0].astype(np.int64)
    return {"rgb": rgb_out, "depth": depth_out, "semantic": sem_out}


def render_pick_location_image(candidate: PickCandidate, window: CropWindow,
                               input_size: int, marker_side: int = 9) -> np.ndarray:
    """Single-channel (1,S,S) image: 1.0 inside a marker square at the pick point."""
    if not (window.x0 <= candidate.x < window.x1 and window.y0 <= candidate.y < window.y1):
        raise CropError(
            f"pick point ({candidate.x},{candidate.y}) outside window "
            f"[{window.x0},{window.x1})x[{window.y0},{window.y1})"
        )
    img = np.zeros((1, input_size, input_size), dtype=np.float32)
    cx = int((candidate.x - window.x0) * input_size // window.w)
    cy = int((candidate.y - window.y0) * input_size // window.h)
    half = marker_side // 2
    x0, x1 = max(0, cx - half), min(input_size, cx - half + marker_side)
    y0, y1 = max(0, cy - half), min(input_size, cy - half + marker_side)
    img[0, y0:y1, x0:x1] = 1.0
    return img


def scaled_marker_side(marker_side: int, input_size: int) -> int:
    # marker sizes are specified at 224-pixel model inputs
    return max(1, int(round(marker_side * input_size / 224.0)))


def pick_feature_vector(scene: PickScene, candidate: PickCandidate,
                        window: CropWindow, angle_bins: int = 8,
                        num_cups: int = 8) -> np.ndarray:
    """Normalized pick features: crop-relative x,y; scene-range z; approach
    one-hot; wrist sin/cos; cup activation bits."""
    xs = (candidate.x - window.x0) / max(1, window.w)
    ys = (candidate.y - window.y0) / max(1, window.h)
    d = scene.depth
    dmin, dmax = float(d.min()), float(d.max())
    zs = (candidate.z - dmin) / max(1e-6, dmax - dmin)
    onehot = np.zeros(angle_bins, dtype=np.float32)
    onehot[candidate.approach_angle_bin % angle_bins] = 1.0
    cups = np.array(
        [(candidate.cup_activation >> i) & 1 for i in range(num_cups)],
        dtype=np.float32,
    )
    head = np.array(
        [xs, ys, min(1.0, max(0.0, zs)),], dtype=np.float32)
    wrist = np.array(
        [math.sin(candidate.wrist_rotation), math.cos(candidate.wrist_rotation)],
        dtype=np.float32,
    )
    return np.concatenate([head, onehot, wrist, cups])


def feature_dim(angle_bins: int = 8, num_cups: int = 8) -> int:
    return 3 + angle_bins + 2 + num_cups


def stacked_plane(planes: dict[str, np.ndarray], num_classes: int = 9) -> np.ndarray:
    """Channel-stacked input: R,G,B, depth, one-hot semantics at full res (13,S,S)."""
    rgb, depth, sem = planes["rgb"], planes["depth"], planes["semantic"]
    size = rgb.shape[-1]
    sem_full = _resize(sem[None].astype(np.float32), size, size, "nearest")[0].astype(int)
    onehot = np.eye(num_classes, dtype=np.float32)[sem_full]      # (S,S,K)
    return np.concatenate([rgb, depth, onehot.transpose(2, 0, 1)], axis=0)
