"""Procedural cluttered-tote scenes, pick candidates, and the success oracle.

Scenes are 2.5-D heightfields rasterized top-down: items are superellipse
footprints dropped in insertion order, each resting flat on whatever is below
it, so later items occlude earlier ones consistently across RGB, depth and the
masks. No physics, no 3-D renderer.
"""

import dataclasses
import math

import numpy as np

from . import rng as rngmod

SHAPES = ("box", "bag", "bottle", "envelope", "cylinder", "irregular")

# semantic classes 0..8
SEMANTIC_CLASSES = (
    "background",
    "tote_floor",
    "tote_wall",
    "box",
    "bag",
    "bottle",
    "envelope",
    "cylinder",
    "irregular",
)
SHAPE_TO_CLASS = {s: SEMANTIC_CLASSES.index(s) for s in SHAPES}

FLAVORS = ("standard", "random", "package", "generic")

# shape mix per flavor
_SHAPE_WEIGHTS = {
    "standard": {"box": 0.28, "bag": 0.16, "bottle": 0.14, "envelope": 0.14,
                 "cylinder": 0.12, "irregular": 0.16},
    "random": {"box": 0.28, "bag": 0.16, "bottle": 0.14, "envelope": 0.14,
               "cylinder": 0.12, "irregular": 0.16},
    "package": {"box": 0.6, "envelope": 0.4},
    "generic": {"box": 0.08, "bag": 0.08, "bottle": 0.2, "envelope": 0.08,
                "cylinder": 0.28, "irregular": 0.28},
}

# base color families per shape; generic flavor uses a disjoint palette
_PALETTE = {
    "box": [(164, 116, 72), (188, 142, 96), (142, 98, 60)],
    "bag": [(200, 200, 210), (170, 175, 190), (225, 225, 230)],
    "bottle": [(60, 130, 80), (70, 110, 160), (120, 60, 60)],
    "envelope": [(230, 220, 190), (210, 200, 170), (240, 235, 215)],
    "cylinder": [(90, 90, 100), (140, 60, 120), (60, 60, 70)],
    "irregular": [(220, 120, 40), (200, 80, 100), (240, 180, 60)],
}
_PALETTE_GENERIC = {
    "box": [(20, 40, 120), (30, 60, 150)],
    "bag": [(10, 120, 130), (20, 150, 150)],
    "bottle": [(130, 20, 130), (160, 40, 160)],
    "envelope": [(30, 30, 30), (50, 50, 50)],
    "cylinder": [(0, 200, 220), (40, 230, 250)],
    "irregular": [(120, 200, 20), (150, 230, 40)],
}

_FLOOR_COLOR = (105, 105, 100)
_WALL_COLOR = (70, 70, 68)

# rigidity / density / relative-height ranges per shape
_PHYS = {
    "box": dict(rigidity=(0.8, 1.0), density=(0.4, 1.6), height=(0.5, 1.0)),
    "bag": dict(rigidity=(0.0, 0.3), density=(0.1, 0.5), height=(0.2, 0.5)),
    "bottle": dict(rigidity=(0.7, 1.0), density=(0.8, 2.0), height=(0.5, 1.0)),
    "envelope": dict(rigidity=(0.4, 0.7), density=(0.05, 0.3), height=(0.05, 0.15)),
    "cylinder": dict(rigidity=(0.7, 1.0), density=(0.5, 1.5), height=(0.4, 0.9)),
    "irregular": dict(rigidity=(0.2, 0.8), density=(0.2, 1.2), height=(0.3, 0.8)),
}

_FAILURE_MODES = ("drop", "multipick", "no_seal")
_FAILURE_PROBS = (0.40, 0.25, 0.35)

# internal scale turning footprint area fraction into oracle weight units
_AREA_SCALE = 12.0


class PlacementError(RuntimeError):
    pass


class EmptySceneError(RuntimeError):
    pass


class RatioError(RuntimeError):
    pass


@dataclasses.dataclass
class ItemSpec:
    item_id: int
    shape: str
    cx: float
    cy: float
    ax: float                  # half extent along item x axis, pixels
    ay: float
    theta: float               # footprint rotation, radians
    exponent: float            # superellipse exponent
    height: float
    semantic_class: int
    base_color: tuple[int, int, int]
    rigidity: float
    density: float
    footprint_px: int = 0
    top_height: float = 0.0    # resting height of the top surface


@dataclasses.dataclass
class PickScene:
    scene_id: int
    flavor: str
    rgb: np.ndarray            # H x W x 3 uint8
    depth: np.ndarray          # H x W float32, smaller = higher
    instance_mask: np.ndarray  # H x W uint16, 0 = background
    semantic_mask: np.ndarray  # H/4 x W/4 uint8
    items: list[ItemSpec]
    occlusion_fraction: dict[int, float]
    camera_height: float

    def item(self, item_id: int) -> ItemSpec:
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise KeyError(f"no item {item_id} in scene {self.scene_id}")


@dataclasses.dataclass(frozen=True)
class PickCandidate:
    target_item_id: int
    x: int
    y: int
    z: float
    approach_angle_bin: int
    wrist_rotation: float
    cup_activation: int        # bitmask over C cups


@dataclasses.dataclass
class PickRecord:
    candidate: PickCandidate
    scene_id: int
    success_prob: float
    label: int
    failure_mode: str          # "none" on success


def footprint_mask(item: ItemSpec, h: int, w: int) -> np.ndarray:
    """Boolean H x W mask of the item footprint (independent rasterization)."""
    ys, xs = np.mgrid[0:h, 0:w]
    return _footprint_on(item, xs.astype(np.float64), ys.astype(np.float64))


def _footprint_on(item: ItemSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx = xs - item.cx
    dy = ys - item.cy
    c, s = math.cos(item.theta), math.sin(item.theta)
    u = (c * dx + s * dy) / item.ax
    v = (-s * dx + c * dy) / item.ay
    n = item.exponent
    return np.abs(u) ** n + np.abs(v) ** n <= 1.0


def _sample_item(rng: np.random.Generator, item_id: int, flavor: str,
                 cfg: dict, interior: tuple[int, int, int, int]) -> ItemSpec:
    weights = _SHAPE_WEIGHTS[flavor]
    shapes = sorted(weights)
    probs = np.array([weights[s] for s in shapes])
    shape = shapes[int(rng.choice(len(shapes), p=probs / probs.sum()))]
    h, w = int(cfg["scene.height"]), int(cfg["scene.width"])
    base = min(h, w)
    lo, hi = float(cfg["scene.item_min_frac"]), float(cfg["scene.item_max_frac"])
    ax = rng.uniform(lo, hi) * base
    if shape in ("bottle", "cylinder"):
        ay = ax * rng.uniform(0.85, 1.0)
        exponent = 2.0
    elif shape == "envelope":
        ay = ax * rng.uniform(0.45, 0.7)
        exponent = 8.0
    elif shape == "box":
        ay = ax * rng.uniform(0.5, 1.0)
        exponent = 8.0
    elif shape == "bag":
        ay = ax * rng.uniform(0.6, 1.0)
        exponent = rng.uniform(1.2, 2.0)
    else:
        ay = ax * rng.uniform(0.5, 1.0)
        exponent = rng.uniform(1.0, 4.0)
    theta = rng.uniform(0.0, math.pi)
    phys = _PHYS[shape]
    rigidity = rng.uniform(*phys["rigidity"])
    density = rng.uniform(*phys["density"])
    hmin, hmax = float(cfg["scene.height_min"]), float(cfg["scene.height_max"])
    rel_lo, rel_hi = phys["height"]
    height = hmin + (hmax - hmin) * rng.uniform(rel_lo, rel_hi)
    if shape == "envelope":
        height = hmin * rng.uniform(0.5, 1.0)
    palette = (_PALETTE_GENERIC if flavor == "generic" else _PALETTE)[shape]
    color = palette[int(rng.integers(len(palette)))]
    y0, x0, y1, x1 = interior
    # placement: full footprint inside the interior; a rotated superellipse
    # can reach out to hypot(ax, ay) from its center (corners when n > 2)
    margin = math.hypot(ax, ay)
    tries = int(cfg["scene.max_place_tries"])
    for _ in range(tries):
        cx = rng.uniform(x0 + margin, x1 - margin) if x1 - x0 > 2 * margin else -1
        cy = rng.uniform(y0 + margin, y1 - margin) if y1 - y0 > 2 * margin else -1
        if cx >= 0 and cy >= 0:
            return ItemSpec(
                item_id=item_id, shape=shape, cx=cx, cy=cy, ax=ax, ay=ay,
                theta=theta, exponent=exponent, height=height,
                semantic_class=SHAPE_TO_CLASS[shape], base_color=color,
                rigidity=rigidity, density=density,
            )
        # item too large for the interior: shrink and retry
        ax *= 0.8
        ay *= 0.8
        margin = math.hypot(ax, ay)
    raise PlacementError(
        f"could not place item {item_id} ({shape}) inside a "
        f"{y1 - y0}x{x1 - x0} interior after {tries} tries"
    )


def _semantic_downsample(semantic_full: np.ndarray) -> np.ndarray:
    """Majority-vote 4x4 pooling; ties broken toward the smaller class id."""
    h, w = semantic_full.shape
    blocks = semantic_full.reshape(h // 4, 4, w // 4, 4)
    counts = np.stack(
        [(blocks == c).sum(axis=(1, 3)) for c in range(len(SEMANTIC_CLASSES))]
    )
    return counts.argmax(axis=0).astype(np.uint8)


def generate_scene(flavor: str, rng_seed: int, cfg: dict,
                   scene_id: int | None = None) -> PickScene:
    """Deterministic scene for (flavor, rng_seed, config)."""
    if flavor not in FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}; valid: {FLAVORS}")
    h, w = int(cfg["scene.height"]), int(cfg["scene.width"])
    if h % 4 or w % 4:
        raise ValueError(f"scene dims must be divisible by 4, got {h}x{w}")
    rng = rngmod.stream(rng_seed, f"scenegen/{flavor}")
    camera = float(cfg["scene.camera_height"])

    heightmap = np.zeros((h, w), dtype=np.float64)
    instance = np.zeros((h, w), dtype=np.uint16)
    semantic = np.zeros((h, w), dtype=np.uint8)
    rgb = np.zeros((h, w, 3), dtype=np.float64)

    if flavor == "generic":
        interior = (0, 0, h, w)
        rgb[:] = (40.0, 45.0, 55.0)
    else:
        wall = int(cfg["scene.tote_wall_px"])
        interior = (wall, wall, h - wall, w - wall)
        semantic[:] = SEMANTIC_CLASSES.index("tote_wall")
        semantic[wall:h - wall, wall:w - wall] = SEMANTIC_CLASSES.index("tote_floor")
        heightmap[:] = float(cfg["scene.tote_wall_height"])
        heightmap[wall:h - wall, wall:w - wall] = 0.0
        rgb[:] = _WALL_COLOR
        rgb[wall:h - wall, wall:w - wall] = _FLOOR_COLOR

    items: list[ItemSpec] = []
    num_items = int(cfg["scene.num_items"])
    for idx in range(num_items):
        item = _sample_item(rng, idx + 1, flavor, cfg, interior)
        # rasterize on the footprint bounding box only
        r = int(math.ceil(math.hypot(item.ax, item.ay))) + 2
        yb0, yb1 = max(0, int(item.cy) - r), min(h, int(item.cy) + r + 1)
        xb0, xb1 = max(0, int(item.cx) - r), min(w, int(item.cx) + r + 1)
        ys, xs = np.mgrid[yb0:yb1, xb0:xb1]
        mask = _footprint_on(item, xs.astype(np.float64), ys.astype(np.float64))
        if not mask.any():
            raise PlacementError(f"item {item.item_id} rasterized to zero pixels")
        sub_h = heightmap[yb0:yb1, xb0:xb1]
        base = float(sub_h[mask].max())
        item.top_height = base + item.height
        item.footprint_px = int(mask.sum())
        sub_h[mask] = item.top_height
        instance[yb0:yb1, xb0:xb1][mask] = item.item_id
        semantic[yb0:yb1, xb0:xb1][mask] = item.semantic_class
        shade = 0.78 + 0.22 * min(1.0, item.top_height / max(1e-9, camera * 0.4))
        rgb[yb0:yb1, xb0:xb1][mask] = np.array(item.base_color, dtype=np.float64) * shade
        items.append(item)

    noise = rng.normal(0.0, float(cfg["scene.rgb_noise"]), size=rgb.shape)
    rgb = np.clip(rgb + noise, 0, 255).astype(np.uint8)
    depth = (camera - heightmap).astype(np.float32)

    noise_prob = float(cfg["scene.mask_noise_prob"])
    if noise_prob > 0.0:
        instance, semantic = _corrupt_masks(rng, instance, semantic, items, noise_prob)

    occ: dict[int, float] = {}
    for item in items:
        visible = int((instance == item.item_id).sum())
        occ[item.item_id] = 1.0 - visible / max(1, item.footprint_px)

    return PickScene(
        scene_id=rng_seed if scene_id is None else scene_id,
        flavor=flavor,
        rgb=rgb,
        depth=depth,
        instance_mask=instance,
        semantic_mask=_semantic_downsample(semantic),
        items=items,
        occlusion_fraction=occ,
        camera_height=camera,
    )


def _corrupt_masks(rng, instance, semantic, items, prob):
    """Boundary erosion/dilation mimicking a learned segmenter. Default off."""
    out_i, out_s = instance.copy(), semantic.copy()
    for item in items:
        if rng.random() >= prob:
            continue
        mask = instance == item.item_id
        if not mask.any():
            continue
        shifted = np.zeros_like(mask)
        dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][int(rng.integers(4))]
        if rng.random() < 0.5:  # dilate: union with a 1-px shift
            _shift_into(shifted, mask, dy, dx)
            grow = shifted & (instance == 0)
            out_i[grow] = item.item_id
            out_s[grow] = item.semantic_class
        else:  # erode: intersect with a 1-px shift
            _shift_into(shifted, mask, dy, dx)
            lost = mask & ~shifted
            out_i[lost] = 0
            out_s[lost] = SEMANTIC_CLASSES.index("tote_floor")
    return out_i, out_s


def _shift_into(dst, src, dy, dx):
    h, w = src.shape
    dst[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        src[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]


# ---------------------------------------------------------------------------
# Suction gripper geometry
# ---------------------------------------------------------------------------


def cup_offsets(cfg: dict) -> np.ndarray:
    """Cup center offsets (C x 2, x/y pixels) before wrist rotation."""
    nx, ny = int(cfg["gripper.cups_x"]), int(cfg["gripper.cups_y"])
    scale = float(cfg["scene.height"]) / 512.0
    spacing = float(cfg["gripper.spacing"]) * scale
    xs = (np.arange(nx) - (nx - 1) / 2.0) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * spacing
    grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    return grid  # row-major: y slow, x fast


def cup_centers(cfg: dict, x: int, y: int, wrist: float) -> np.ndarray:
    offs = cup_offsets(cfg)
    c, s = math.cos(wrist), math.sin(wrist)
    rot = offs @ np.array([[c, s], [-s, c]])
    return rot + np.array([x, y], dtype=np.float64)


def cup_footprint_pixels(cfg: dict, x: int, y: int, wrist: float,
                         active_mask: int, shape: tuple[int, int]):
    """(ys, xs) of all in-image pixels under the active cups' discs."""
    h, w = shape
    scale = float(cfg["scene.height"]) / 512.0
    radius = float(cfg["gripper.radius"]) * scale
    centers = cup_centers(cfg, x, y, wrist)
    r = int(math.ceil(radius))
    offs_y, offs_x = np.mgrid[-r:r + 1, -r:r + 1]
    disc = offs_y**2 + offs_x**2 <= radius**2
    ys_list, xs_list = [], []
    for i, (cx, cy) in enumerate(centers):
        if not (active_mask >> i) & 1:
            continue
        py = np.round(cy).astype(int) + offs_y[disc]
        px = np.round(cx).astype(int) + offs_x[disc]
        ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
        ys_list.append(py[ok])
        xs_list.append(px[ok])
    if not ys_list:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(ys_list), np.concatenate(xs_list)


def _cups_on_target(cfg: dict, scene: PickScene, x: int, y: int,
                    wrist: float, target: int) -> int:
    """Bitmask of cups whose centers land on the target's visible mask."""
    centers = cup_centers(cfg, x, y, wrist)
    h, w = scene.instance_mask.shape
    mask = 0
    for i, (cx, cy) in enumerate(centers):
        px, py = int(round(cx)), int(round(cy))
        if 0 <= py < h and 0 <= px < w and scene.instance_mask[py, px] == target:
            mask |= 1 << i
    if mask == 0:
        # degenerate sliver: fall back to the cup closest to the pick point
        d = np.hypot(centers[:, 0] - x, centers[:, 1] - y)
        mask = 1 << int(d.argmin())
    return mask


# ---------------------------------------------------------------------------
# Pick candidates and the analytic oracle
# ---------------------------------------------------------------------------


def generate_pick_candidates(scene: PickScene, mode: str, k: int,
                             rng_seed: int, cfg: dict) -> list[PickCandidate]:
    if mode not in ("ranked", "random"):
        raise ValueError(f"unknown mode {mode!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    visible = scene.instance_mask > 0
    ys, xs = np.nonzero(visible)
    if ys.size == 0:
        raise EmptySceneError(f"scene {scene.scene_id} has no visible item pixels")
    rng = rngmod.stream(rng_seed, f"picks/{mode}")
    angle_bins = int(cfg["pick.angle_bins"])

    def make(ix: int) -> PickCandidate:
        y, x = int(ys[ix]), int(xs[ix])
        target = int(scene.instance_mask[y, x])
        wrist = float(rng.uniform(0.0, 2.0 * math.pi))
        angle = int(rng.integers(angle_bins))
        cups = _cups_on_target(cfg, scene, x, y, wrist, target)
        return PickCandidate(
            target_item_id=target, x=x, y=y,
            z=float(scene.depth[y, x]),
            approach_angle_bin=angle, wrist_rotation=wrist,
            cup_activation=cups,
        )

    if mode == "random":
        picks = rng.integers(ys.size, size=k)
        return [make(int(i)) for i in picks]

    # ranked: over-sample, score by cup-seal heuristic x (1 - occlusion), keep best
    pool = min(ys.size, max(8 * k, 32))
    idxs = rng.choice(ys.size, size=pool, replace=pool > ys.size)
    scored = []
    for order, i in enumerate(idxs):
        cand = make(int(i))
        occ = scene.occlusion_fraction[cand.target_item_id]
        seal = _seal_fraction(cfg, scene, cand)
        scored.append((-(seal * (1.0 - occ)), order, cand))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [cand for _, _, cand in scored[:k]]


def _seal_fraction(cfg: dict, scene: PickScene, cand: PickCandidate) -> float:
    """Fraction of active-cup footprint pixels on the target's visible,
    depth-consistent surface."""
    ys, xs = cup_footprint_pixels(
        cfg, cand.x, cand.y, cand.wrist_rotation, cand.cup_activation,
        scene.instance_mask.shape,
    )
    if ys.size == 0:
        return 0.0
    on_target = scene.instance_mask[ys, xs] == cand.target_item_id
    depth_ok = np.abs(scene.depth[ys, xs] - cand.z) <= float(cfg["oracle.tau"])
    return float((on_target & depth_ok).mean())


def oracle_success_prob(scene: PickScene, cand: PickCandidate, cfg: dict) -> float:
    """Hidden analytic ground truth; models never see this."""
    item = scene.item(cand.target_item_id)
    seal = _seal_fraction(cfg, scene, cand)

    ys, xs = cup_footprint_pixels(
        cfg, cand.x, cand.y, cand.wrist_rotation, cand.cup_activation,
        scene.instance_mask.shape,
    )
    depth_var = float(np.var(scene.depth[ys, xs])) if ys.size else 0.0

    vis = scene.instance_mask == cand.target_item_id
    vys, vxs = np.nonzero(vis)
    if vys.size:
        cy, cx = float(vys.mean()), float(vxs.mean())
        span = math.hypot(vys.max() - vys.min() + 1, vxs.max() - vxs.min() + 1)
        cdist = min(2.0, math.hypot(cand.y - cy, cand.x - cx) / max(1.0, span / 2.0))
    else:
        cdist = 2.0

    h, w = scene.instance_mask.shape
    area = item.footprint_px / float(h * w) * _AREA_SCALE
    n_active = bin(cand.cup_activation).count("1")
    deficit = max(0.0, item.density * area
                  - float(cfg["gripper.lift_capacity"]) * n_active)
    deficit /= float(cfg["oracle.weight_scale"])

    logit = (
        float(cfg["oracle.w0"])
        + float(cfg["oracle.w_seal"]) * seal
        - float(cfg["oracle.w_depth_var"]) * depth_var
        - float(cfg["oracle.w_centroid"]) * cdist
        - float(cfg["oracle.w_weight"]) * deficit
        + float(cfg["oracle.w_rigidity"]) * item.rigidity
    )
    eps = float(cfg["oracle.eps"])
    p = 1.0 / (1.0 + math.exp(-logit))
    return float(min(1.0 - eps, max(eps, p)))


def label_pick(prob: float, rng_seed: int) -> tuple[int, str]:
    """Bernoulli label plus a failure mode drawn from a fixed categorical."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0,1], got {prob}")
    rng = rngmod.stream(rng_seed, "label")
    if rng.random() < prob:
        return 1, "none"
    mode = rng.choice(len(_FAILURE_MODES), p=np.array(_FAILURE_PROBS))
    return 0, _FAILURE_MODES[int(mode)]
