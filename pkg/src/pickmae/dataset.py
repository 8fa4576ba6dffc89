"""Dataset assembly: scenes + pick records on disk, with ratio resampling.

Layout: root/{flavor}/{split}/scene_{id}/ holding the four modality blobs,
per-scene picks.manifest and items.txt, plus one flavor-level manifest.txt.
Splits occupy disjoint scene-id bands, so disjointness holds by construction.
"""

import math
import os

import numpy as np

from . import config as cfgmod
from . import datastore, scenegen
from . import rng as rngmod

SPLIT_BANDS = {"pretrain": 0, "train": 1_000_000, "val": 2_000_000, "test": 3_000_000}

TARGET_RATIOS = {"standard": 11.0, "random": 4.4, "package": 2.0, "generic": 11.0}


def scene_rel_path(split: str, scene_id: int) -> str:
    return os.path.join(split, f"scene_{scene_id:07d}")


def write_scene(scene_dir: str, scene: scenegen.PickScene) -> None:
    os.makedirs(scene_dir, exist_ok=True)
    datastore.write_tensor(os.path.join(scene_dir, "rgb.pkt"), scene.rgb)
    datastore.write_tensor(os.path.join(scene_dir, "depth.pkt"), scene.depth)
    datastore.write_tensor(os.path.join(scene_dir, "instance.pkt"), scene.instance_mask)
    datastore.write_tensor(os.path.join(scene_dir, "semantic.pkt"), scene.semantic_mask)
    lines = [
        f"scene_id={scene.scene_id}",
        f"flavor={scene.flavor}",
        f"camera_height={scene.camera_height!r}",
    ]
    for it in scene.items:
        color = ",".join(str(c) for c in it.base_color)
        lines.append(
            f"item id={it.item_id} shape={it.shape} cx={it.cx!r} cy={it.cy!r} "
            f"ax={it.ax!r} ay={it.ay!r} theta={it.theta!r} n={it.exponent!r} "
            f"height={it.height!r} class={it.semantic_class} color={color} "
            f"rigidity={it.rigidity!r} density={it.density!r} "
            f"footprint={it.footprint_px} top={it.top_height!r}"
        )
    tmp = os.path.join(scene_dir, "items.txt")
    with open(tmp + ".tmp", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp + ".tmp", tmp)


def load_scene(scene_dir: str) -> scenegen.PickScene:
    rgb = datastore.read_tensor(os.path.join(scene_dir, "rgb.pkt"))
    depth = datastore.read_tensor(os.path.join(scene_dir, "depth.pkt"))
    instance = datastore.read_tensor(os.path.join(scene_dir, "instance.pkt"))
    semantic = datastore.read_tensor(os.path.join(scene_dir, "semantic.pkt"))
    header: dict[str, str] = {}
    items: list[scenegen.ItemSpec] = []
    with open(os.path.join(scene_dir, "items.txt"), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("item "):
                kv = dict(tok.split("=", 1) for tok in line[len("item "):].split())
                items.append(scenegen.ItemSpec(
                    item_id=int(kv["id"]), shape=kv["shape"],
                    cx=float(kv["cx"]), cy=float(kv["cy"]),
                    ax=float(kv["ax"]), ay=float(kv["ay"]),
                    theta=float(kv["theta"]), exponent=float(kv["n"]),
                    height=float(kv["height"]), semantic_class=int(kv["class"]),
                    base_color=tuple(int(c) for c in kv["color"].split(",")),
                    rigidity=float(kv["rigidity"]), density=float(kv["density"]),
                    footprint_px=int(kv["footprint"]), top_height=float(kv["top"]),
                ))
            else:
                k, v = line.split("=", 1)
                header[k] = v
    occ = {
        it.item_id: 1.0 - int((instance == it.item_id).sum()) / max(1, it.footprint_px)
        for it in items
    }
    return scenegen.PickScene(
        scene_id=int(header["scene_id"]),
        flavor=header["flavor"],
        rgb=rgb, depth=depth, instance_mask=instance, semantic_mask=semantic,
        items=items, occlusion_fraction=occ,
        camera_height=float(header["camera_height"]),
    )


def _scene_seed(global_seed: int, flavor: str, scene_id: int) -> int:
    return rngmod.stream_key(global_seed, f"{flavor}/scene", scene_id) % (2**31)


def build_dataset(
    flavor: str,
    counts: dict[str, int],
    target_ratio: float,
    rng_seed: int,
    cfg: dict,
    root: str | None = None,
) -> str:
    """Generate a dataset; returns the flavor manifest path.

    counts: pretrain = number of scenes; train/val/test = number of pick
    records, rejection-resampled to target_ratio (success:fail) within the
    configured tolerance.
    """
    if flavor not in scenegen.FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}")
    if target_ratio <= 0:
        raise ValueError("target_ratio must be > 0")
    root = root if root is not None else cfgmod.data_root(cfg)
    flavor_dir = os.path.join(root, flavor)
    os.makedirs(flavor_dir, exist_ok=True)
    mode = "random" if flavor == "random" else "ranked"
    picks_per_scene = int(cfg["data.picks_per_scene"])
    tol = float(cfg["data.ratio_tol"])

    records: list[datastore.RecordEntry] = []
    pretrain_scenes: list[str] = []
    ratios: dict[str, float] = {}

    n_pre = int(counts.get("pretrain", 0))
    for idx in range(n_pre):
        scene_id = SPLIT_BANDS["pretrain"] + idx
        scene = scenegen.generate_scene(
            flavor, _scene_seed(rng_seed, flavor, scene_id), cfg, scene_id=scene_id)
        rel = scene_rel_path("pretrain", scene_id)
        write_scene(os.path.join(flavor_dir, rel), scene)
        pretrain_scenes.append(rel)

    for split in ("train", "val", "test"):
        count = int(counts.get(split, 0))
        if count == 0:
            continue
        n_neg = max(1, round(count / (target_ratio + 1.0)))
        n_pos = count - n_neg
        if n_pos < 1:
            raise scenegen.RatioError(f"{split}: count {count} too small for ratio {target_ratio}")
        achieved = n_pos / n_neg
        if abs(achieved / target_ratio - 1.0) > tol:
            raise scenegen.RatioError(
                f"{split}: count {count} cannot hit ratio {target_ratio} "
                f"within {tol:.0%} (closest {achieved:.2f})"
            )
        got_pos = got_neg = 0
        split_records: list[datastore.RecordEntry] = []
        max_scenes = 60 * max(1, math.ceil(count / picks_per_scene))
        idx = 0
        while (got_pos < n_pos or got_neg < n_neg) and idx < max_scenes:
            scene_id = SPLIT_BANDS[split] + idx
            idx += 1
            scene = scenegen.generate_scene(
                flavor, _scene_seed(rng_seed, flavor, scene_id), cfg, scene_id=scene_id)
            cands = scenegen.generate_pick_candidates(
                scene, mode, picks_per_scene,
                rngmod.stream_key(rng_seed, f"{flavor}/cand", scene_id) % (2**31), cfg)
            rel = scene_rel_path(split, scene_id)
            scene_recs = []
            for i, cand in enumerate(cands):
                prob = scenegen.oracle_success_prob(scene, cand, cfg)
                label, failure = scenegen.label_pick(
                    prob,
                    rngmod.stream_key(rng_seed, f"{flavor}/label/{scene_id}", i) % (2**31),
                )
                if label == 1 and got_pos >= n_pos:
                    continue
                if label == 0 and got_neg >= n_neg:
                    continue
                got_pos += label
                got_neg += 1 - label
                scene_recs.append(datastore.RecordEntry(
                    split=split, scene_id=scene_id, path=rel,
                    target=cand.target_item_id, x=cand.x, y=cand.y, z=cand.z,
                    angle=cand.approach_angle_bin, wrist=cand.wrist_rotation,
                    cups=cand.cup_activation, prob=prob, label=label,
                    failure=failure,
                ))
            if scene_recs:
                write_scene(os.path.join(flavor_dir, rel), scene)
                lines = [r.to_line() for r in scene_recs]
                path = os.path.join(flavor_dir, rel, "picks.manifest")
                with open(path + ".tmp", "w", encoding="utf-8") as f:
                    f.write("\n".join(lines) + "\n")
                os.replace(path + ".tmp", path)
                split_records.extend(scene_recs)
        if got_pos < n_pos or got_neg < n_neg:
            raise scenegen.RatioError(
                f"{split}: ratio {target_ratio} unreachable after {max_scenes} scenes "
                f"(have {got_pos}/{n_pos} successes, {got_neg}/{n_neg} failures)"
            )
        ratios[split] = got_pos / got_neg
        records.extend(split_records)

    manifest = datastore.DatasetManifest(
        format_version=datastore.FORMAT_VERSION,
        flavor=flavor,
        config_hash=cfgmod.config_hash(cfg, keys_prefix=None),
        ratios=ratios,
        records=records,
        pretrain_scenes=pretrain_scenes,
    )
    manifest_path = os.path.join(flavor_dir, "manifest.txt")
    datastore.write_manifest(manifest_path, manifest)
    return manifest_path


def record_to_candidate(rec: datastore.RecordEntry) -> scenegen.PickCandidate:
    return scenegen.PickCandidate(
        target_item_id=rec.target, x=rec.x, y=rec.y, z=rec.z,
        approach_angle_bin=rec.angle, wrist_rotation=rec.wrist,
        cup_activation=rec.cups,
    )


class SceneCache:
    """Lazy loader for scene dirs with a bounded in-memory cache."""

    def __init__(self, flavor_dir: str, max_items: int = 4096):
        self.flavor_dir = flavor_dir
        self.max_items = max_items
        self._cache: dict[str, scenegen.PickScene] = {}

    def get(self, rel_path: str) -> scenegen.PickScene:
        scene = self._cache.get(rel_path)
        if scene is None:
            scene = load_scene(os.path.join(self.flavor_dir, rel_path))
            if len(self._cache) >= self.max_items:
                self._cache.pop(next(iter(self._cache)))
            self._cache[rel_path] = scene
        return scene
