"""Flat key-value configuration.

Config files are plain text, one `key = value` per line, keys in dotted
namespaces. The default table below is the schema: unknown keys are rejected,
values are coerced to the type of the default. CLI overrides (`--key=value`)
win over file values.
"""

import hashlib
import os
from typing import Union

Value = Union[int, float, bool, str]


class ConfigError(ValueError):
    pass


# Desk-scale defaults. The "full" profile restores the geometry used by the
# reference experiments (512x612 scenes, 224 model input, ViT-B encoder).
DEFAULTS: dict[str, Value] = {
    # scene generation
    "scene.height": 128,
    "scene.width": 152,
    "scene.num_items": 8,
    "scene.camera_height": 2.0,
    "scene.tote_wall_px": 4,
    "scene.tote_wall_height": 0.45,
    "scene.item_min_frac": 0.10,
    "scene.item_max_frac": 0.26,
    "scene.height_min": 0.05,
    "scene.height_max": 0.30,
    "scene.max_place_tries": 60,
    "scene.mask_noise_prob": 0.0,
    "scene.rgb_noise": 6.0,
    # suction gripper: cups on a 2x4 grid; geometry in pixels at 512-row
    # scenes, scaled by scene.height/512 at runtime
    "gripper.cups_x": 4,
    "gripper.cups_y": 2,
    "gripper.spacing": 26.0,
    "gripper.radius": 11.0,
    "gripper.lift_capacity": 0.35,
    # analytic success oracle (never visible to models)
    "oracle.w0": -9.0,
    "oracle.w_seal": 12.0,
    "oracle.w_depth_var": 150.0,
    "oracle.w_centroid": 2.0,
    "oracle.w_weight": 4.0,
    "oracle.w_rigidity": 1.5,
    "oracle.tau": 0.03,
    "oracle.weight_scale": 1.0,
    "oracle.eps": 1e-3,
    # dataset assembly
    "data.root": "",
    "data.flavor": "standard",
    "data.picks_per_scene": 4,
    "data.ratio_tol": 0.05,
    "data.count_pretrain": 200,
    "data.count_train": 400,
    "data.count_val": 120,
    "data.count_test": 160,
    # model geometry
    "model.input_size": 64,
    "model.grid": 8,
    "model.embed_dim": 128,
    "model.depth": 4,
    "model.heads": 4,
    "model.mlp_ratio": 4.0,
    "model.dec_depth": 2,
    "model.dec_dim": 64,
    "model.class_embed_dim": 16,
    "model.num_classes": 9,
    "model.semantic_downsample": 4,
    "model.visible_frac": 0.16666666666666666,
    "model.mask_alpha": 1.0,
    "model.loss_w_rgb": 1.0,
    "model.loss_w_depth": 1.0,
    "model.loss_w_semantic": 1.0,
    "model.pretrain_modalities": "rgb,depth,semantic",
    "model.finetune_modalities": "rgb,depth,pickloc",
    "model.stacked": False,
    "model.weighting": "cross_attention",
    "model.attn_heads": 1,
    "model.head_hidden": 128,
    "model.head_depth": 2,
    # pick candidates / features
    "pick.angle_bins": 8,
    "pick.marker_side": 9,
    # local crop (pixels at 512-row scenes, scaled by scene.height/512)
    "crop.mode": "local",
    "crop.padding": 50.0,
    "crop.augment": True,
    "crop.shift_max": 25.0,
    "crop.pad_step": 50.0,
    "crop.pad_max": 150.0,
    # training
    "train.stage": "finetune",
    "train.lr": 1e-3,
    "train.weight_decay": 0.02,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.warmup_epochs": 1,
    "train.epochs": 20,
    "train.batch_size": 32,
    "train.patience": 5,
    "train.freeze_encoder": False,
    "train.random_init": False,
    "train.init_from": "",
    "train.pretrain_data_ratio": 1.0,
    "train.finetune_data_ratio": 1.0,
    "train.pos_weight_auto": True,
    "train.pos_weight": 1.0,
    "train.neg_weight": 1.0,
    "train.mode_64bit": False,
    "train.checkpoint_epochs": "",
    "train.seed": 0,
    # transfer protocol: later finetune stages adapt gently and keep the
    # incoming model unless target-flavor validation improves by a margin
    "train.transfer_lr_scale": 0.1,
    "train.transfer_min_gain": 0.01,
    # evaluation
    "eval.threshold": 0.5,
}

PROFILES: dict[str, dict[str, Value]] = {
    "desk": {},
    "full": {
        "scene.height": 512,
        "scene.width": 612,
        "model.input_size": 224,
        "model.grid": 14,
        "model.embed_dim": 768,
        "model.depth": 12,
        "model.heads": 12,
        "model.dec_dim": 384,
    },
}


def _coerce(key: str, raw: str) -> Value:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a float, got {raw!r}") from e
    return raw.strip()


def _check_key(key: str) -> None:
    if key not in DEFAULTS:
        known = ", ".join(sorted(DEFAULTS))
        raise ConfigError(f"unknown config key {key!r}; valid keys: {known}")


def default_config(profile: str = "desk") -> dict[str, Value]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; valid: {sorted(PROFILES)}")
    cfg = dict(DEFAULTS)
    cfg.update(PROFILES[profile])
    return cfg


def parse_config_text(text: str) -> dict[str, Value]:
    out: dict[str, Value] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        _check_key(key)
        out[key] = _coerce(key, raw)
    return out


def load_config(
    path: str | None = None,
    profile: str = "desk",
    overrides: dict[str, Value] | list[str] | None = None,
) -> dict[str, Value]:
    """Resolve profile defaults, then file values, then explicit overrides."""
    cfg = default_config(profile)
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            cfg.update(parse_config_text(f.read()))
    for key, value in parse_overrides(overrides).items():
        cfg[key] = value
    return cfg


def parse_overrides(
    overrides: dict[str, Value] | list[str] | None,
) -> dict[str, Value]:
    if overrides is None:
        return {}
    if isinstance(overrides, dict):
        for key in overrides:
            _check_key(key)
        return dict(overrides)
    out: dict[str, Value] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        _check_key(key)
        out[key] = _coerce(key, raw)
    return out


def format_config(cfg: dict[str, Value]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: dict[str, Value], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    os.replace(tmp, path)


def config_hash(cfg: dict[str, Value], keys_prefix: str | None = None) -> str:
    """Stable hash over the (optionally prefix-filtered) config."""
    items = {
        k: v
        for k, v in cfg.items()
        if keys_prefix is None or k.startswith(keys_prefix)
    }
    return hashlib.sha256(format_config(items).encode()).hexdigest()[:16]


def modality_list(cfg: dict[str, Value], key: str) -> list[str]:
    names = [m.strip() for m in str(cfg[key]).split(",") if m.strip()]
    valid = {"rgb", "depth", "semantic", "pickloc", "stacked"}
    for m in names:
        if m not in valid:
            raise ConfigError(f"{key}: unknown modality {m!r}; valid: {sorted(valid)}")
    return names


def data_root(cfg: dict[str, Value]) -> str:
    root = str(cfg.get("data.root", "")) or os.environ.get("PICKMAE_DATA_ROOT", "")
    return root or os.path.join(os.getcwd(), "data")
