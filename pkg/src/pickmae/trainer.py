"""Training orchestration: self-supervised pretraining and success finetuning.

All stochasticity (init, shuffles, mask plans, crop augmentation) comes from
counter-based streams keyed by (seed, purpose, index); repeated runs with one
seed produce byte-identical checkpoints and reports in 64-bit mode.
"""

import math
import os

import numpy as np
import torch

from . import config as cfgmod
from . import crops, datastore, dataset, metrics, multimae, pickmodel
from . import rng as rngmod


class TrainerError(RuntimeError):
    pass


def set_global_determinism(seed: int) -> None:
    """Seed the torch global generator (used for parameter init only).

    Everything else draws from per-purpose counter-based streams.
    """
    torch.manual_seed(rngmod.torch_manual_seed(seed, "torch_global"))


def _dtype(cfg) -> torch.dtype:
    if bool(cfg["train.mode_64bit"]):
        torch.set_num_threads(1)
        return torch.float64
    return torch.float32


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _lr_factor(epoch: int, total: int, warmup: int) -> float:
    if total <= 0:
        return 1.0
    if warmup > 0 and epoch < warmup:
        return (epoch + 1) / warmup
    span = max(1, total - warmup)
    t = min(1.0, (epoch - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * t))


def _subset(items: list, ratio: float, seed: int, purpose: str) -> list:
    """Nested ratio subsets: the r1 subset is a prefix of the r2 subset, r1<r2."""
    if not 0.0 < ratio <= 1.0:
        raise TrainerError(f"data ratio must be in (0,1], got {ratio}")
    perm = rngmod.stream(seed, purpose).permutation(len(items))
    keep = max(1, int(round(ratio * len(items))))
    return [items[i] for i in perm[:keep]]


def _build_backbone(cfg, modalities: tuple[str, ...], seed: int) -> multimae.MultiMae:
    grid_cfg = multimae.TokenGridConfig.from_config(cfg)
    torch.manual_seed(rngmod.torch_manual_seed(seed, "init"))
    return multimae.MultiMae(grid_cfg, modalities=modalities, dtype=_dtype(cfg))


def model_to_params(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }


def load_params(model: torch.nn.Module, params: dict[str, np.ndarray],
                origin: str = "<checkpoint>") -> list[str]:
    """Load a (possibly partial) parameter table; returns loaded names.

    Every checkpoint parameter must exist in the model with a matching shape;
    all mismatches are reported at once.
    """
    own = dict(model.named_parameters())
    problems = []
    for name, arr in sorted(params.items()):
        if name not in own:
            problems.append(f"{name}: not in model")
        elif tuple(own[name].shape) != tuple(arr.shape):
            problems.append(
                f"{name}: checkpoint {tuple(arr.shape)} vs model {tuple(own[name].shape)}")
    if problems:
        raise datastore.DatastoreError(f"{origin}: " + "; ".join(problems))
    with torch.no_grad():
        for name, arr in params.items():
            own[name].copy_(torch.from_numpy(arr).to(own[name].dtype))
    return sorted(params)


def _save_checkpoint(path: str, model: torch.nn.Module, cfg, provenance: dict,
                     seed: int) -> None:
    snapshot = dict(
        line.split(" = ", 1)
        for line in cfgmod.format_config(cfg).strip().split("\n"))
    ckpt = datastore.Checkpoint(
        params=model_to_params(model),
        config=snapshot,
        provenance={k: str(v) for k, v in provenance.items()},
        rng_digest=f"{rngmod.stream_key(seed, 'rng_digest'):032x}",
    )
    datastore.write_checkpoint(path, ckpt)


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------


def _random_square_window(scene, rng) -> crops.CropWindow:
    h, w = scene.instance_mask.shape
    lo = max(16, int(0.35 * min(h, w)))
    size = int(rng.integers(lo // 4, min(h, w) // 4 + 1)) * 4
    size = max(16, min(size, min(h, w)))
    x0 = int(rng.integers((w - size) // 4 + 1)) * 4
    y0 = int(rng.integers((h - size) // 4 + 1)) * 4
    return crops.CropWindow(x0, y0, x0 + size, y0 + size, source_h=h, source_w=w)


def _planes_for(cfg, scene, window, modalities) -> dict[str, np.ndarray]:
    size = int(cfg["model.input_size"])
    planes = crops.crop_and_resize(scene, window, size,
                                   int(cfg["model.semantic_downsample"]))
    if "stacked" in modalities:
        return {"stacked": crops.stacked_plane(planes, int(cfg["model.num_classes"]))}
    return {m: planes[m] for m in modalities if m in planes}


def _stack_batch(plane_dicts: list[dict[str, np.ndarray]], dtype) -> dict[str, torch.Tensor]:
    out = {}
    for m in plane_dicts[0]:
        arr = np.stack([p[m] for p in plane_dicts])
        t = torch.from_numpy(arr)
        out[m] = t.long() if m == "semantic" else t.to(dtype)
    return out


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain(cfg, run_dir: str, flavor: str | None = None,
             root: str | None = None) -> str:
    """Masked-reconstruction pretraining; returns the final checkpoint path."""
    flavor = flavor or str(cfg["data.flavor"])
    root = root if root is not None else cfgmod.data_root(cfg)
    seed = int(cfg["train.seed"])
    manifest_path = os.path.join(root, flavor, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise TrainerError(f"dataset missing: {manifest_path}")
    manifest = datastore.read_manifest(manifest_path, validate=False)
    scenes = list(manifest.pretrain_scenes)
    if not scenes:
        raise TrainerError(f"{manifest_path}: no pretrain scenes")
    scenes = _subset(scenes, float(cfg["train.pretrain_data_ratio"]), seed,
                     "pretrain_subset")
    cache = dataset.SceneCache(os.path.join(root, flavor))

    modalities = tuple(cfgmod.modality_list(cfg, "model.pretrain_modalities"))
    if bool(cfg["model.stacked"]):
        modalities = ("stacked",)
    model = _build_backbone(cfg, modalities, seed)
    dtype = model.dtype
    grid_cfg = model.grid_cfg
    budget = max(1, int(float(cfg["model.visible_frac"])
                        * len(modalities) * grid_cfg.tokens))
    loss_w = {
        "rgb": float(cfg["model.loss_w_rgb"]),
        "depth": float(cfg["model.loss_w_depth"]),
        "semantic": float(cfg["model.loss_w_semantic"]),
        "stacked": 1.0,
    }

    epochs = int(cfg["train.epochs"])
    base_lr = float(cfg["train.lr"])
    opt = torch.optim.AdamW(
        model.parameters(), lr=base_lr,
        betas=(float(cfg["train.beta1"]), float(cfg["train.beta2"])),
        weight_decay=float(cfg["train.weight_decay"]))
    batch_size = int(cfg["train.batch_size"])
    ckpt_epochs = {int(e) for e in str(cfg["train.checkpoint_epochs"]).split(",") if e.strip()}
    warmup = int(cfg["train.warmup_epochs"])

    os.makedirs(run_dir, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(run_dir, "config.snapshot"))
    provenance = {"stage": "pretrain", "flavor": flavor,
                  "dataset_hash": datastore.manifest_content_hash(manifest_path),
                  "epochs": epochs}
    log_lines = ["epoch,loss_total," + ",".join(f"loss_{m}" for m in modalities)]

    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = base_lr * _lr_factor(epoch, epochs, warmup)
        order = rngmod.stream(seed, "shuffle/pretrain", epoch).permutation(len(scenes))
        sums = {m: 0.0 for m in modalities}
        total_sum, steps = 0.0, 0
        for b0 in range(0, len(order), batch_size):
            idxs = order[b0:b0 + batch_size]
            plane_dicts = []
            for i in idxs:
                scene = cache.get(scenes[int(i)])
                rng = rngmod.stream(seed, f"precrop/{epoch}", int(i))
                window = _random_square_window(scene, rng)
                plane_dicts.append(_planes_for(cfg, scene, window, modalities))
            batch = _stack_batch(plane_dicts, dtype)
            plan = multimae.sample_mask_plan(
                rngmod.stream_key(seed, f"mask/{epoch}", steps) % (2**31),
                list(modalities), grid_cfg.tokens, budget,
                alpha=float(cfg["model.mask_alpha"]))
            losses, _ = model.forward_pretrain(batch, plan, loss_w)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for m in modalities:
                sums[m] += float(losses[m].detach())
            total_sum += float(losses["total"].detach())
            steps += 1
        row = [str(epoch), repr(total_sum / max(1, steps))]
        row += [repr(sums[m] / max(1, steps)) for m in modalities]
        log_lines.append(",".join(row))
        if (epoch + 1) in ckpt_epochs:
            _save_checkpoint(os.path.join(run_dir, f"ckpt_{epoch + 1}"),
                             model, cfg, {**provenance, "epochs": epoch + 1}, seed)

    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(log_lines) + "\n")
    final = os.path.join(run_dir, "ckpt_final")
    _save_checkpoint(final, model, cfg, provenance, seed)
    return final


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def _record_inputs(cfg, scene, rec, modalities, augment: bool, seed: int,
                   epoch: int, index: int):
    cand = dataset.record_to_candidate(rec)
    if str(cfg["crop.mode"]) == "global":
        window = crops.full_window(scene)
    else:
        window = crops.compute_local_crop(
            scene, rec.target, float(cfg["crop.padding"]), augment,
            rngmod.stream_key(seed, f"crop/{epoch}", index) % (2**31),
            shift_max=float(cfg["crop.shift_max"]),
            pad_step=float(cfg["crop.pad_step"]),
            pad_max=float(cfg["crop.pad_max"]))
    planes = _planes_for(cfg, scene, window, modalities)
    if "pickloc" in modalities:
        size = int(cfg["model.input_size"])
        planes["pickloc"] = crops.render_pick_location_image(
            cand, window, size,
            crops.scaled_marker_side(int(cfg["pick.marker_side"]), size))
    feats = crops.pick_feature_vector(
        scene, cand, window, angle_bins=int(cfg["pick.angle_bins"]),
        num_cups=int(cfg["gripper.cups_x"]) * int(cfg["gripper.cups_y"]))
    return planes, feats


def build_pick_model(cfg, seed: int,
                     init_params: dict[str, np.ndarray] | None = None
                     ) -> pickmodel.PickSuccessModel:
    ft_mods = tuple(cfgmod.modality_list(cfg, "model.finetune_modalities"))
    pt_mods = tuple(cfgmod.modality_list(cfg, "model.pretrain_modalities"))
    if bool(cfg["model.stacked"]):
        ft_mods = ("stacked",)
        pt_mods = ("stacked",)
    backbone_mods = tuple(dict.fromkeys(pt_mods + ft_mods))
    backbone = _build_backbone(cfg, backbone_mods, seed)
    torch.manual_seed(rngmod.torch_manual_seed(seed, "init_head"))
    model = pickmodel.PickSuccessModel(
        backbone, crops.feature_dim(
            int(cfg["pick.angle_bins"]),
            int(cfg["gripper.cups_x"]) * int(cfg["gripper.cups_y"])),
        modalities=ft_mods,
        weighting=str(cfg["model.weighting"]),
        heads=int(cfg["model.attn_heads"]),
        head_hidden=int(cfg["model.head_hidden"]),
        head_depth=int(cfg["model.head_depth"]))
    if init_params is not None:
        if any(k.startswith("backbone.") for k in init_params):
            load_params(model, init_params)   # resume a full pick model
        else:
            load_params(model.backbone, init_params)
    return model


def encoder_core_names(model: pickmodel.PickSuccessModel) -> list[str]:
    """Parameters frozen by freeze_encoder: transformer blocks + global token."""
    return [
        "backbone." + n for n, _ in model.backbone.named_parameters()
        if n.startswith("blocks.") or n == "global_token"
    ]


@torch.no_grad()
def predict_records(model, cfg, records, cache, seed: int = 0) -> np.ndarray:
    """Raw logits for a record list, deterministic (no augmentation)."""
    model.eval()
    mods = model.modalities
    logits = []
    batch_size = int(cfg["train.batch_size"])
    for b0 in range(0, len(records), batch_size):
        chunk = records[b0:b0 + batch_size]
        plane_dicts, feats = [], []
        for i, rec in enumerate(chunk):
            scene = cache.get(rec.path)
            planes, f = _record_inputs(cfg, scene, rec, mods, False, seed, 0, b0 + i)
            plane_dicts.append(planes)
            feats.append(f)
        batch = _stack_batch(plane_dicts, model.backbone.dtype)
        fv = torch.from_numpy(np.stack(feats)).to(model.backbone.dtype)
        logits.append(model(batch, fv).detach().cpu().numpy())
    model.train()
    return np.concatenate(logits).astype(np.float64)


def finetune(cfg, run_dir: str, flavor: str | None = None, root: str | None = None,
             init_params: dict[str, np.ndarray] | None = None,
             eval_split: str = "test", baseline_margin: float | None = None):
    """Train the success head (+ encoder unless frozen) with early stopping.

    With ``baseline_margin`` set, the initial model competes as an epoch -1
    candidate and an epoch is only adopted once it beats the initial val AUC
    by that margin; used by transfer stages that start from an already
    trained success model and must not regress below it.

    Returns (checkpoint_path, MetricsReport on eval_split).
    """
    flavor = flavor or str(cfg["data.flavor"])
    root = root if root is not None else cfgmod.data_root(cfg)
    seed = int(cfg["train.seed"])
    manifest_path = os.path.join(root, flavor, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise TrainerError(f"dataset missing: {manifest_path}")
    manifest = datastore.read_manifest(manifest_path, validate=False)
    train_recs = manifest.split_records("train")
    val_recs = manifest.split_records("val")
    if not train_recs or not val_recs:
        raise TrainerError(f"{manifest_path}: needs train and val splits")
    train_recs = _subset(train_recs, float(cfg["train.finetune_data_ratio"]),
                         seed, "finetune_subset")
    labels = np.array([r.label for r in train_recs])
    if labels.min() == labels.max():
        raise TrainerError("train split has a single class")
    cache = dataset.SceneCache(os.path.join(root, flavor))

    if init_params is None:
        init_path = str(cfg["train.init_from"])
        if init_path:
            init_params = datastore.read_checkpoint(init_path).params
        elif not bool(cfg["train.random_init"]):
            raise TrainerError("finetune requires train.init_from or train.random_init=true")
    model = build_pick_model(cfg, seed, init_params)
    dtype = model.backbone.dtype

    freeze = bool(cfg["train.freeze_encoder"])
    frozen_names = set(encoder_core_names(model)) if freeze else set()
    for name, p in model.named_parameters():
        p.requires_grad = name not in frozen_names

    if bool(cfg["train.pos_weight_auto"]):
        n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
        pos_w, neg_w = pickmodel.class_weights_from_ratio(n_pos / max(1, n_neg))
    else:
        pos_w, neg_w = float(cfg["train.pos_weight"]), float(cfg["train.neg_weight"])

    base_lr = float(cfg["train.lr"])
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad], lr=base_lr,
        betas=(float(cfg["train.beta1"]), float(cfg["train.beta2"])),
        weight_decay=float(cfg["train.weight_decay"]))
    epochs = int(cfg["train.epochs"])
    warmup = int(cfg["train.warmup_epochs"])
    batch_size = int(cfg["train.batch_size"])
    patience = int(cfg["train.patience"])
    augment = bool(cfg["crop.augment"])
    mods = model.modalities

    os.makedirs(run_dir, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(run_dir, "config.snapshot"))
    log_lines = ["epoch,train_loss,val_auc"]
    best_auc, best_epoch, best_state = -1.0, -1, None
    val_labels = np.array([r.label for r in val_recs])
    if baseline_margin is not None:
        init_logits = predict_records(model, cfg, val_recs, cache, seed)
        best_auc = metrics.roc_auc(init_logits, val_labels)
        best_state = {n: p.detach().clone() for n, p in model.named_parameters()}

    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = base_lr * _lr_factor(epoch, epochs, warmup)
        order = rngmod.stream(seed, "shuffle/finetune", epoch).permutation(len(train_recs))
        loss_sum, steps = 0.0, 0
        for b0 in range(0, len(order), batch_size):
            idxs = [int(i) for i in order[b0:b0 + batch_size]]
            plane_dicts, feats, ys = [], [], []
            for i in idxs:
                rec = train_recs[i]
                planes, f = _record_inputs(cfg, cache.get(rec.path), rec, mods,
                                           augment, seed, epoch, i)
                plane_dicts.append(planes)
                feats.append(f)
                ys.append(rec.label)
            batch = _stack_batch(plane_dicts, dtype)
            fv = torch.from_numpy(np.stack(feats)).to(dtype)
            yv = torch.tensor(ys, dtype=dtype)
            logit = model(batch, fv)
            loss = pickmodel.weighted_bce(logit, yv, pos_w, neg_w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            steps += 1
        val_logits = predict_records(model, cfg, val_recs, cache, seed)
        try:
            val_auc = metrics.roc_auc(val_logits, val_labels)
        except metrics.UndefinedMetricError as e:
            raise TrainerError(f"validation AUC undefined: {e}") from e
        log_lines.append(f"{epoch},{loss_sum / max(1, steps)!r},{val_auc!r}")
        if baseline_margin is not None and best_epoch == -1:
            val_auc_gate = val_auc - baseline_margin
        else:
            val_auc_gate = val_auc
        if val_auc_gate > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_state = {n: p.detach().clone() for n, p in model.named_parameters()}
        elif epoch - best_epoch > patience:
            break

    if best_state is not None:
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(best_state[n])

    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(log_lines) + "\n")
    ckpt_path = os.path.join(run_dir, "ckpt_best")
    provenance = {"stage": "finetune", "flavor": flavor,
                  "dataset_hash": datastore.manifest_content_hash(manifest_path),
                  "epochs": best_epoch + 1, "val_auc": repr(best_auc)}
    _save_checkpoint(ckpt_path, model, cfg, provenance, seed)

    eval_recs = manifest.split_records(eval_split)
    report = evaluate_model(model, cfg, eval_recs, cache, run_id=os.path.basename(run_dir),
                            split=eval_split, seed=seed)
    with open(os.path.join(run_dir, f"report_{eval_split}.txt"), "w", encoding="utf-8") as f:
        f.write(report.serialize())
    return ckpt_path, report


def evaluate_model(model, cfg, records, cache, run_id: str, split: str,
                   seed: int) -> metrics.MetricsReport:
    logits = predict_records(model, cfg, records, cache, seed)
    labels = np.array([r.label for r in records])
    return metrics.report_from_scores(
        run_id, split, _sigmoid(logits), labels, seed,
        cfgmod.config_hash(cfg), threshold=float(cfg["eval.threshold"]))
