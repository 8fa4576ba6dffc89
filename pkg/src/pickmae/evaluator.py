"""Experiment runners: ablation grids and cross-flavor transfer protocols.

A grid is a list of named cells (config overrides); every cell runs the
pretrain-then-finetune pipeline per seed and reports test AUC. Pretraining is
shared between cells whose pretraining-relevant config agrees, so a grid over
head/crop/weighting options pretrains once.
"""

import dataclasses
import hashlib
import os
import statistics
import time

from . import config as cfgmod
from . import dataset, datastore, metrics, trainer

CSV_HEADER = "run_id,cell,seed,split,auc,tp,fp,tn,fn,wallclock_s,config_hash"

# config keys that determine the pretrained encoder (everything the pretrain
# stage reads); cells differing only elsewhere share one pretrain run
_PRETRAIN_KEYS = (
    "model.", "data.root", "data.flavor", "train.lr", "train.weight_decay",
    "train.beta1", "train.beta2", "train.warmup_epochs", "train.batch_size",
    "train.pretrain_data_ratio", "train.mode_64bit",
)

# model.* keys only the finetune stage reads; differing here still shares
_FINETUNE_ONLY_KEYS = (
    "model.weighting", "model.attn_heads", "model.head_hidden",
    "model.head_depth", "model.finetune_modalities",
)


class EvaluatorError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class AblationCell:
    """One grid cell: a name, config overrides, and the default ("**") flag."""

    name: str
    overrides: dict
    default: bool = False
    pretrain_epochs: int | None = None   # None = cfg train.epochs for pretrain


def _pretrain_signature(cfg, flavor: str, epochs: int, seed: int) -> str:
    sub = {k: v for k, v in cfg.items()
           if any(k.startswith(p) for p in _PRETRAIN_KEYS)
           and k not in _FINETUNE_ONLY_KEYS}
    sub["__flavor"] = flavor
    sub["__epochs"] = epochs
    sub["__seed"] = seed
    blob = "\n".join(f"{k}={sub[k]}" for k in sorted(sub))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class PretrainCache:
    """Runs pretraining on demand, once per distinct pretraining config."""

    def __init__(self, out_dir: str, root: str | None = None,
                 pretrain_epochs: int = 10):
        self.out_dir = out_dir
        self.root = root
        self.pretrain_epochs = pretrain_epochs
        self._paths: dict[str, str] = {}

    def get(self, cfg, seed: int, epochs: int | None = None) -> str:
        flavor = str(cfg["data.flavor"])
        epochs = self.pretrain_epochs if epochs is None else epochs
        sig = _pretrain_signature(cfg, flavor, epochs, seed)
        if sig not in self._paths:
            pt_cfg = dict(cfg)
            pt_cfg["train.epochs"] = epochs
            pt_cfg["train.seed"] = seed
            run_dir = os.path.join(self.out_dir, f"pt_{sig}")
            ckpt = os.path.join(run_dir, "ckpt_final")
            if not os.path.exists(os.path.join(ckpt, "checkpoint.txt")):
                ckpt = trainer.pretrain(pt_cfg, run_dir, flavor=flavor,
                                        root=self.root)
            self._paths[sig] = ckpt
        return self._paths[sig]


def _run_cell(cfg, cell: AblationCell, seed: int, out_dir: str,
              root: str | None, cache: PretrainCache) -> metrics.MetricsReport:
    run_cfg = dict(cfg)
    run_cfg.update(cfgmod.parse_overrides(cell.overrides))
    run_cfg["train.seed"] = seed
    init = None
    if not bool(run_cfg["train.random_init"]) and not str(run_cfg["train.init_from"]):
        ckpt = cache.get(run_cfg, seed, cell.pretrain_epochs)
        init = datastore.read_checkpoint(ckpt).params
    run_dir = os.path.join(out_dir, f"{cell.name}_s{seed}")
    _, report = trainer.finetune(run_cfg, run_dir, root=root, init_params=init)
    return report


def _fmt_pct(auc: float) -> str:
    return f"{100.0 * auc:.2f}"


def run_ablation(cfg, cells: list[AblationCell], seeds: list[int], out_dir: str,
                 root: str | None = None,
                 cache: PretrainCache | None = None) -> tuple[str, str]:
    """Run every (cell, seed); returns (csv_path, markdown_path).

    Cell failures are recorded per row and do not abort the grid. The markdown
    table reports median-over-seeds AUC and deltas against the default cell.
    """
    if not cells or not seeds:
        raise EvaluatorError("ablation grid needs at least one cell and one seed")
    defaults = [c for c in cells if c.default]
    if len(defaults) != 1:
        raise EvaluatorError(f"grid needs exactly one default cell, got {len(defaults)}")
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise EvaluatorError("cell names must be unique")
    os.makedirs(out_dir, exist_ok=True)
    if cache is None:
        cache = PretrainCache(os.path.join(out_dir, "pretrained"), root=root)

    rows = []
    failures: dict[tuple[str, int], str] = {}
    aucs: dict[str, list[float]] = {c.name: [] for c in cells}
    for cell in sorted(cells, key=lambda c: c.name):
        for seed in seeds:
            run_id = f"{cell.name}_s{seed}"
            t0 = time.time()
            try:
                rep = _run_cell(cfg, cell, seed, out_dir, root, cache)
                wall = time.time() - t0
                rows.append(
                    f"{run_id},{cell.name},{seed},{rep.split},{rep.auc!r},"
                    f"{rep.conf.tp},{rep.conf.fp},{rep.conf.tn},{rep.conf.fn},"
                    f"{wall:.3f},{rep.config_hash}")
                aucs[cell.name].append(rep.auc)
            except Exception as e:  # noqa: BLE001 - grid must survive cell failures
                wall = time.time() - t0
                failures[(cell.name, seed)] = f"{type(e).__name__}: {e}"
                rows.append(f"{run_id},{cell.name},{seed},test,nan,0,0,0,0,"
                            f"{wall:.3f},")

    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(CSV_HEADER + "\n" + "\n".join(rows) + "\n")

    default_name = defaults[0].name
    if not aucs[default_name]:
        base = None
    else:
        base = statistics.median(aucs[default_name])
    md = ["| Cell | AUC (%) | Delta |", "| --- | --- | --- |"]
    for cell in sorted(cells, key=lambda c: c.name):
        label = f"{cell.name} **" if cell.default else cell.name
        vals = aucs[cell.name]
        if not vals:
            md.append(f"| {label} | failed | - |")
            continue
        med = statistics.median(vals)
        if cell.default:
            delta = "0.00"
        elif base is None:
            delta = "-"
        else:
            delta = f"{100.0 * (med - base):+.2f}"
        md.append(f"| {label} | {_fmt_pct(med)} | {delta} |")
    if failures:
        md.append("")
        md.append("Failures:")
        for (name, seed), msg in sorted(failures.items()):
            md.append(f"- {name} seed {seed}: {msg}")
    md_path = os.path.join(out_dir, "ablation.md")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("\n".join(md) + "\n")
    return csv_path, md_path


def parse_grid_file(text: str) -> tuple[dict, list[AblationCell], list[int], int]:
    """Grid file: plain config lines plus grid directives.

        seeds = 0,1,2
        pretrain_epochs = 10
        cell default_run default crop.mode=local model.weighting=cross_attention
        cell mean_pool model.weighting=mean_pool

    Returns (base config overrides, cells, seeds, pretrain_epochs). Exactly
    one cell carries the `default` marker (the reference row).
    """
    base_lines: list[str] = []
    cells: list[AblationCell] = []
    seeds = [0]
    pretrain_epochs = 10
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "cell" or line.startswith("cell "):
            toks = line.split()
            if len(toks) < 2:
                raise EvaluatorError(f"line {lineno}: cell needs a name")
            name = toks[1]
            rest = toks[2:]
            default = bool(rest) and rest[0] == "default"
            if default:
                rest = rest[1:]
            for tok in rest:
                if "=" not in tok:
                    raise EvaluatorError(
                        f"line {lineno}: cell override {tok!r} is not key=value")
            overrides = cfgmod.parse_overrides(rest)
            cells.append(AblationCell(name=name, overrides=overrides, default=default))
        elif line.replace(" ", "").startswith("seeds="):
            seeds = [int(s) for s in line.split("=", 1)[1].split(",") if s.strip()]
        elif line.replace(" ", "").startswith("pretrain_epochs="):
            pretrain_epochs = int(line.split("=", 1)[1])
        else:
            base_lines.append(line)
    base = cfgmod.parse_config_text("\n".join(base_lines))
    return base, cells, seeds, pretrain_epochs


# ---------------------------------------------------------------------------
# Cross-flavor transfer
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TransferSpec:
    pretrain_flavor: str
    finetune_flavors: tuple[str, ...]
    test_flavor: str


def transfer_protocol(cfg, spec: TransferSpec, out_dir: str,
                      root: str | None = None,
                      pretrain_ckpt: str | None = None) -> metrics.MetricsReport:
    """Pretrain -> finetune stage sequence -> evaluate on the test flavor.

    Each finetune stage trains on its own flavor, starting from the previous
    stage's full model; the test flavor never contributes training labels
    unless it appears in the sequence (zero-shot otherwise). Stages after
    the first run at ``train.lr * train.transfer_lr_scale`` and keep the
    incoming model unless their flavor's val AUC improves by
    ``train.transfer_min_gain``, so a tiny adaptation set cannot erase what
    earlier stages learned.
    """
    root = root if root is not None else cfgmod.data_root(cfg)
    if not spec.finetune_flavors:
        raise EvaluatorError("transfer needs at least one finetune stage")
    for flavor in {spec.pretrain_flavor, spec.test_flavor, *spec.finetune_flavors}:
        path = os.path.join(root, flavor, "manifest.txt")
        if not os.path.exists(path):
            raise EvaluatorError(f"missing flavor dataset: {path}")
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg["train.seed"])

    if pretrain_ckpt is None:
        pt_cfg = dict(cfg)
        pt_cfg["data.flavor"] = spec.pretrain_flavor
        pretrain_ckpt = trainer.pretrain(
            pt_cfg, os.path.join(out_dir, "pretrain"),
            flavor=spec.pretrain_flavor, root=root)
    params = datastore.read_checkpoint(pretrain_ckpt).params

    ckpt_path = None
    for i, flavor in enumerate(spec.finetune_flavors):
        stage_dir = os.path.join(out_dir, f"ft{i}_{flavor}")
        stage_cfg, margin = cfg, None
        if i > 0:
            # adaptation stages: gentle lr, and keep the previous stage's
            # model unless this flavor's val AUC improves by a margin
            stage_cfg = dict(cfg)
            stage_cfg["train.lr"] = (float(cfg["train.lr"])
                                     * float(cfg["train.transfer_lr_scale"]))
            margin = float(cfg["train.transfer_min_gain"])
        ckpt_path, _ = trainer.finetune(stage_cfg, stage_dir, flavor=flavor,
                                        root=root, init_params=params,
                                        baseline_margin=margin)
        params = datastore.read_checkpoint(ckpt_path).params

    model = trainer.build_pick_model(cfg, seed, params)
    cache = dataset.SceneCache(os.path.join(root, spec.test_flavor))
    manifest = datastore.read_manifest(
        os.path.join(root, spec.test_flavor, "manifest.txt"), validate=False)
    run_id = (f"pt_{spec.pretrain_flavor}__ft_{'_'.join(spec.finetune_flavors)}"
              f"__test_{spec.test_flavor}")
    report = trainer.evaluate_model(model, cfg, manifest.split_records("test"),
                                    cache, run_id=run_id, split="test", seed=seed)
    with open(os.path.join(out_dir, "report_test.txt"), "w", encoding="utf-8") as f:
        f.write(report.serialize())
    return report
