"""Command-line entry point.

Thin adapters over the library modules; no numeric behavior lives here.
Exit codes: 0 success, 1 validation error (nothing written), 2 runtime
failure (a run_status file in the output directory flags the partial run).
"""

import argparse
import os
import sys

from . import config as cfgmod
from . import dataset, datastore, evaluator, scenegen, trainer

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "eval", "ablate",
               "transfer", "report")


class UsageError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pickmae",
        description="Synthetic suction-pick data, multimodal masked "
                    "pretraining, and pick-success prediction.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True,
                        help="config file (flat `key = value` lines); for "
                             "ablate, a grid file with `cell` directives")
        sp.add_argument("--seed", type=int, default=None,
                        help="overrides train.seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--profile", choices=sorted(cfgmod.PROFILES),
                        default="desk")
        if name == "transfer":
            sp.add_argument("--pretrain-flavor", default="standard")
            sp.add_argument("--ft-flavors", default="standard",
                            help="comma-separated finetune stage flavors")
            sp.add_argument("--test-flavor", default="standard")
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Peel `--key=value` args whose key is a dotted config path."""
    known, overrides = [], []
    for arg in argv:
        body = arg[2:] if arg.startswith("--") else ""
        if "=" in body and "." in body.split("=", 1)[0]:
            overrides.append(body)
        else:
            known.append(arg)
    return known, overrides


def _write_status(out_dir: str, status: str, stage: str, message: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_status"), "w", encoding="utf-8") as f:
        f.write(f"status={status}\nstage={stage}\nmessage={message}\n")


def _load_cfg(args, overrides: list[str]):
    cfg = cfgmod.load_config(args.config, profile=args.profile,
                             overrides=overrides)
    if args.seed is not None:
        cfg["train.seed"] = int(args.seed)
    return cfg


def _cmd_gen_data(args, overrides) -> None:
    cfg = _load_cfg(args, overrides)
    flavor = str(cfg["data.flavor"])
    if flavor not in scenegen.FLAVORS:
        raise UsageError(f"unknown flavor {flavor!r}; valid: {sorted(scenegen.FLAVORS)}")
    counts = {
        "pretrain": int(cfg["data.count_pretrain"]),
        "train": int(cfg["data.count_train"]),
        "val": int(cfg["data.count_val"]),
        "test": int(cfg["data.count_test"]),
    }
    root = args.out or cfgmod.data_root(cfg)
    os.makedirs(root, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(root, f"config.snapshot.{flavor}"))
    manifest_path = dataset.build_dataset(
        flavor, counts, dataset.TARGET_RATIOS[flavor],
        int(cfg["train.seed"]), cfg, root)
    print(manifest_path)
    print(datastore.manifest_content_hash(manifest_path))


def _cmd_pretrain(args, overrides) -> None:
    cfg = _load_cfg(args, overrides)
    out = args.out or os.path.join("runs", f"pretrain_{cfgmod.config_hash(cfg)}")
    print(trainer.pretrain(cfg, out))


def _cmd_finetune(args, overrides) -> None:
    cfg = _load_cfg(args, overrides)
    out = args.out or os.path.join("runs", f"finetune_{cfgmod.config_hash(cfg)}")
    ckpt, report = trainer.finetune(cfg, out)
    print(ckpt)
    print(report.serialize(), end="")


def _cmd_eval(args, overrides) -> None:
    cfg = _load_cfg(args, overrides)
    ckpt_path = str(cfg["train.init_from"])
    if not ckpt_path:
        raise UsageError("eval needs train.init_from pointing at a checkpoint")
    out = args.out or os.path.join("runs", f"eval_{cfgmod.config_hash(cfg)}")
    os.makedirs(out, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(out, "config.snapshot"))
    params = datastore.read_checkpoint(ckpt_path).params
    model = trainer.build_pick_model(cfg, int(cfg["train.seed"]), params)
    root = cfgmod.data_root(cfg)
    flavor = str(cfg["data.flavor"])
    manifest = datastore.read_manifest(
        os.path.join(root, flavor, "manifest.txt"), validate=False)
    cache = dataset.SceneCache(os.path.join(root, flavor))
    report = trainer.evaluate_model(
        model, cfg, manifest.split_records("test"), cache,
        run_id=os.path.basename(out), split="test", seed=int(cfg["train.seed"]))
    with open(os.path.join(out, "report_test.txt"), "w", encoding="utf-8") as f:
        f.write(report.serialize())
    print(report.serialize(), end="")


def _cmd_ablate(args, overrides) -> None:
    with open(args.config, "r", encoding="utf-8") as f:
        base, cells, seeds, pt_epochs = evaluator.parse_grid_file(f.read())
    cfg = cfgmod.load_config(None, profile=args.profile, overrides=base)
    for key, value in cfgmod.parse_overrides(overrides).items():
        cfg[key] = value
    if args.seed is not None:
        seeds = [int(args.seed)]
    out = args.out or os.path.join("runs", f"ablate_{cfgmod.config_hash(cfg)}")
    os.makedirs(out, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(out, "config.snapshot"))
    cache = evaluator.PretrainCache(os.path.join(out, "pretrained"),
                                    pretrain_epochs=pt_epochs)
    csv_path, md_path = evaluator.run_ablation(cfg, cells, seeds, out, cache=cache)
    print(csv_path)
    print(md_path)


def _cmd_transfer(args, overrides) -> None:
    cfg = _load_cfg(args, overrides)
    spec = evaluator.TransferSpec(
        pretrain_flavor=args.pretrain_flavor,
        finetune_flavors=tuple(
            f.strip() for f in args.ft_flavors.split(",") if f.strip()),
        test_flavor=args.test_flavor)
    out = args.out or os.path.join("runs", f"transfer_{cfgmod.config_hash(cfg)}")
    os.makedirs(out, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(out, "config.snapshot"))
    report = evaluator.transfer_protocol(cfg, spec, out)
    print(report.serialize(), end="")


def _cmd_report(args, overrides) -> None:
    _load_cfg(args, overrides)   # validate config even though report only reads
    out = args.out
    if not out or not os.path.isdir(out):
        raise UsageError("report needs --out pointing at an existing run directory")
    lines = ["| run | split | auc (%) | tp | fp | tn | fn |",
             "| --- | --- | --- | --- | --- | --- | --- |"]
    found = False
    for dirpath, _, files in sorted(os.walk(out)):
        for name in sorted(files):
            if not (name.startswith("report_") and name.endswith(".txt")):
                continue
            found = True
            with open(os.path.join(dirpath, name), "r", encoding="utf-8") as f:
                kv = {}
                for ln in f.read().splitlines():
                    if "=" in ln:
                        for tok in ln.split():
                            k, v = tok.split("=", 1)
                            kv[k] = v
            lines.append(
                f"| {kv.get('run_id', '?')} | {kv.get('split', '?')} "
                f"| {100.0 * float(kv.get('auc', 'nan')):.2f} "
                f"| {kv.get('tp', '?')} | {kv.get('fp', '?')} "
                f"| {kv.get('tn', '?')} | {kv.get('fn', '?')} |")
    if not found:
        raise UsageError(f"no report_*.txt files under {out}")
    md_path = os.path.join(out, "report.md")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(md_path)


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "transfer": _cmd_transfer,
    "report": _cmd_report,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    known, overrides = _split_overrides(argv)
    try:
        args = parser.parse_args(known)
    except SystemExit as e:
        return 1 if e.code else 0
    # validation phase: config parse errors exit 1 before anything is written
    try:
        cfgmod.parse_overrides(overrides)
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        if args.subcommand != "ablate":
            cfgmod.load_config(args.config, profile=args.profile)
    except (cfgmod.ConfigError, UsageError, evaluator.EvaluatorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        _HANDLERS[args.subcommand](args, overrides)
    except (cfgmod.ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failure -> exit 2 + status file
        out = args.out or "."
        _write_status(out, "failed", args.subcommand, f"{type(e).__name__}: {e}")
        print(f"error ({args.subcommand}): {e}", file=sys.stderr)
        return 2
    if args.out:
        _write_status(args.out, "ok", args.subcommand, "")
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
