import os

from pickmae import cli, datastore

TINY_LINES = """
model.input_size = 16
model.grid = 2
model.embed_dim = 16
model.depth = 1
model.heads = 2
model.mlp_ratio = 2.0
model.dec_depth = 1
model.dec_dim = 8
model.class_embed_dim = 4
model.head_hidden = 8
train.batch_size = 16
train.warmup_epochs = 0
train.epochs = 1
train.mode_64bit = true
"""


def _write_cfg(path, *extra):
    with open(path, "w", encoding="utf-8") as f:
        f.write(TINY_LINES + "\n".join(extra) + "\n")
    return str(path)


def test_split_overrides():
    known, overrides = cli._split_overrides(
        ["finetune", "--config", "c", "--train.seed=3", "--out", "o",
         "--model.grid=4"])
    assert known == ["finetune", "--config", "c", "--out", "o"]
    assert overrides == ["train.seed=3", "model.grid=4"]


def test_missing_config_exits_1(tmp_path, capsys):
    assert cli.dispatch(["pretrain", "--config", str(tmp_path / "nope")]) == 1
    err = capsys.readouterr().err
    assert "not found" in err
    assert not os.path.exists(tmp_path / "run_status")


def test_unknown_key_exits_1_and_lists_valid(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg", "model.bogus = 3")
    assert cli.dispatch(["pretrain", "--config", cfg,
                         "--out", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "model.bogus" in err
    assert "model.grid" in err          # valid keys are suggested
    assert not os.path.exists(tmp_path / "out")


def test_bad_override_exits_1(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg")
    assert cli.dispatch(["pretrain", "--config", cfg,
                         "--train.epochs=many"]) == 1
    assert "train.epochs" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg",
                     "data.count_pretrain = 2", "data.count_train = 24",
                     "data.count_val = 12", "data.count_test = 12")
    outs = []
    for name in ("a", "b"):
        rc = cli.dispatch(["gen-data", "--config", cfg, "--seed", "9",
                           "--out", str(tmp_path / name)])
        assert rc == 0
        outs.append(capsys.readouterr().out.strip().splitlines())
    (path_a, hash_a), (path_b, hash_b) = outs
    assert hash_a == hash_b and path_a != path_b
    assert os.path.exists(path_a)
    with open(tmp_path / "a" / "run_status", encoding="utf-8") as f:
        assert "status=ok" in f.read()
    assert os.path.exists(tmp_path / "a" / "config.snapshot.standard")


def test_gen_data_unknown_flavor_exits_1(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg", "data.flavor = lunar")
    assert cli.dispatch(["gen-data", "--config", cfg,
                         "--out", str(tmp_path / "out")]) == 1
    assert "lunar" in capsys.readouterr().err


def test_finetune_and_eval_and_report(small_root, tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg", f"data.root = {small_root}",
                     "train.random_init = true")
    ft_out = str(tmp_path / "ft")
    assert cli.dispatch(["finetune", "--config", cfg, "--out", ft_out]) == 0
    out = capsys.readouterr().out
    ckpt = out.splitlines()[0]
    assert "auc=" in out
    assert os.path.exists(os.path.join(ft_out, "report_test.txt"))
    with open(os.path.join(ft_out, "run_status"), encoding="utf-8") as f:
        assert "status=ok" in f.read()
    # config snapshot is written before training starts
    assert os.path.exists(os.path.join(ft_out, "config.snapshot"))

    # eval needs train.init_from
    assert cli.dispatch(["eval", "--config", cfg,
                         "--out", str(tmp_path / "ev0")]) == 1
    assert "init_from" in capsys.readouterr().err
    ev_out = str(tmp_path / "ev")
    assert cli.dispatch(["eval", "--config", cfg, "--out", ev_out,
                         f"--train.init_from={ckpt}"]) == 0
    eval_rep = capsys.readouterr().out
    assert "split=test" in eval_rep

    # report aggregates report_*.txt under --out into a markdown table
    assert cli.dispatch(["report", "--config", cfg, "--out", str(tmp_path)]) == 0
    md_path = capsys.readouterr().out.strip()
    with open(md_path, encoding="utf-8") as f:
        md = f.read()
    assert md.startswith("| run | split |")
    assert md.count("| test |") == 2    # finetune + eval reports
    assert cli.dispatch(["report", "--config", cfg,
                         "--out", str(tmp_path / "empty")]) == 1
    capsys.readouterr()


def test_runtime_failure_exits_2_with_status(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg", f"data.root = {tmp_path / 'nodata'}",
                     "train.random_init = true")
    out = str(tmp_path / "out")
    assert cli.dispatch(["finetune", "--config", cfg, "--out", out]) == 2
    assert "dataset missing" in capsys.readouterr().err
    with open(os.path.join(out, "run_status"), encoding="utf-8") as f:
        status = f.read()
    assert "status=failed" in status and "stage=finetune" in status


def test_ablate_cli(small_root, tmp_path, capsys):
    grid = tmp_path / "grid"
    with open(grid, "w", encoding="utf-8") as f:
        f.write(TINY_LINES)
        f.write(f"data.root = {small_root}\n")
        f.write("seeds = 0\npretrain_epochs = 1\n")
        f.write("cell base default\n")
        f.write("cell mean model.weighting=mean_pool\n")
    out = str(tmp_path / "out")
    assert cli.dispatch(["ablate", "--config", str(grid), "--out", out]) == 0
    csv_path, md_path = capsys.readouterr().out.strip().splitlines()
    with open(csv_path, encoding="utf-8") as f:
        rows = f.read().strip().splitlines()
    assert rows[0].startswith("run_id,cell,seed,split,auc")
    assert len(rows) == 3
    assert all(r.split(",")[4] != "nan" for r in rows[1:])
    with open(md_path, encoding="utf-8") as f:
        assert "base **" in f.read()


def test_transfer_cli(small_root, tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg", f"data.root = {small_root}")
    out = str(tmp_path / "out")
    rc = cli.dispatch(["transfer", "--config", cfg, "--out", out,
                       "--pretrain-flavor", "standard",
                       "--ft-flavors", "standard",
                       "--test-flavor", "standard"])
    assert rc == 0
    rep = capsys.readouterr().out
    assert "run_id=pt_standard__ft_standard__test_standard" in rep
    assert os.path.exists(os.path.join(out, "report_test.txt"))
