import json

import pytest

from eclm import cli

TINY = """\
[gen]
n_users = 100
n_items = 60
n_hotels = 20
n_shops = 10
n_genres = 10

[train]
d = 8
max_epochs = 3
min_epochs = 0
batch_size = 500

[expand]
top_n = 10
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    return tmp_path, ["--config", str(cfg), "--out", str(tmp_path / "run")]


def run(args, *extra):
    return cli.main([*extra, *args])


def test_full_pipeline(tiny, capsys):
    tmp, args = tiny
    for stage in ("gen", "train", "fuse", "expand", "eval"):
        assert run(args, stage) == 0, stage
    out = tmp / "run"
    for p in ("data/seeds.txt", "views/ichiba.emb", "fused/fused.emb", "fused/fused.weights.tsv",
              "expand/expansion.csv", "report.csv"):
        assert (out / p).is_file(), p
    report = (out / "report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in report[1:]] == ["E-CLM", "E-CLM++", "LR"]
    assert len((out / "expand/expansion.csv").read_text().splitlines()) == 11
    m = json.loads((out / "manifests/fuse.json").read_text())
    assert m["stage"] == "fuse" and m["kernel_backend"] in ("numpy", "numba")
    assert "fused/fused.emb" in m["outputs"] and "views/demography.emb" in m["inputs"]
    assert len(m["config_hash"]) == 16
    assert "pr_auc=" in capsys.readouterr().out


def test_expand_without_fuse_names_missing_stage(tiny, capsys):
    tmp, args = tiny
    assert run(args, "gen") == 0
    assert run(args, "expand") == 1
    err = capsys.readouterr().err
    assert "fused.emb" in err and "eclm fuse" in err


def test_train_without_gen(tiny, capsys):
    _, args = tiny
    assert run(args, "train") == 1
    assert "eclm gen" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlearning_rate = 0.1\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    cfg.write_text("[nonsense]\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_config_parsing(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[gen]\ncross_service_activity = 0,1; 1,1; 1,1; 1,1; 1,1\n"
                 "[train.loyalty]\nmax_epochs = 7\n[fusion]\nviews = d,i\n"
                 "[expand]\nthreshold = 0.5\ntop_n = none\n")
    cfg = cli.load_config(p)
    assert cfg.gen.cross_service_activity[0] == [0.0, 1.0]
    assert cfg.view_overrides == {"loyalty": {"max_epochs": 7}}
    assert cfg.views == ("demography", "ichiba")
    assert cfg.expand.threshold == 0.5 and cfg.expand.top_n is None


def test_example_config_loads():
    from pathlib import Path
    cfg = cli.load_config(Path(__file__).parents[1] / "configs" / "example.ini")
    assert cfg.train.min_epochs == 50
    assert len(cfg.grid.dims) * len(cfg.grid.lrs) * len(cfg.grid.gammas) == 27


def test_parse_views_errors():
    assert cli.parse_views("f,d") == ("demography", "family")
    with pytest.raises(cli.ConfigError):
        cli.parse_views("d,x")


def test_flags_after_subcommand(tiny):
    tmp, args = tiny
    assert cli.main(["gen", *args, "--seed", "4"]) == 0
    m = json.loads((tmp / "run/manifests/gen.json").read_text())
    assert m["seed"] == 4 and m["config"]["gen"]["seed"] == 4


@pytest.mark.slow
def test_gridsearch_emits_full_grid(tiny):
    tmp, args = tiny
    assert run(args, "gen") == 0
    assert run(args, "--views", "d,i", "gridsearch") == 0
    rows = (tmp / "run/gridsearch.csv").read_text().splitlines()
    assert rows[0] == "d,lr,gamma,val_pr_auc,test_pr_auc"
    assert len(rows) == 28
    assert {r.split(",")[0] for r in rows[1:]} == {"50", "75", "100"}
