import json

import pytest

from flowsr import cli
from flowsr import config as C

TINY_SETS = ["data.n_train=4", "data.n_heldout=2", "data.n_unpaired=2", "data.hr_size=16",
             "model.width=8", "model.depth=1", "sft.steps=4", "sft.warmup=1", "sft.base_snapshot_step=2",
             "sft.log_every=2", "rl.K=3", "rl.fr_rounds=1", "rl.nr_rounds=1", "rl.groups_per_round=1",
             "rl.rank=2", "rl.alpha=4", "sampler.train_steps=2", "sampler.inference_steps=2", "eval.n_images=2"]


def _sets(extra=()):
    return [a for kv in list(TINY_SETS) + list(extra) for a in ("--set", kv)]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "runs"))
    return tmp_path


def test_list_keys(capsys):
    assert cli.main(["--list-keys"]) == 0
    out = capsys.readouterr().out
    for k in C.KEYS:
        assert k in out


def test_unknown_key_rejected(root, capsys):
    assert cli.main(["--set", "rl.bogus=1", "synth-data"]) == 2
    assert "rl.bogus" in capsys.readouterr().err
    assert not (root / "runs").exists()


def test_bad_type_rejected():
    with pytest.raises(C.ConfigError, match="rl.K"):
        C.load(overrides=["rl.K=lots"])


def test_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nrl.K = 8\nreward.gamma = 5   # inline\n")
    cfg = C.load(f, ["rl.K=12"])
    assert cfg["rl.K"] == 12
    assert cfg["reward.gamma"] == 5.0 and isinstance(cfg["reward.gamma"], float)
    assert cfg["rl.lam"] == C.DEFAULTS["rl.lam"]


def test_dump_round_trip():
    cfg = C.load(overrides=["eval.ablation_values=[\"FR\", \"FR+NR\"]", "reward.formulation=gain_only"])
    assert C.parse_text(C.dump(cfg)) == cfg


def test_config_file_errors(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("rl.K 8\n")
    with pytest.raises(C.ConfigError, match=":1"):
        C.load(f)


def test_run_root_env_and_echo(root):
    assert cli.main(_sets() + ["synth-data"]) == 0
    (d,) = list((root / "runs").iterdir())
    assert d.name.startswith("synth-data-")
    cfg = C.parse_text((d / "config.txt").read_text())
    assert cfg["data.n_train"] == 4
    summary = json.loads((d / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert "data/train.jsonl" in summary["artifacts"]


def test_no_overwrite(root):
    d = root / "fixed"
    assert cli.main(_sets([f"run_dir={d}"]) + ["synth-data"]) == 0
    before = (d / "summary.json").read_text()
    assert C.parse_text((d / "config.txt").read_text())["run_dir"] == ""
    assert cli.main(_sets([f"run_dir={d}"]) + ["synth-data"]) == 2
    assert (d / "summary.json").read_text() == before


def test_nr_requires_fr(root, capsys):
    data = root / "data"
    sft = root / "sft"
    assert cli.main(_sets([f"run_dir={data}"]) + ["synth-data"]) == 0
    assert cli.main(_sets([f"run_dir={sft}"]) + ["train-sft", "--data", str(data)]) == 0
    capsys.readouterr()
    nr = root / "nr"
    code = cli.main(_sets([f"run_dir={nr}"]) + ["train-rl", "--stage", "nr", "--data", str(data), "--sft", str(sft)])
    assert code == 1
    assert "FR adapter required" in capsys.readouterr().err
    summary = json.loads((nr / "summary.json").read_text())
    assert summary["status"] == "error" and "FR adapter required" in summary["error"]
    # an SFT run dir is not an FR adapter either
    bad = root / "nr2"
    code = cli.main(_sets([f"run_dir={bad}"]) + ["train-rl", "--stage", "nr", "--data", str(data),
                                                   "--sft", str(sft), "--fr", str(sft)])
    assert code == 1


def test_missing_data_is_usage_error(root, capsys):
    assert cli.main(_sets() + ["train-sft", "--data", str(root / "nowhere")]) == 1
    assert "synth-data output required" in capsys.readouterr().err


def test_full_chain(root):
    r = lambda name: root / name
    run = lambda name, *a: cli.main(_sets([f"run_dir={r(name)}"]) + list(a))
    assert run("data", "synth-data") == 0
    assert run("sft", "train-sft", "--data", str(r("data"))) == 0
    assert run("fr", "train-rl", "--stage", "fr", "--data", str(r("data")), "--sft", str(r("sft"))) == 0
    assert run("nr", "train-rl", "--stage", "nr", "--data", str(r("data")), "--sft", str(r("sft")),
               "--fr", str(r("fr"))) == 0
    assert run("merge", "merge", "--sft", str(r("sft")), "--adapter", str(r("nr"))) == 0
    assert run("eval", "evaluate", "--model", str(r("merge")), "--data", str(r("data"))) == 0
    recs = [json.loads(x) for x in (r("eval") / "report.jsonl").read_text().splitlines()]
    methods = {x["method"] for x in recs if x["kind"] == "aggregate"}
    assert "bicubic" in methods and len(methods) == 2
    assert "N/A" not in (r("eval") / "report.txt").read_text()
    assert run("plot", "plot", str(r("sft")), str(r("fr"))) == 0
    assert sorted(p.name for p in r("plot").rglob("*.svg")) == ["rl_fr_loss.svg", "rl_fr_reward.svg", "sft_loss.svg"]
