import subprocess
import sys

import pytest

from poco import cli, trainer
from poco.replay import load_demos

TINY = """
env = point_reach
T = 3
K = 3
N = 4
batch_size = 16
actor_hidden = 16,16
critic_hidden = 16,16
offline_steps = 30
warmup_steps = 10
online_steps = 90
utd_ratio = 0.5
log_every = 10
eval_every = 45
eval_trials = 3
n_demos = 4
demo_noise = 0.5
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.conf"
    p.write_text(TINY)
    return str(p)


@pytest.fixture
def pipeline(tmp_path, conf):
    demos = str(tmp_path / "demos.txt")
    assert cli.main(["collect-demos", "--config", conf, "--demos", demos]) == cli.EXIT_OK
    assert cli.main(["pretrain", "--config", conf, "--demos", demos, "--out", str(tmp_path / "pre")]) == 0
    return demos, str(tmp_path / "pre" / "actor.ckpt")


def test_full_pipeline(tmp_path, conf, pipeline, capsys):
    demos, actor = pipeline
    episodes, sd, ad = load_demos(demos)
    assert len(episodes) == 4 and (sd, ad) == (2, 2)
    out = tmp_path / "ft"
    assert cli.main(["finetune", "--config", conf, "--actor", actor, "--demos", demos, "--out", str(out)]) == 0
    for name in ("metrics.csv", "eval.csv", "actor.ckpt", "critic.ckpt", "config.txt"):
        assert (out / name).exists(), name
    assert cli.main(["eval", "--config", conf, "--actor", str(out / "actor.ckpt"), "--trials", "4",
                     "--out", str(tmp_path / "ev")]) == 0
    assert len((tmp_path / "ev" / "eval_trials.csv").read_text().splitlines()) == 5
    assert "success_rate" in capsys.readouterr().out


def test_ablate(tmp_path, conf, pipeline):
    demos, actor = pipeline
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", conf, "--actor", actor, "--demos", demos, "--param", "zeta",
                     "--values", "0,0.3,3", "--out", str(out)]) == 0
    assert len(list(out.glob("zeta_*/metrics.csv"))) == 3


def test_seed_flag_overrides(conf, capsys):
    assert cli.main(["show-config", "--config", conf, "--seed", "9"]) == 0
    text = capsys.readouterr().out
    assert "seed = 9" in text and "T = 3" in text


def test_exit_codes(tmp_path, conf, pipeline):
    demos, actor = pipeline
    bad = tmp_path / "bad.conf"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["show-config", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["pretrain", "--config", conf]) == cli.EXIT_CONFIG  # no demo file anywhere
    assert cli.main(["eval", "--config", conf, "--actor", str(tmp_path / "missing.ckpt")]) == cli.EXIT_MISSING

    garbled = tmp_path / "garbled.txt"
    garbled.write_text("poco-demos v1 state_dim=2 action_dim=2\n0 0 0 oops\n")
    assert cli.main(["pretrain", "--config", conf, "--demos", str(garbled)]) == cli.EXIT_PARSE
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--config", conf, "--actor", str(junk)]) == cli.EXIT_PARSE

    wrong_dims = tmp_path / "wide.txt"
    wrong_dims.write_text("poco-demos v1 state_dim=3 action_dim=2\n")
    assert cli.main(["pretrain", "--config", conf, "--demos", str(wrong_dims)]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--config", conf, "--actor", actor, "--trials", "0"]) == cli.EXIT_CONTRACT


def test_divergence_exit_code(tmp_path, conf, pipeline, monkeypatch):
    demos, actor = pipeline

    def boom(*a, **k):
        raise trainer.TrainingDiverged("injected")

    monkeypatch.setattr(trainer, "finetune", boom)
    assert cli.main(["finetune", "--config", conf, "--actor", actor, "--demos", demos,
                     "--out", str(tmp_path / "x")]) == cli.EXIT_DIVERGED


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["ablate", "--actor", "a", "--param", "eta", "--values", "1"])
    assert exc.value.code == 2


def test_module_entry_point(conf):
    proc = subprocess.run([sys.executable, "-m", "poco", "show-config", "--config", conf],
                          capture_output=True, text=True, check=True)
    assert "env = point_reach" in proc.stdout
