import re
import subprocess
import sys
from pathlib import Path

import pytest

from sacf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from sacf.metrics import MetricsReport

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CFG = str(ROOT / "configs" / "default.cfg")
FAST = ["--set", "ppo.horizon=16", "--set", "run.eval_every=5", "--set", "run.eval_episodes=3",
        "--set", "run.final_eval_episodes=4", "--set", "run.checkpoint_every=5"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", DEFAULT_CFG, "--seed", "1", "--updates", "10", "--out", str(out), *FAST])
    assert code == EXIT_OK
    return out


def body_lines(path):
    return [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]


def test_train_writes_one_log_line_per_update(trained):
    assert len(body_lines(trained / "train.log")) == 10
    for name in ("config.cfg", "final.ckpt", "report_heard.txt", "report_unheard.txt",
                 "checkpoints/update_000005.ckpt", "checkpoints/update_000010.ckpt"):
        assert (trained / name).is_file(), name


def test_same_seed_gives_identical_checkpoint(trained, tmp_path):
    out = tmp_path / "again"
    assert main(["train", DEFAULT_CFG, "--seed", "1", "--updates", "10", "--out", str(out), *FAST]) == EXIT_OK
    assert (out / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()
    assert (out / "report_unheard.txt").read_bytes() == (trained / "report_unheard.txt").read_bytes()


def test_missing_config_names_the_path(capsys):
    assert main(["train", "/nowhere/x.cfg"]) == EXIT_USAGE
    assert "/nowhere/x.cfg" in capsys.readouterr().err


def test_malformed_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("ppo.clip = 0.1\nppo.bogus = 1\n")
    assert main(["train", str(cfg)]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["fly"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_eval_checkpoint_uses_sibling_config(trained, tmp_path, capsys):
    out = tmp_path / "r.txt"
    code = main(["eval", str(trained / "final.ckpt"), "--split", "unheard", "--episodes", "5", "--out", str(out)])
    assert code == EXIT_OK
    rep = MetricsReport.from_text(out.read_text())
    assert rep.n_episodes == 5
    assert all(i >= 8 for i in rep.sound_ids)
    assert len(capsys.readouterr().out.split()) == 3


def test_eval_oracle_scores_hundred(tmp_path, capsys):
    out = tmp_path / "oracle.txt"
    assert main(["eval", "oracle", "--episodes", "20", "--out", str(out)]) == EXIT_OK
    assert MetricsReport.from_text(out.read_text()).sr == 100.0
    assert capsys.readouterr().out.startswith("100.00")


def test_eval_zero_episodes_refused():
    assert main(["eval", "oracle", "--episodes", "0"]) == EXIT_USAGE


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path / "none.ckpt")]) == EXIT_USAGE


def test_eval_digest_mismatch_is_runtime_fault(trained, tmp_path):
    code = main(["eval", str(trained / "final.ckpt"), "--episodes", "2", "--out", str(tmp_path / "r.txt"),
                 "--set", "model.gru_hidden=64"])
    assert code == EXIT_RUNTIME


def test_params_table(tmp_path, capsys):
    out = tmp_path / "params.txt"
    assert main(["params", DEFAULT_CFG, "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert text == capsys.readouterr().out
    assert "concat baseline" in text and "spatial attention" in text
    line = next(ln for ln in text.splitlines() if ln.startswith("SACF overhead"))
    assert re.search(r"\(\d+\.\d{2}%\)", line), line


def test_params_zero_channels_rejected():
    assert main(["params", "--set", "model.visual.channels=0"]) == EXIT_USAGE


def test_plot_single_log(trained, tmp_path, capsys):
    prefix = tmp_path / "fig"
    assert main(["plot", str(trained / "train.log"), "--out", str(prefix), "--labels", "sacf"]) == EXIT_OK
    rows = (tmp_path / "fig_sacf.csv").read_text().splitlines()
    assert rows[0] == "update,reward,eval_spl"
    assert len(rows) == 11
    # evals ran after updates 5 and 10
    assert [r.split(",")[2] != "" for r in rows[1:]].count(True) == 2
    svg = (tmp_path / "fig.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_plot_overlays_two_logs(trained, tmp_path):
    prefix = tmp_path / "cmp"
    log = str(trained / "train.log")
    assert main(["plot", log, log, "--out", str(prefix), "--labels", "sacf,concat"]) == EXIT_OK
    assert (tmp_path / "cmp_sacf.csv").is_file() and (tmp_path / "cmp_concat.csv").is_file()
    svg = (tmp_path / "cmp.svg").read_text()
    assert svg.count("sacf") >= 2 and svg.count("concat") >= 2


def test_plot_malformed_line_names_line_number(trained, tmp_path, capsys):
    bad = tmp_path / "bad.log"
    lines = (trained / "train.log").read_text().splitlines()
    lines.insert(3, "7 0.5 oops")
    bad.write_text("\n".join(lines) + "\n")
    assert main(["plot", str(bad), "--out", str(tmp_path / "x")]) == EXIT_RUNTIME
    assert ":4:" in capsys.readouterr().err
    assert not (tmp_path / "x.svg").exists()


def test_plot_label_count_mismatch(trained, tmp_path):
    assert main(["plot", str(trained / "train.log"), "--out", str(tmp_path / "y"), "--labels", "a,b"]) == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sacf", "eval", "oracle", "--episodes", "0"], capture_output=True,
                         text=True)
    assert res.returncode == EXIT_USAGE
    assert "episodes" in res.stderr
