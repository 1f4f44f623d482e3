import csv
import json

import pytest

from sdmessenger.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USER, main, parse_sweep_values
from sdmessenger.config import RunConfig, load_config_file, parse_config_text
from sdmessenger.errors import ConfigError
from sdmessenger.metrics import MetricReport

TINY = ["--iters", "4", "--batch-size", "4", "--checkpoint-every", "2"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["gen-data", "--out", str(out), "--preset", "semimdg", "--labeled", "4",
                 "--unlabeled", "4", "--test", "3", "--seed", "2"]) == EXIT_OK
    return out


# --- config files -----------------------------------------------------------

def test_config_include_and_override(tmp_path):
    (tmp_path / "base.txt").write_text("include=umda\nalpha=0.25\n")
    (tmp_path / "run.txt").write_text("# comment\n\nalpha=0.75\ninclude=base.txt\ncorpus=/data\n")
    values = load_config_file(tmp_path / "run.txt")
    assert values["alpha"] == "0.75" and values["preset"] == "umda" and values["batch_size"] == "8"
    cfg = RunConfig.from_values(values)
    assert cfg.train.alpha == 0.75 and cfg.corpus == "/data"


def test_config_snapshot_round_trips():
    cfg = RunConfig.from_values({"corpus": "c", "alpha": "0.1", "stages": "8:4:1:4,12:2:1:4,16:2:1:4,20:2:1:2"})
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert "include" not in cfg.to_text()


@pytest.mark.parametrize("text, match", [
    ("alpha", "expected key=value"),
    ("bogus=1", "unknown option"),
    ("alpha=0.1\nalpha=0.2", "set twice"),
    ("include=nowhere.txt", "neither a preset"),
])
def test_config_errors_name_the_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text, "f.txt")


def test_include_cycle_detected(tmp_path):
    (tmp_path / "a.txt").write_text("include=b.txt\n")
    (tmp_path / "b.txt").write_text("include=a.txt\n")
    with pytest.raises(ConfigError, match="cycle"):
        load_config_file(tmp_path / "a.txt")


def test_sweep_values_validation():
    assert parse_sweep_values("patch_size", "0,16,32") == [0, 16, 32]
    for axis, text in [("alpha", "0.5"), ("alpha", "0.5,0.5"), ("depth", "1,2"), ("patch_size", "a,b")]:
        with pytest.raises(ConfigError):
            parse_sweep_values(axis, text)


# --- commands ---------------------------------------------------------------

def test_gen_data_writes_manifest(corpus):
    lines = (corpus / "manifest.tsv").read_text().splitlines()
    header = next(line for line in lines if not line.startswith("#"))
    assert header.split("\t") == ["sample_id", "domain_id", "split", "image_path", "label_path"]


def test_train_resume_matches_continuous(corpus, tmp_path, capsys):
    base = ["train", "--corpus", str(corpus), *TINY, "--seed", "3", "--deterministic"]
    assert main([*base, "--out", str(tmp_path / "full")]) == EXIT_OK
    assert main([*base, "--out", str(tmp_path / "part"), "--until", "2"]) == EXIT_OK
    assert not (tmp_path / "part" / "metrics.csv").exists()
    assert main([*base, "--out", str(tmp_path / "part")]) == EXIT_OK
    full = (tmp_path / "full" / "metrics.csv").read_text()
    assert (tmp_path / "part" / "metrics.csv").read_text() == full
    assert (tmp_path / "part" / "loss.csv").read_text() == (tmp_path / "full" / "loss.csv").read_text()
    snap = RunConfig.from_text((tmp_path / "full" / "config.txt").read_text())
    assert snap.train.seed == 3 and snap.deterministic and snap.train.total_iters == 4


def test_rerun_with_other_config_is_refused(corpus, tmp_path):
    args = ["train", "--corpus", str(corpus), *TINY, "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_OK
    assert main([*args, "--alpha", "0.1"]) == EXIT_USER


def test_user_errors_exit_2(corpus, tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == EXIT_USER
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--alpha", "1.5"]) == EXIT_USER
    assert "alpha" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "r")]) == EXIT_USER
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_USER
    assert main(["bogus-command"]) == EXIT_USER


def test_numeric_failure_exit_3_with_diagnostics(corpus, tmp_path, capsys):
    run = tmp_path / "boom"
    assert main(["train", "--corpus", str(corpus), *TINY, "--lr", "1e30", "--out", str(run)]) == EXIT_NUMERIC
    diag = json.loads((run / "diagnostics.json").read_text())
    assert "iteration" in diag and "lr" in diag
    assert str(run / "diagnostics.json") in capsys.readouterr().err


def test_report_is_idempotent_and_matches_metrics(corpus, tmp_path):
    run = tmp_path / "r"
    assert main(["train", "--corpus", str(corpus), *TINY, "--out", str(run)]) == EXIT_OK
    assert main(["report", str(run)]) == EXIT_OK
    first = (run / "summary.txt").read_bytes()
    assert (run / "loss_curve.png").stat().st_size > 0 and (run / "metrics_bar.png").is_file()
    assert main(["report", str(run)]) == EXIT_OK
    assert (run / "summary.txt").read_bytes() == first
    rep = MetricReport.from_csv((run / "metrics.csv").read_text())
    assert f"dice={rep.mean['dice']:.6f}" in first.decode()


def test_report_rejects_empty_log(tmp_path):
    (tmp_path / "loss.csv").write_text("iter,lr,loss_s,loss_u\n")
    assert main(["report", str(tmp_path)]) == EXIT_USER


def test_eval_reproduces_run_metrics(corpus, tmp_path):
    run = tmp_path / "r"
    assert main(["train", "--corpus", str(corpus), *TINY, "--out", str(run)]) == EXIT_OK
    assert main(["eval", str(run), "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert (tmp_path / "ev" / "metrics.csv").read_text() == (run / "metrics.csv").read_text()


def test_sweep_alpha_rows_and_baseline_consistency(corpus, tmp_path):
    common = ["--corpus", str(corpus), *TINY, "--seed", "1"]
    assert main(["sweep", "--axis", "alpha", "--values", "0,0.5", "--out", str(tmp_path / "sw"), *common]) == EXIT_OK
    with open(tmp_path / "sw" / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["0.0", "0.5"]
    assert all(r["status"] == "ok" for r in rows) and (tmp_path / "sw" / "sweep.png").is_file()
    assert main(["train", "--alpha", "0", "--out", str(tmp_path / "single"), *common]) == EXIT_OK
    single = MetricReport.from_csv((tmp_path / "single" / "metrics.csv").read_text())
    assert float(rows[0]["mean_dice"]) == single.mean["dice"]
    assert (tmp_path / "sw" / "alpha=0.0" / "loss.csv").read_text() == (tmp_path / "single" / "loss.csv").read_text()
    assert main(["report", str(tmp_path / "sw")]) == EXIT_OK
    assert "sweep over alpha: 2 values" in (tmp_path / "sw" / "summary.txt").read_text()


def test_sweep_patch_size_records_failures_and_continues(corpus, tmp_path):
    # s=80 exceeds the 64-pixel images, so that point fails; the others still run
    out = tmp_path / "sw"
    rc = main(["sweep", "--axis", "patch_size", "--values", "0,16,80", "--out", str(out),
               "--corpus", str(corpus), *TINY])
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert [r["status"] == "ok" for r in rows] == [True, True, False]
    assert rc == EXIT_USER
