import numpy as np
import pytest

from centroid_uda import cli
from centroid_uda.metrics import ClassStats, MetricsReport
from centroid_uda.reporting import RunRecord, color_overlay, ordering_check, read_metrics_csv, summary_rows, write_report

TINY = [
    "--set", "corpus_subjects=5", "--set", "warmup_epochs=1", "--set", "main_epochs=1", "--set", "source_bs=4",
    "--set", "width=8", "--set", "dec_channels=16", "--set", "style_width=8", "--set", "latent_dim=8",
    "--set", "style_ae_steps=3", "--set", "style_rain_steps=3", "--set", "log_every=0",
]


def test_parser_has_all_subcommands():
    sub = cli.build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-data", "pretrain-style", "train", "evaluate", "ablate", "bench-mem", "report"}


def test_end_to_end(tmp_path, capsys):
    data, style, run = tmp_path / "data", tmp_path / "style", tmp_path / "run"
    assert cli.main(["gen-data", "--out", str(data), "--subjects", "5"]) == 0
    assert (data / "manifest.txt").exists()
    common = TINY + ["--set", f"corpus_dir={data}"]
    assert cli.main(["pretrain-style", *common, "--out", str(style)]) == 0
    assert cli.main(["train", *common, "--style", str(style), "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "target avg dice" in out
    assert cli.main(["evaluate", str(run)]) == 0
    assert "# target" in capsys.readouterr().out
    assert cli.main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table.txt").exists() and (tmp_path / "rep" / "overlay_run.png").exists()


def test_resume_via_cli(tmp_path):
    style, a, b = tmp_path / "s", tmp_path / "a", tmp_path / "b"
    cli.main(["pretrain-style", *TINY, "--out", str(style)])
    cli.main(["train", *TINY, "--style", str(style), "--out", str(a), "--stop-at", "5"])
    cli.main(["train", *TINY, "--style", str(style), "--out", str(b), "--resume", str(a / "checkpoint")])
    cli.main(["train", *TINY, "--style", str(style), "--out", str(tmp_path / "c")])
    assert (b / "target_metrics.csv").read_text() == (tmp_path / "c" / "target_metrics.csv").read_text()


def test_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("CENTROID_UDA_TAU", "0.7")
    args = cli.build_parser().parse_args(["train", "--set", "seed=3"])
    cfg = cli._config(args)
    assert cfg.tau == 0.7 and cfg.seed == 3


def test_bench_mem_cli(tmp_path, capsys):
    assert cli.main(["bench-mem", "--out", str(tmp_path), "--sizes", "8", "16", "--variants", "centroid", "block"]) == 0
    assert (tmp_path / "membench.csv").exists() and (tmp_path / "membench.png").exists()
    assert "pairwise slope" in capsys.readouterr().out


def _rep(d):
    return MetricsReport({"MYO": ClassStats(d, 0.1, 2.0, 0.5, 0)}, 3)


def test_metrics_csv_round_trip():
    r = _rep(0.4)
    back = read_metrics_csv(r.to_csv())
    assert back.per_class["MYO"] == r.per_class["MYO"]


def test_ordering_check_reports_violations():
    order = ("FUDA", "FUDA+CCL", "FUDA+CCL+CNR", "FUDA+CCL+CNR+MPCCL")
    recs = [RunRecord("oneshot", m, 0, 0, _rep(d)) for m, d in zip(order, (0.1, 0.2, 0.3, 0.4))]
    recs += [RunRecord("oneshot", m, 1, 0, _rep(d)) for m, d in zip(order, (0.1, 0.3, 0.2, 0.4))]
    res = ordering_check(recs)
    assert res[0] == [] and len(res[1]) == 1 and "FUDA+CCL (0.3000) > FUDA+CCL+CNR (0.2000)" in res[1][0]


def test_write_report(tmp_path):
    recs = [RunRecord("oneshot", "no-uda", s, 0, _rep(0.2 + 0.1 * s)) for s in range(2)]
    paths = write_report(recs, tmp_path)
    rows = summary_rows(recs)
    assert rows[0][2].per_class["MYO"].dice_mean == pytest.approx(0.25)
    assert "no-uda" in paths["table"].read_text()
    assert paths["runs"].read_text().count("\n") == 3


def test_overlay_colors_distinct():
    img = np.full((4, 4), 0.5)
    lab = np.array([[0, 1, 2, 3]] * 4)
    out = color_overlay(img, lab)
    assert np.allclose(out[:, 0], 0.5)
    cols = {tuple(np.round(out[0, i], 4)) for i in range(1, 4)}
    assert len(cols) == 3
