import csv

import pytest

from foveassl import cli, pipeline
from foveassl.config import RunConfig


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny synthetic world, ingested and trained for a few steps."""
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert cli.main(["synth", "--out-dir", str(data), "--n-videos", "2", "--video-frames", "50"]) == 0
    common = ["--preset", "desk", "--data-dir", str(data), "--out-dir", str(out)]
    assert cli.main(["ingest", *common]) == 0
    assert cli.main(["train", *common, "--manifest", str(out / "manifest.tsv"), "--steps", "3",
                     "--batch-size", "8", "--hidden", "16", "--out-dim", "8"]) == 0
    return root, data, out, common


def test_ingest_outputs(run):
    _, _, out, _ = run
    assert (out / "manifest.tsv").exists() and (out / "config.ini").exists()


def test_train_outputs_and_echo(run):
    _, _, out, _ = run
    for name in ("checkpoint.fvck", "loss.csv", "replay.log", "loss.png"):
        assert (out / name).exists()
    echoed = RunConfig.read(out / "config.ini")
    assert echoed.steps == 3 and echoed.batch_size == 8 and echoed.resolution == 64


def test_eval(run, capsys, tmp_path):
    _, data, out, _ = run
    args = ["eval", "--preset", "desk", "--data-dir", str(data), "--out-dir", str(tmp_path),
            "--checkpoint", str(out / "checkpoint.fvck"), "--probe-epochs", "2", "--probe-aug", "1",
            "--datasets", "synth-coil", "--sensitivity"]
    assert cli.main(args) == 0
    rows = list(csv.DictReader(open(tmp_path / "reports.csv")))
    assert [r["dataset"] for r in rows] == ["synth-coil"]
    assert (tmp_path / "sensitivity.csv").exists()
    assert "sensitivity" in capsys.readouterr().out


def test_eval_empty_dataset_list(run, tmp_path):
    _, data, out, _ = run
    assert cli.main(["eval", "--preset", "desk", "--data-dir", str(data), "--out-dir", str(tmp_path),
                     "--checkpoint", str(out / "checkpoint.fvck"), "--datasets", ""]) == 0
    assert len((tmp_path / "reports.csv").read_text().splitlines()) == 1


def test_sweep_single_value(run, tmp_path):
    _, data, _, _ = run
    args = ["sweep", "--preset", "desk", "--data-dir", str(data), "--out-dir", str(tmp_path),
            "--steps", "2", "--batch-size", "8", "--hidden", "16", "--out-dim", "8",
            "--probe-epochs", "1", "--probe-aug", "1", "--axis", "delta_t", "--values", "1",
            "--datasets", "synth-coil"]
    assert cli.main(args) == 0
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert len(rows) > 1


def test_schedule_dump(tmp_path, capsys):
    assert cli.main(["schedule-dump", "--out-dir", str(tmp_path), "--steps", "1000"]) == 0
    assert "peak lr 3.2, warmup 10 of 1000" in capsys.readouterr().out
    assert len((tmp_path / "schedule.csv").read_text().splitlines()) == 1002


def test_gaze_heatmap(run, tmp_path):
    _, data, out, _ = run
    assert cli.main(["gaze-heatmap", "--preset", "desk", "--manifest", str(out / "manifest.tsv"),
                     "--out-dir", str(tmp_path / "a"), "--bin-size", "8"]) == 0
    assert cli.main(["gaze-heatmap", "--preset", "desk", "--data-dir", str(data),
                     "--out-dir", str(tmp_path / "b"), "--bin-size", "8"]) == 0
    assert (tmp_path / "b" / "gaze_heatmap.png").exists()


def test_gaze_heatmap_takes_frame_size_from_the_data(run, tmp_path, capsys):
    # no preset: the config default resolution is the full-scale one
    _, data, out, _ = run
    for flag, path in (("--manifest", out / "manifest.tsv"), ("--data-dir", data)):
        assert cli.main(["gaze-heatmap", flag, str(path), "--out-dir", str(tmp_path / flag[2:])]) == 0
        dx, dy = (float(v) for v in capsys.readouterr().out.split("(")[-1].strip(")\n").split(","))
        assert abs(dx) < 16 and abs(dy) < 16


def test_env_seed_and_flag_precedence(monkeypatch, tmp_path):
    monkeypatch.setenv("FVSS_SEED", "11")
    args = cli.build_parser().parse_args(["train", "--preset", "desk"])
    assert cli.resolve_config(args).seed == 11
    args = cli.build_parser().parse_args(["train", "--preset", "desk", "--seed", "4"])
    assert cli.resolve_config(args).seed == 4
    cfg_file = tmp_path / "c.ini"
    RunConfig.desk(seed=2, delta_t=1.0).write(cfg_file)
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_file)])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 11 and cfg.delta_t == 1.0


@pytest.mark.parametrize("argv", [
    ["ingest", "--preset", "desk", "--data-dir", "/nonexistent/place"],
    ["train", "--preset", "desk", "--manifest", "/nonexistent/manifest.tsv"],
    ["train", "--preset", "desk"],
    ["eval", "--preset", "desk", "--checkpoint", "/nonexistent.fvck"],
    ["sweep", "--preset", "desk", "--axis", "window", "--values", "1"],
    ["synth", "--out-dir", "x", "--n-classes", "1"],
    ["schedule-dump"],
    ["gaze-heatmap", "--preset", "desk"],
    ["train", "--preset", "desk", "--gaze-mode", "peripheral"],
    ["train", "--batch-size", "lots"],
    ["nonsense"],
    [],
])
def test_user_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1


def _boom(*a, **k):
    raise RuntimeError("boom")


@pytest.mark.parametrize("argv, target", [
    (["ingest", "--preset", "desk"], "run_ingest"),
    (["train", "--preset", "desk", "--manifest", "MANIFEST"], "run_train"),
    (["eval", "--preset", "desk", "--checkpoint", "CKPT"], "featurizer_from_checkpoint"),
    (["sweep", "--preset", "desk", "--axis", "crop", "--values", "32"], "sweep"),
    (["schedule-dump", "--steps", "5"], "prepare_run_dir"),
    (["gaze-heatmap", "--preset", "desk", "--manifest", "MANIFEST"], "prepare_run_dir"),
])
def test_internal_failures_exit_2(argv, target, run, tmp_path, monkeypatch):
    _, _, out, _ = run
    argv = [a.replace("MANIFEST", str(out / "manifest.tsv")).replace("CKPT", str(out / "checkpoint.fvck"))
            for a in argv]
    monkeypatch.setattr(pipeline, target, _boom)
    assert cli.main([*argv, "--out-dir", str(tmp_path)]) == 2


def test_synth_internal_failure(monkeypatch, tmp_path):
    monkeypatch.setattr(cli.synth, "write_world", _boom)
    assert cli.main(["synth", "--out-dir", str(tmp_path)]) == 2
