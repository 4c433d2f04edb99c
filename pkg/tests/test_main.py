"""Tests for the command-line entry point."""

import json

import pandas as pd
import pytest

from kpconvx.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, run
from kpconvx.routers.train_router import load_train_config
from kpconvx.services.network import architecture_preset, expected_parameter_counts
from kpconvx.services.train import train_preset
from kpconvx.storage.csvlog import METRIC_COLUMNS
from kpconvx.storage.ply import read_ply

pytestmark = pytest.mark.integration


def _json(out: str) -> dict:
    return json.loads(out)


def test_version(capsys):
    """Test --version prints the program name and version."""
    assert run(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "kpx 0.1.0"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["kernel"],
        ["kernel", "init"],
        ["bench", "--frobnicate"],
        ["bench", "--sweep", "Q=1,2"],
        ["bench", "--sweep", "K=a"],
    ],
    ids=["no-command", "no-kernel-command", "missing-out", "unknown-option", "bad-sweep-param", "bad-sweep-value"],
)
def test_usage_errors(capsys, argv):
    """Test parser errors exit with status 1 and a usage message."""
    assert run(argv) == EXIT_USAGE
    assert "UsageError" in capsys.readouterr().err


def test_bad_log_level(tmp_path, capsys):
    """Test an unknown log level is a usage error."""
    assert run(["--log-level", "loud", "kernel", "init", "--out", str(tmp_path / "k.txt")]) == EXIT_USAGE
    assert "invalid log level" in capsys.readouterr().err


def test_kernel_commands(tmp_path, capsys):
    """Test init, check and regions on a small disposition."""
    path = tmp_path / "k7.txt"
    assert run(["kernel", "init", "--shells", "1,6", "--radius", "1.5", "--out", str(path)]) == EXIT_OK
    report = _json(capsys.readouterr().out)
    assert report["K"] == 7
    assert path.read_text().splitlines()[1] == "1 6"

    assert run(["kernel", "check", str(path)]) == EXIT_OK
    assert _json(capsys.readouterr().out)["passed"] is True

    regions = tmp_path / "regions.csv"
    assert run(["kernel", "regions", str(path), "--resolution", "8", "--out", str(regions)]) == EXIT_OK
    assert "over 7 regions" in capsys.readouterr().out
    assert set(pd.read_csv(regions)["region"]) <= set(range(7))


def test_kernel_check_failures(tmp_path, capsys):
    """Test a tampered or missing disposition file fails with status 2."""
    path = tmp_path / "k7.txt"
    assert run(["kernel", "init", "--shells", "1,6", "--radius", "1.5", "--out", str(path)]) == EXIT_OK
    capsys.readouterr()
    lines = path.read_text().splitlines()
    lines[3] = "0.2 0.1 0 1"
    path.write_text("\n".join(lines) + "\n")
    assert run(["kernel", "check", str(path)]) == EXIT_RUNTIME

    assert run(["kernel", "check", str(tmp_path / "missing.txt")]) == EXIT_RUNTIME
    assert "FileError" in capsys.readouterr().err


def test_kernel_check_tolerance_is_absolute(tmp_path, capsys):
    """Test a shell error above 1e-6 fails the check even on a wide kernel."""
    path = tmp_path / "k7.txt"
    assert run(["kernel", "init", "--shells", "1,6", "--radius", "30", "--out", str(path)]) == EXIT_OK
    capsys.readouterr()
    assert run(["kernel", "check", str(path)]) == EXIT_OK
    capsys.readouterr()

    # push one shell point 1e-5 outwards (shell radius 20, so well under 1e-6 relative to the radius)
    lines = path.read_text().splitlines()
    x, y, z, shell = lines[3].split()
    scaled = [f"{float(v) * (1 + 5e-7):.9g}" for v in (x, y, z)]
    lines[3] = " ".join([*scaled, shell])
    path.write_text("\n".join(lines) + "\n")
    assert run(["kernel", "check", str(path)]) == EXIT_RUNTIME
    report = _json(capsys.readouterr().out)
    assert report["passed"] is False
    assert 5e-6 < report["shell_error_max"] < 2e-5
    assert run(["kernel", "check", str(path), "--tolerance", "1e-4"]) == EXIT_OK


def test_synth_and_subsample(tmp_path, capsys):
    """Test synthetic PLY output and subsampling one of the files."""
    out = tmp_path / "synth"
    argv = ["synth", "--train", "2", "--val", "1", "--points", "300", "--out", str(out)]
    assert run(argv) == EXIT_OK
    assert "Wrote 2 train and 1 val clouds" in capsys.readouterr().out
    assert len(list((out / "train").glob("*.ply"))) == 2
    assert (out / "classes.txt").read_text().count("\n") == 4

    source = out / "train" / "cloud_0000.ply"
    target = tmp_path / "sub.ply"
    assert run(["subsample", "--in", str(source), "--cell", "0.25", "--out", str(target)]) == EXIT_OK
    assert "300 points ->" in capsys.readouterr().out
    sub = read_ply(target)
    assert 0 < sub.num_points < 300
    assert sub.labels is not None


def test_subsample_bad_input(tmp_path, capsys):
    """Test a malformed PLY is reported as a schema error."""
    bad = tmp_path / "bad.ply"
    bad.write_text("not a ply\n")
    assert run(["subsample", "--in", str(bad), "--cell", "0.1", "--out", str(tmp_path / "o.ply")]) == EXIT_RUNTIME
    assert "SchemaError" in capsys.readouterr().err


def test_train_then_eval(tmp_path, capsys):
    """Test a one-step training run writes its files and the checkpoint evaluates."""
    out = tmp_path / "run"
    data = ["--train-clouds", "2", "--val-clouds", "1", "--points", "256"]
    argv = ["--seed", "3", "train", "--preset", "tiny-seg", "--epochs", "1", "--steps", "1", *data, "--out", str(out)]
    assert run(argv) == EXIT_OK
    summary = _json(capsys.readouterr().out)
    assert summary["checkpoint"] == str(out / "model.kpxc")
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == METRIC_COLUMNS and len(metrics) == 1

    checkpoint = str(out / "model.kpxc")
    iou = tmp_path / "iou.csv"
    argv = ["eval", "--preset", "tiny-seg", *data, "--checkpoint", checkpoint, "--votes", "2", "--out", str(iou)]
    assert run(argv) == EXIT_OK
    assert _json(capsys.readouterr().out)["votes"] == 2
    assert list(pd.read_csv(iou).columns) == ["class", "iou"]

    assert run(["eval", "--preset", "tiny-cls", "--checkpoint", checkpoint]) == EXIT_RUNTIME
    assert "ConfigurationError" in capsys.readouterr().err


def test_seeded_training_is_repeatable(tmp_path):
    """Test two runs with the same seed write identical metrics logs."""
    logs = []
    for name in ("a", "b"):
        argv = ["train", "--epochs", "1", "--steps", "2", "--train-clouds", "2", "--val-clouds", "1"]
        assert run([*argv, "--points", "256", "--seed", "1", "--out", str(tmp_path / name)]) == EXIT_OK
        logs.append((tmp_path / name / "metrics.csv").read_text())
    assert logs[0] == logs[1]


def test_config_seeds_are_kept_without_seed_flag(tmp_path):
    """Test the seeds of a training config file survive unless --seed is given."""
    cfg = train_preset("tiny-seg")
    cfg = cfg.model_copy(
        update={
            "synthetic": cfg.synthetic.model_copy(update={"seed": 5}),
            "arch": cfg.arch.model_copy(update={"init_seed": 6, "kernel_seed": 7}),
        }
    )
    config = tmp_path / "train.json"
    config.write_text(cfg.model_dump_json())
    out = str(tmp_path / "run")

    loaded = load_train_config(build_parser().parse_args(["train", "--config", str(config), "--out", out]))
    assert (loaded.synthetic.seed, loaded.arch.init_seed, loaded.arch.kernel_seed) == (5, 6, 7)

    for argv in (["train", "--config", str(config), "--seed", "2"], ["--seed", "2", "train", "--config", str(config)]):
        loaded = load_train_config(build_parser().parse_args([*argv, "--out", out]))
        assert (loaded.synthetic.seed, loaded.arch.init_seed, loaded.arch.kernel_seed) == (2, 2, 2)


def test_config_file_with_flag_overrides(tmp_path, capsys):
    """Test a JSON architecture file is loaded and explicit flags win over it."""
    config = tmp_path / "arch.json"
    config.write_text(architecture_preset("tiny-seg", groups=8).model_dump_json())
    assert run(["params", "--config", str(config), "--groups", "4", "--classes", "3"]) == EXIT_OK
    last = capsys.readouterr().out.strip().splitlines()[-1]
    expected = expected_parameter_counts(architecture_preset("tiny-seg", num_classes=3, groups=4))
    assert last.split()[-1] == str(sum(expected.values()))

    config.write_text('{"channels_per_layer": [20]}')
    assert run(["params", "--config", str(config)]) == EXIT_RUNTIME


def test_params(tmp_path, capsys):
    """Test the parameter audit prints a total equal to its closed form."""
    audit = tmp_path / "audit.csv"
    assert run(["params", "--arch", "tiny-seg", "--groups", "4", "--out", str(audit)]) == EXIT_OK
    last = capsys.readouterr().out.strip().splitlines()[-1]
    total, closed = last.split()[1], last.split()[-1]
    assert total == closed
    assert pd.read_csv(audit)["count"].sum() == int(total)


def test_bench(tmp_path, capsys):
    """Test a small benchmark sweep prints and writes one row per value."""
    report = tmp_path / "bench.csv"
    argv = ["bench", "--op", "kpinv", "--sweep", "K=15,27", "--n", "64", "--h", "8", "--c", "16", "--g", "4"]
    assert run([*argv, "--trials", "5", "--warmup", "0", "--out", str(report)]) == EXIT_OK
    assert "kpinv" in capsys.readouterr().out
    frame = pd.read_csv(report)
    assert frame["value"].tolist() == [15, 27]
    assert (frame["ops"] == frame["expected_ops"]).all()


def test_invalid_bench_spec_is_a_runtime_error(capsys):
    """Test values rejected by the benchmark schema exit with status 2."""
    assert run(["bench", "--trials", "2", "--n", "16"]) == EXIT_RUNTIME
    assert "ConfigurationError" in capsys.readouterr().err
