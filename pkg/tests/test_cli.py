"""End-to-end command-line behaviour: exit codes, files written, output text."""

import hashlib
import shutil

import numpy as np
import pytest

from dircn import cli
from dircn.cli import ExperimentConfig, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset plus one finished single-epoch training run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main([
        "generate-data", "--out", str(data), "--slices", "6", "--grid", "16",
        "--coils", "2", "--noise-sigma", "0.001", "--seed", "3",
    ]) == 0
    assert main([
        "train", "--data", str(data), "--out", str(run),
        "--preset", "baseline", "--cascades", "1", "--levels", "2",
        "--base-channels", "4", "--sens-channels", "2",
        "--epochs", "1", "--slices-per-epoch", "2", "--accelerations", "4",
    ]) == 0
    return {"data": data, "run": run}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def test_version_flag_exits_zero():
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0


def test_unknown_flag_is_exit_one(capsys):
    assert main(["mask-inspect", "--lines", "64", "--acceleration", "4",
                 "--frobnicate"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_required_flag_is_exit_one(capsys):
    assert main(["generate-data"]) == 1
    assert "--out" in capsys.readouterr().err


def test_bad_split_choice_is_exit_one(workspace):
    rc = main([
        "evaluate", "--checkpoint", str(workspace["run"] / "checkpoint.bin"),
        "--data", str(workspace["data"]), "--split", "holdout",
    ])
    assert rc == 1


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------


def test_generate_data_reports_splits(workspace, capsys):
    out = workspace["data"]
    assert (out / "manifest.txt").is_file()
    assert (out / "data.bin").is_file()
    rc = main(["generate-data", "--out", str(out)])
    err = capsys.readouterr().err
    assert rc == 1
    assert "--force" in err


def test_generate_data_force_overwrites(tmp_path, capsys):
    out = tmp_path / "d"
    for _ in range(2):
        args = ["generate-data", "--out", str(out), "--slices", "2",
                "--grid", "16", "--coils", "1", "--force"]
        assert main(args) == 0
    msg = capsys.readouterr().out
    assert "wrote 2 slices (16x16, 1 coils)" in msg
    assert "train=2 val=0 test=0" in msg


def test_generate_data_bad_fractions_is_exit_one(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path / "x"),
                 "--split", "0.9,0.9,0.2"]) == 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_run_directory(workspace):
    run = workspace["run"]
    assert (run / "checkpoint.bin").is_file()
    assert (run / "losses.csv").is_file()
    assert (run / "config.resolved").is_file()
    lines = (run / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss,steps"
    assert len(lines) == 2


def test_config_echo_digest_is_self_consistent(workspace):
    lines = (workspace["run"] / "config.resolved").read_text().splitlines()
    digest_line = lines[-1]
    assert digest_line.startswith("config_digest=")
    body = "\n".join(lines[:-1]).encode("utf-8")
    assert digest_line.split("=", 1)[1] == hashlib.sha256(body).hexdigest()


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "# experiment\n"
        "epochs = 9\n"
        "lr = 0.01  # inline comment\n"
        "accelerations = 4,8\n"
    )
    values = cli.read_config_file(cfg)
    config = cli.resolve_config(values, {"epochs": "2"})
    assert config.epochs == 2
    assert config.lr == 0.01
    assert config.accelerations == (4, 8)


def test_unknown_config_key_is_exit_one(tmp_path, workspace, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    rc = main([
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "r"),
        "--config", str(cfg),
    ])
    err = capsys.readouterr().err
    assert rc == 1
    assert "unknown config key" in err
    assert "lr" in err


def test_duplicate_config_key_is_rejected(tmp_path):
    cfg = tmp_path / "dup.cfg"
    cfg.write_text("epochs = 1\nepochs = 2\n")
    with pytest.raises(cli.ValidationError, match="duplicate"):
        cli.read_config_file(cfg)


def test_resume_continues_epoch_numbering(workspace, tmp_path, capsys):
    run2 = tmp_path / "resumed"
    shutil.copytree(workspace["run"], run2)
    rc = main([
        "train", "--data", str(workspace["data"]), "--out", str(run2),
        "--resume", str(run2 / "checkpoint.bin"),
        "--epochs", "2", "--slices-per-epoch", "2", "--accelerations", "4",
        "--preset", "baseline", "--cascades", "1", "--levels", "2",
        "--base-channels", "4", "--sens-channels", "2",
    ])
    out = capsys.readouterr().out
    assert rc == 0
    assert "epoch    1" in out
    assert "epoch    0" not in out


def test_train_rejects_bad_preset(workspace, tmp_path):
    rc = main([
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "r"),
        "--preset", "resnet50",
    ])
    assert rc == 1


# ---------------------------------------------------------------------------
# evaluate and reconstruct
# ---------------------------------------------------------------------------


def test_evaluate_writes_csv_and_table(workspace, tmp_path, capsys):
    csv_path = tmp_path / "metrics.csv"
    rc = main([
        "evaluate", "--checkpoint", str(workspace["run"] / "checkpoint.bin"),
        "--data", str(workspace["data"]), "--split", "test",
        "--accelerations", "4", "--csv", str(csv_path),
    ])
    out = capsys.readouterr().out
    assert rc == 0
    assert "ALL" in out
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "slice_id,contrast,acceleration,ssim,nmse,psnr,zf_ssim,zf_nmse,zf_psnr"
    assert len(lines) == 2  # one test slice, one acceleration


def test_evaluate_missing_checkpoint_is_exit_one(workspace, tmp_path, capsys):
    rc = main([
        "evaluate", "--checkpoint", str(tmp_path / "missing.bin"),
        "--data", str(workspace["data"]),
    ])
    assert rc == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_corrupt_checkpoint_is_exit_two(workspace, tmp_path, capsys):
    source = workspace["run"] / "checkpoint.bin"
    broken = tmp_path / "broken.bin"
    broken.write_bytes(source.read_bytes()[:40])
    rc = main([
        "evaluate", "--checkpoint", str(broken), "--data", str(workspace["data"]),
    ])
    assert rc == 2
    assert "runtime failure" in capsys.readouterr().err


def test_reconstruct_writes_pgm_images(workspace, tmp_path, capsys):
    out_dir = tmp_path / "imgs"
    slice_id = "s0000"
    rc = main([
        "reconstruct", "--checkpoint", str(workspace["run"] / "checkpoint.bin"),
        "--data", str(workspace["data"]), "--slice", slice_id,
        "--accelerations", "4,8", "--out", str(out_dir),
    ])
    assert rc == 0
    expected = ["ground_truth.pgm", "recon_x4.pgm", "error_x4.pgm",
                "recon_x8.pgm", "error_x8.pgm"]
    for name in expected:
        blob = (out_dir / name).read_bytes()
        header = b"P5\n16 16\n65535\n"
        assert blob.startswith(header), name
        assert len(blob) == len(header) + 16 * 16 * 2, name
    assert "x4: ssim=" in capsys.readouterr().out


def test_reconstruct_unknown_slice_is_exit_one(workspace, tmp_path):
    rc = main([
        "reconstruct", "--checkpoint", str(workspace["run"] / "checkpoint.bin"),
        "--data", str(workspace["data"]), "--slice", "s9999",
        "--out", str(tmp_path / "imgs"),
    ])
    assert rc == 1


# ---------------------------------------------------------------------------
# mask-inspect and gradcheck
# ---------------------------------------------------------------------------


def test_mask_inspect_prints_known_pattern(capsys):
    rc = main(["mask-inspect", "--lines", "100", "--acceleration", "4"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "kept=25" in out
    assert "center=46..53 (8 lines)" in out
    expected = [5, 10, 15, 20, 25, 30, 35, 40, 45, 46, 47, 48, 49, 50,
                51, 52, 53, 58, 63, 68, 73, 78, 83, 88, 93]
    assert "indices: " + " ".join(str(i) for i in expected) in out


def test_mask_inspect_without_default_fraction_is_exit_one(capsys):
    assert main(["mask-inspect", "--lines", "64", "--acceleration", "3"]) == 1
    assert main(["mask-inspect", "--lines", "64", "--acceleration", "3",
                 "--center-fraction", "0.1"]) == 0


def test_gradcheck_ops_scope_passes(capsys):
    rc = main(["gradcheck", "--scope", "ops"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "all gradient checks passed" in out
    assert "FAIL" not in out


def test_gradcheck_reports_broken_derivative(monkeypatch, capsys):
    monkeypatch.setattr("dircn.autodiff.tensor._silu_grad",
                        lambda x: np.ones_like(x))
    rc = main(["gradcheck", "--scope", "ops"])
    out = capsys.readouterr().out
    assert rc == 2
    assert "FAIL" in out


# ---------------------------------------------------------------------------
# PGM writer details
# ---------------------------------------------------------------------------


def test_write_pgm_scales_and_clips(tmp_path):
    image = np.array([[0.0, 0.5], [1.0, 2.0]])
    path = tmp_path / "t.pgm"
    cli.write_pgm(path, image, scale_max=1.0)
    blob = path.read_bytes()
    header = b"P5\n2 2\n65535\n"
    assert blob.startswith(header)
    samples = np.frombuffer(blob[len(header):], dtype=">u2").reshape(2, 2)
    assert samples.tolist() == [[0, 32768], [65535, 65535]]


def test_write_pgm_validation(tmp_path):
    with pytest.raises(ValueError):
        cli.write_pgm(tmp_path / "t.pgm", np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        cli.write_pgm(tmp_path / "t.pgm", np.zeros((2, 2)), 0.0)


def test_config_lines_are_sorted_and_typed():
    config = ExperimentConfig()
    lines = cli.config_lines(config)
    keys = [line.split("=", 1)[0] for line in lines]
    assert keys == sorted(keys)
    rendered = dict(line.split("=", 1) for line in lines)
    assert rendered["amsgrad"] == "true"
    assert rendered["accelerations"] == "4,8"
    assert rendered["center_fraction"] == "none"
    assert rendered["lr"] == "0.002"
