"""Command-line surface tests: each subcommand end to end on tiny inputs,
the exit-code contract (1 validation, 2 file errors, 3 failed gradient
suites), config-file precedence, and that a run's config.txt snapshot
reproduces the run bitwise."""

import os

import numpy as np
import pytest

from augopt.cli import main
from augopt.models import save_checkpoint
from augopt.synthdata import load_dataset
from augopt.tensor import Rng, Tensor, no_grad
from augopt.trainer import TrainConfig, TrainState
from augopt.transforms import PARAM_COLUMNS, TransformParams, crop

TINY_FLAGS = ["--encoder-widths", "4,8", "--tnet-widths", "2,4",
              "--head-hidden", "8", "--head-out", "4",
              "--batch-size", "4", "--epochs", "2", "--checkpoint-every", "1"]


def read(path, mode="r"):
    with open(path, mode) as fh:
        return fh.read()


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds.bin"
    assert main(["gen-data", "--out", str(path), "--n", "12", "--seed", "3"]) == 0
    return str(path)


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    """Random-init checkpoint carrying encoder and transform-network stores."""
    path = tmp_path_factory.mktemp("ckpt") / "init.augd"
    state = TrainState.create(TrainConfig.for_strategy(
        "m_sup", encoder_widths=(4, 8), tnet_widths=(2, 4), head_hidden=8, head_out=4))
    save_checkpoint(str(path), state.stores(), {})
    return str(path)


# -- gen-data -----------------------------------------------------------------


def test_gen_data_writes_dataset(tmp_path):
    out = tmp_path / "d.bin"
    assert main(["gen-data", "--out", str(out), "--n", "10", "--size", "48",
                 "--seed", "5", "--positive-fraction", "0.3"]) == 0
    ds = load_dataset(str(out))
    assert ds.images.shape == (10, 1, 48, 48)
    assert int(ds.labels.sum()) == 3
    assert os.path.exists(tmp_path / "d.csv")


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    main(["gen-data", "--out", str(a), "--n", "8", "--seed", "4"])
    main(["gen-data", "--out", str(b), "--n", "8", "--seed", "4"])
    assert read(a, "rb") == read(b, "rb")
    assert read(tmp_path / "a.csv") == read(tmp_path / "b.csv")


def test_gen_data_bad_size_is_validation_error(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d.bin"), "--n", "8",
                 "--size", "33"]) == 1


def test_gen_data_unwritable_path_is_io_error(tmp_path):
    assert main(["gen-data", "--out", "/no-such-dir/d.bin", "--n", "8"]) == 2


def test_missing_subcommand_is_validation_error():
    assert main([]) == 1


def test_unknown_flag_exits_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "d.bin"), "--bogus", "1"])
    assert exc.value.code == 1


# -- train --------------------------------------------------------------------


def run_train(data_file, out_dir, *extra):
    return main(["train", "--data", data_file, "--out", str(out_dir),
                 *TINY_FLAGS, *extra])


def test_train_tiny_run(data_file, tmp_path):
    out = tmp_path / "run"
    assert run_train(data_file, out, "--strategy", "m-sup") == 0
    lines = read(out / "metrics.csv").strip().split("\n")
    assert lines[0] == "epoch,batch,strategy,loss_con,loss_sup,seconds"
    assert len(lines) == 1 + 6  # 3 batches x 2 epochs
    assert all(",m_sup," in ln for ln in lines[1:])
    assert (out / "ckpt_ep0002.augd").exists()


def test_train_defaults_recorded_for_strategy(data_file, tmp_path):
    out = tmp_path / "run"
    run_train(data_file, out, "--strategy", "m-sup")
    cfg = read(out / "config.txt")
    assert "strategy=m_sup" in cfg
    assert "alpha1=10" in cfg  # strategy default kept when the flag is omitted
    assert "alpha0=1" in cfg


def test_train_rejects_strategy_weight_conflict(data_file, tmp_path):
    assert run_train(data_file, tmp_path / "run", "--strategy", "selfsup-m",
                     "--alpha1", "10") == 1


def test_train_requires_a_strategy(data_file, tmp_path):
    assert run_train(data_file, tmp_path / "run") == 1


def test_train_unknown_strategy(data_file, tmp_path):
    assert run_train(data_file, tmp_path / "run", "--strategy", "nope") == 1


def test_train_missing_data_file(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path / "run"), "--strategy", "random"]) == 2


def test_train_flag_overrides_config_file(data_file, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("strategy=random\nepochs=2\n")
    out = tmp_path / "run"
    assert main(["train", "--data", data_file, "--out", str(out), *TINY_FLAGS,
                 "--config", str(cfg), "--epochs", "1"]) == 0
    text = read(out / "config.txt")
    assert "strategy=random" in text
    assert "epochs=1" in text
    rows = read(out / "metrics.csv").strip().split("\n")[1:]
    assert all(row.startswith("1,") for row in rows)


def test_train_config_bad_key(data_file, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("strategy=random\nwat=1\n")
    assert main(["train", "--data", data_file, "--out", str(tmp_path / "run"),
                 "--config", str(cfg)]) == 1


def test_train_snapshot_reproduces_run(data_file, tmp_path):
    first = tmp_path / "first"
    again = tmp_path / "again"
    run_train(data_file, first, "--strategy", "m-sup", "--seed", "6")
    assert main(["train", "--data", data_file, "--out", str(again),
                 "--config", str(first / "config.txt")]) == 0
    assert read(first / "metrics.csv") == read(again / "metrics.csv")
    assert read(first / "ckpt_ep0002.augd", "rb") == read(again / "ckpt_ep0002.augd", "rb")


# -- eval ---------------------------------------------------------------------


def test_eval_run_directory(data_file, tmp_path, capsys):
    run = tmp_path / "run"
    run_train(data_file, run, "--strategy", "m-sup")
    out = tmp_path / "scores.csv"
    assert main(["eval", "--data", data_file, "--run", str(run),
                 "--out", str(out)]) == 0
    lines = read(out).strip().split("\n")
    assert lines[0] == "epoch,auc_mean,auc_std"
    assert len(lines) == 3  # one row per epoch checkpoint
    assert lines[1].startswith("1,") and lines[2].startswith("2,")


def test_eval_run_appends_metrics_and_writes_report(data_file, tmp_path):
    run = tmp_path / "run"
    run_train(data_file, run, "--strategy", "m-sup")
    before = read(run / "metrics.csv")
    assert main(["eval", "--data", data_file, "--run", str(run)]) == 0
    report = read(run / "eval_report.csv").strip().split("\n")
    assert report[0] == "epoch,auc_mean,auc_std"
    appended = read(run / "metrics.csv")[len(before):].strip().split("\n")
    assert appended == report[1:]  # same eval rows, appended after batch rows


def test_eval_deterministic(data_file, tiny_ckpt, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["eval", "--data", data_file, "--ckpt", tiny_ckpt, "--out", str(a)])
    main(["eval", "--data", data_file, "--ckpt", tiny_ckpt, "--out", str(b)])
    assert read(a) == read(b)


def test_eval_needs_checkpoints(data_file):
    assert main(["eval", "--data", data_file]) == 1


def test_eval_missing_checkpoint(data_file, tmp_path):
    assert main(["eval", "--data", data_file,
                 "--ckpt", str(tmp_path / "none.augd")]) == 2


# -- grad-check ---------------------------------------------------------------


def test_grad_check_single_suite(capsys):
    assert main(["grad-check", "--transform", "flip0", "--draws", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "all suites passed" in out


def test_grad_check_impossible_tolerance(capsys):
    assert main(["grad-check", "--transform", "blur", "--draws", "2",
                 "--tol", "1e-30"]) == 3
    assert "FAILED" in capsys.readouterr().out


# -- preview ------------------------------------------------------------------


def test_preview_neutral_matches_centered_crop(data_file, tmp_path):
    out = tmp_path / "prev"
    assert main(["preview", "--data", data_file, "--out", str(out),
                 "--index", "2", "--lambdas", "neutral"]) == 0
    ds = load_dataset(data_file)
    x = Tensor(ds.images[2:3].astype(np.float64))
    half = TransformParams.neutral(1).lambda_crop_x
    with no_grad():
        expected = crop(x, half, half).data[0, 0]
    import augopt.synthdata as sd
    sd.write_pgm(expected, str(tmp_path / "oracle.pgm"))
    assert read(out / "aug_0002.pgm", "rb") == read(tmp_path / "oracle.pgm", "rb")
    assert read(out / "orig_0002.pgm", "rb")[:2] == b"P5"


def test_preview_lambda_csv(data_file, tmp_path):
    out = tmp_path / "prev"
    main(["preview", "--data", data_file, "--out", str(out), "--seed", "1"])
    lines = read(out / "lambdas.csv").strip().split("\n")
    assert lines[0] == "source,index," + ",".join(PARAM_COLUMNS)
    assert len(lines) == 5  # four default indices
    for ln in lines[1:]:
        parts = ln.split(",")
        assert parts[0] == "lambda"
        vals = [float(v) for v in parts[2:]]
        assert all(0.0 <= v <= 1.0 for v in vals)


def test_preview_checkpoint_strengths_depend_on_image(data_file, tiny_ckpt, tmp_path):
    out = tmp_path / "prev"
    assert main(["preview", "--data", data_file, "--out", str(out),
                 "--ckpt", tiny_ckpt, "--index", "0", "--index", "5",
                 "--index", "9"]) == 0
    lines = [ln for ln in read(out / "lambdas.csv").strip().split("\n")
             if ln.startswith("mnet,")]
    assert len(lines) == 3
    strengths = {ln.split(",", 2)[2] for ln in lines}
    assert len(strengths) == 3  # the network reacts to image content
    for i in (0, 5, 9):
        assert (out / f"mnet_{i:04d}.pgm").exists()


def test_preview_bad_index(data_file, tmp_path):
    assert main(["preview", "--data", data_file, "--out", str(tmp_path / "p"),
                 "--index", "99"]) == 1


def test_preview_bad_lambdas(data_file, tmp_path):
    assert main(["preview", "--data", data_file, "--out", str(tmp_path / "p"),
                 "--lambdas", "0.5,0.5"]) == 1
