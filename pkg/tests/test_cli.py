import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from mfcl.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from mfcl.imaging import encode_ppm, save_mask
from mfcl.synthetic import write_synthetic_dataset
from mfcl.training import load_state

TINY = "image_size=16\nbase_channels=2\nbatch=2\nsteps={steps}\ndtype=float64\ncheckpoint_every=2\n"


@pytest.fixture(scope="module")
def raw(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("raw"), n=3, size=24)


@pytest.fixture(scope="module")
def prepared(tmp_path_factory, raw):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prepare", "--in", str(raw), "--out", str(out), "--size", "16", "--masks-per-bucket", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, prepared):
    tmp = tmp_path_factory.mktemp("run")
    (tmp / "cfg.txt").write_text(TINY.format(steps=2))
    code = main(["train", "--config", str(tmp / "cfg.txt"), "--data", str(prepared), "--out", str(tmp / "out"),
                 "--no-ca", "--no-bpfa"])
    assert code == EXIT_OK
    return tmp / "out"


def test_prepare_writes_manifest(prepared):
    assert (prepared / "manifest.json").exists()
    assert len(list((prepared / "images").iterdir())) == 3


def test_train_outputs_and_ablation_echo(trained):
    assert (trained / "ckpt_000002.ckpt").exists()
    assert (trained / "loss_curve.png").exists()
    cfg = load_state(trained / "ckpt_000002.ckpt").cfg
    assert not cfg.enable_ca and not cfg.enable_bpfa and cfg.enable_sdff


def test_train_resume(trained, prepared, tmp_path):
    (tmp_path / "cfg.txt").write_text(TINY.format(steps=4) + "enable_ca=false\nenable_bpfa=false\n")
    code = main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(prepared), "--out", str(trained),
                 "--resume", str(trained / "ckpt_000002.ckpt")])
    assert code == EXIT_OK
    assert (trained / "ckpt_000004.ckpt").exists()


def test_resume_arch_mismatch_is_usage_error(trained, prepared, tmp_path, capsys):
    (tmp_path / "cfg.txt").write_text(TINY.format(steps=4))
    code = main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(prepared), "--out",
                 str(tmp_path / "o"), "--resume", str(trained / "ckpt_000002.ckpt")])
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert "enable_ca" in err and "enable_bpfa" in err


def test_infer(trained, tmp_path, capsys):
    px = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    (tmp_path / "img.ppm").write_bytes(encode_ppm(px))
    mask = np.ones((16, 16))
    mask[4:12, 4:12] = 0
    save_mask(mask, tmp_path / "mask.ppm")
    code = main(["infer", "--ckpt", str(trained / "ckpt_000002.ckpt"), "--image", str(tmp_path / "img.ppm"),
                 "--mask", str(tmp_path / "mask.ppm"), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    assert (tmp_path / "o" / "composited.ppm").exists() and (tmp_path / "o" / "raw.ppm").exists()


def test_eval_prints_csv_and_writes_figure(trained, prepared, tmp_path, capsys):
    with pytest.warns(RuntimeWarning, match="degenerate"):
        code = main(["eval", "--ckpt", str(trained / "ckpt_000002.ckpt"), "--data", str(prepared),
                     "--bucket", "30-40", "--out", str(tmp_path / "ev")])
    assert code == EXIT_OK
    out, err = capsys.readouterr()
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:4] == ["path", "psnr_comp", "ssim_comp", "mae_comp"]
    assert rows[-1][0] == "MEAN" and len(rows) == 2 + 3
    assert "non-comparable" in err
    assert (tmp_path / "ev" / "metrics.csv").read_text() == out
    assert (tmp_path / "ev" / "examples.png").exists()


@pytest.mark.parametrize("argv", [[], ["fly"], ["eval", "--ckpt", "x"], ["train", "--config"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE


def test_bad_bucket_is_usage_error(trained, prepared):
    assert main(["eval", "--ckpt", str(trained / "ckpt_000002.ckpt"), "--data", str(prepared),
                 "--bucket", "35-45"]) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path, prepared, capsys):
    (tmp_path / "cfg.txt").write_text("steps=1\nwarmup=3\n")
    assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(prepared),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "warmup" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, trained):
    (tmp_path / "cfg.txt").write_text(TINY.format(steps=1))
    (tmp_path / "empty").mkdir()
    assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["prepare", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "p")]) == EXIT_DATA
    (tmp_path / "bad.ppm").write_bytes(b"P6\n16 16\n255\n")
    assert main(["infer", "--ckpt", str(trained / "ckpt_000002.ckpt"), "--image", str(tmp_path / "bad.ppm"),
                 "--mask", str(tmp_path / "bad.ppm"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", "--ckpt", str(tmp_path / "junk.ckpt"), "--data", str(tmp_path),
                 "--bucket", "10-20"]) == EXIT_DATA


def test_numeric_failure_exits_3(tmp_path, trained, prepared):
    state = load_state(trained / "ckpt_000002.ckpt")
    for p in state.generator.parameters():
        p.data[...] = np.inf
    bad = state.save(tmp_path / "bad.ckpt")
    (tmp_path / "cfg.txt").write_text(TINY.format(steps=4) + "enable_ca=false\nenable_bpfa=false\n")
    assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(prepared),
                 "--out", str(tmp_path / "o"), "--resume", str(bad)]) == EXIT_NUMERIC


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mfcl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout


@pytest.mark.slow
def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out
