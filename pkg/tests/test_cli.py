import json

import numpy as np
import pytest

from hsdenoise.cli import main
from hsdenoise.hsio import read_hsr, write_hsr
from hsdenoise.synthetic import make_cube

TRAIN_TOML = """
[dataset]
train = ["{root}/train*.hsr"]
sensor = "lab"
normalization = "none"

[patches]
size = 12
strides = [12]
scales = [1.0]

[model]
p1 = 4
p2 = 6
rank = 2
patch_side = 3
t1 = 1
t2 = 1
{model_extra}

[noise]
kind = "iid_gaussian"
sigma = 25.0

[train]
mode = "{mode}"
batch_size = 2
epochs = 5
max_steps = {steps}
lr = 0.001
seed = 3
ssl_n = 1
augment = false

[output]
checkpoint = "{root}/model.ckpt"
log = "{root}/train.log"
"""


def write_train_set(root, n=3, bands=4, size=24):
    for i in range(n):
        cube = make_cube(bands=bands, height=size, width=size, seed=50 + i, sensor_id="lab")
        write_hsr(root / f"train{i}.hsr", cube)


def write_config(root, mode="supervised", steps=3, model_extra=""):
    path = root / "exp.toml"
    path.write_text(TRAIN_TOML.format(root=root, mode=mode, steps=steps, model_extra=model_extra))
    return path


class TestSimulate:
    def test_sigma_zero_identical_payload(self, tmp_path):
        cube = make_cube(bands=3, height=10, width=10, seed=1)
        src = tmp_path / "clean.hsr"
        write_hsr(src, cube)
        out = tmp_path / "noisy.hsr"
        rc = main(["simulate", "--in", str(src), "--noise", "iid_gaussian", "--sigma", "0",
                   "--seed", "5", "--out", str(out)])
        assert rc == 0
        np.testing.assert_array_equal(read_hsr(out).data, cube.data)

    def test_same_seed_identical(self, tmp_path):
        src = tmp_path / "clean.hsr"
        write_hsr(src, make_cube(bands=3, height=10, width=10, seed=2))
        outs = []
        for name in ("a.hsr", "b.hsr"):
            out = tmp_path / name
            main(["simulate", "--in", str(src), "--noise", "iid_gaussian", "--sigma", "25",
                  "--seed", "9", "--out", str(out)])
            outs.append(read_hsr(out).data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_stripes_sidecar_band_rule(self, tmp_path):
        src = tmp_path / "clean.hsr"
        write_hsr(src, make_cube(bands=31, height=16, width=16, seed=3))
        out = tmp_path / "noisy.hsr"
        rc = main(["simulate", "--in", str(src), "--noise", "stripes", "--seed", "4", "--out", str(out)])
        assert rc == 0
        sidecar = json.loads((tmp_path / "noisy.hsr.noise.json").read_text())
        assert len(sidecar["drawn"]["bands"]) == int(np.floor(0.33 * 31)) == 10
        assert sidecar["seed"] == 4

    def test_missing_input_is_io_error(self, tmp_path):
        rc = main(["simulate", "--in", str(tmp_path / "absent.hsr"), "--noise", "iid_gaussian",
                   "--out", str(tmp_path / "x.hsr")])
        assert rc == 3


class TestTrain:
    def test_train_writes_checkpoint_and_log(self, tmp_path):
        write_train_set(tmp_path)
        cfg = write_config(tmp_path, steps=3)
        rc = main(["train", "--config", str(cfg)])
        assert rc == 0
        assert (tmp_path / "model.ckpt").exists()
        log_lines = [l for l in (tmp_path / "train.log").read_text().splitlines() if not l.startswith("#")]
        assert len(log_lines) == 3
        header = [l for l in (tmp_path / "train.log").read_text().splitlines() if l.startswith("#")]
        assert any("config:" in l for l in header)

    def test_missing_dataset_is_validation_error(self, tmp_path):
        cfg = write_config(tmp_path)
        rc = main(["train", "--config", str(cfg)])
        assert rc == 2

    def test_unknown_config_key_reports_path(self, tmp_path, capsys):
        write_train_set(tmp_path)
        cfg = tmp_path / "exp.toml"
        cfg.write_text("[train]\nturbo = true\n")
        rc = main(["train", "--config", str(cfg)])
        assert rc == 2
        assert "train.turbo" in capsys.readouterr().err

    def test_resume_continues_counter(self, tmp_path):
        write_train_set(tmp_path)
        cfg = write_config(tmp_path, steps=3)
        assert main(["train", "--config", str(cfg)]) == 0
        cfg2 = write_config(tmp_path, steps=5)
        rc = main(["train", "--config", str(cfg2), "--resume", str(tmp_path / "model.ckpt")])
        assert rc == 0
        lines = [l for l in (tmp_path / "train.log").read_text().splitlines() if not l.startswith("#")]
        assert [int(l.split("\t")[0]) for l in lines] == [3, 4]

    def test_ssl_mode_trains(self, tmp_path):
        write_train_set(tmp_path)
        cfg = write_config(tmp_path, mode="ssl", steps=2)
        rc = main(["train", "--config", str(cfg)])
        assert rc == 0
        assert (tmp_path / "model.ckpt").exists()

    def test_divergence_keeps_last_good_checkpoint(self, tmp_path):
        from hsdenoise.training import load_checkpoint

        write_train_set(tmp_path)
        cfg = tmp_path / "exp.toml"
        cfg.write_text(
            TRAIN_TOML.format(root=tmp_path, mode="supervised", steps=50, model_extra="").replace(
                "lr = 0.001", "lr = 1e9\ncheckpoint_every = 1"
            )
        )
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main(["train", "--config", str(cfg)])
        assert rc == 4
        # periodic checkpoints survive the abort
        model, step, _ = load_checkpoint(tmp_path / "model.ckpt")
        assert step >= 1
        assert all(np.isfinite(p.value.data).all() for p in model.parameters())


class TestDenoiseAndEval:
    @pytest.fixture()
    def trained(self, tmp_path):
        write_train_set(tmp_path)
        cfg = write_config(tmp_path, steps=2)
        assert main(["train", "--config", str(cfg)]) == 0
        return tmp_path

    def test_denoise_shape_and_metadata(self, trained):
        cube = make_cube(bands=4, height=20, width=18, seed=60, sensor_id="lab")
        src = trained / "noisy.hsr"
        write_hsr(src, cube)
        out = trained / "restored.hsr"
        rc = main(["denoise", "--ckpt", str(trained / "model.ckpt"), "--in", str(src), "--out", str(out)])
        assert rc == 0
        restored = read_hsr(out)
        assert restored.shape == cube.shape
        assert restored.sensor_id == "lab"

    def test_blind_without_estimator_fails_cleanly(self, trained, capsys):
        cube = make_cube(bands=4, height=20, width=20, seed=61, sensor_id="lab")
        src = trained / "noisy.hsr"
        write_hsr(src, cube)
        rc = main(["denoise", "--ckpt", str(trained / "model.ckpt"), "--in", str(src),
                   "--out", str(trained / "x.hsr"), "--blind"])
        assert rc == 2
        assert "estimator" in capsys.readouterr().err

    def test_eval_identity(self, trained, capsys):
        cube = make_cube(bands=4, height=16, width=16, seed=62)
        a = trained / "a.hsr"
        write_hsr(a, cube)
        report = trained / "report.txt"
        rc = main(["eval", "--ref", str(a), "--test", str(a), "--out", str(report)])
        assert rc == 0
        text = report.read_text()
        parsed = dict(
            line.split("\t") for line in text.splitlines() if "\t" in line and not line.startswith("#")
        )
        assert parsed["mpsnr_db"] == "inf"
        assert float(parsed["mssim"]) == pytest.approx(1.0, abs=1e-9)
        assert float(parsed["ergas"]) == 0.0
        assert float(parsed["msam_deg"]) == pytest.approx(0.0, abs=1e-4)
        assert "hsdenoise" in text  # version/provenance header

    def test_eval_shape_mismatch(self, trained):
        a, b = trained / "a.hsr", trained / "b.hsr"
        write_hsr(a, make_cube(bands=4, height=16, width=16, seed=63))
        write_hsr(b, make_cube(bands=4, height=16, width=14, seed=64))
        rc = main(["eval", "--ref", str(a), "--test", str(b), "--out", str(trained / "r.txt")])
        assert rc == 2

    def test_full_pipeline_composition(self, trained, capsys):
        clean = make_cube(bands=4, height=24, width=24, seed=65, sensor_id="lab")
        clean_path = trained / "clean.hsr"
        write_hsr(clean_path, clean)
        noisy_path = trained / "noisy2.hsr"
        assert main(["simulate", "--in", str(clean_path), "--noise", "iid_gaussian", "--sigma", "25",
                     "--seed", "11", "--out", str(noisy_path)]) == 0
        restored_path = trained / "restored2.hsr"
        assert main(["denoise", "--ckpt", str(trained / "model.ckpt"), "--in", str(noisy_path),
                     "--out", str(restored_path)]) == 0
        report = trained / "report2.txt"
        assert main(["eval", "--ref", str(clean_path), "--test", str(restored_path),
                     "--out", str(report)]) == 0
        assert report.exists()


class TestImport:
    def test_bsq_to_hsr(self, tmp_path):
        values = (np.arange(12, dtype=np.uint16) * 3).reshape(2, 2, 3)
        (tmp_path / "img.hdr").write_text(
            "samples = 3\nlines = 2\nbands = 2\ndata type = 12\nbyte order = 0\ninterleave = bsq\n"
        )
        (tmp_path / "img.raw").write_bytes(values.tobytes())
        out = tmp_path / "img.hsr"
        rc = main(["import", "--header", str(tmp_path / "img.hdr"), "--data", str(tmp_path / "img.raw"),
                   "--out", str(out), "--sensor", "field"])
        assert rc == 0
        cube = read_hsr(out)
        np.testing.assert_array_equal(cube.data, values.astype(np.float32))
        assert cube.sensor_id == "field"

    def test_unsupported_interleave_is_io_error(self, tmp_path):
        (tmp_path / "img.hdr").write_text(
            "samples = 1\nlines = 1\nbands = 1\ndata type = 12\ninterleave = bip\n"
        )
        (tmp_path / "img.raw").write_bytes(b"\x00\x00")
        rc = main(["import", "--header", str(tmp_path / "img.hdr"), "--data", str(tmp_path / "img.raw"),
                   "--out", str(tmp_path / "x.hsr")])
        assert rc == 3


class TestInfo:
    def test_cube_info(self, tmp_path, capsys):
        path = tmp_path / "cube.hsr"
        write_hsr(path, make_cube(bands=3, height=9, width=7, seed=70, sensor_id="probe"))
        rc = main(["info", "--in", str(path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "3 bands x 9 x 7" in out
        assert "probe" in out

    def test_checkpoint_info_ratio(self, tmp_path, capsys):
        write_train_set(tmp_path)
        cfg = write_config(tmp_path, steps=1)
        assert main(["train", "--config", str(cfg)]) == 0
        capsys.readouterr()  # drop training output
        rc = main(["info", "--ckpt", str(tmp_path / "model.ckpt")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "params[shared]" in out
        ratio_line = [l for l in out.splitlines() if " ratio: " in l][0]
        # one decimal place
        value = ratio_line.split()[-1]
        assert value.endswith("x") and "." in value

    def test_corrupt_file_clean_error(self, tmp_path):
        bad = tmp_path / "bad.hsr"
        bad.write_bytes(b"garbage")
        assert main(["info", "--in", str(bad)]) == 3
