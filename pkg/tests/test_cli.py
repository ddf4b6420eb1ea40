import shutil
import struct
from pathlib import Path

import numpy as np
import pytest

from riinterp.checkpoint import load_checkpoint, save_checkpoint
from riinterp.cli import EXIT_IO, EXIT_MALFORMED, EXIT_MODEL, EXIT_OK, EXIT_PHASE, EXIT_USAGE, main
from riinterp.dataset import read_velodyne_bin
from riinterp.projection import ProjectionConfig, RangeImage, project, read_rimg, write_rimg
from riinterp.trainer import TrainConfig, build_trainer

FIXTURE = Path(__file__).parent / "fixtures" / "kitti"
FRAMES = FIXTURE / "sequences" / "00" / "velodyne"


@pytest.fixture(scope="module")
def toy_ckpt(tmp_path_factory):
    p = tmp_path_factory.mktemp("ck") / "toy.rnck"
    save_checkpoint(p, build_trainer(TrainConfig(height=64, width=256, model_divisor=8)).checkpoint())
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


class TestProject:
    def test_fixture(self, tmp_path, capsys):
        out = tmp_path / "f.rimg"
        code, io = run(capsys, "project", FRAMES / "000000.bin", out)
        assert code == EXIT_OK
        expected = project(read_velodyne_bin(FRAMES / "000000.bin"), ProjectionConfig())
        assert f"valid pixels: {expected.valid_count}" in io.out
        ri = read_rimg(out)
        assert (ri.config.h, ri.config.w) == (64, 2048)

    def test_flags_and_config_overlay(self, tmp_path, capsys):
        conf = tmp_path / "c.txt"
        conf.write_text("height = 32\nwidth = 512  # comment\n")
        code, io = run(capsys, "project", "a", "b", "--config", conf, "--width", 256, "--show-config")
        assert code == EXIT_OK
        assert "height = 32" in io.out and "width = 256" in io.out

    def test_missing(self, tmp_path, capsys):
        assert run(capsys, "project", tmp_path / "none.bin", tmp_path / "o.rimg")[0] == EXIT_IO

    def test_malformed(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\0" * 10)
        assert run(capsys, "project", bad, tmp_path / "o.rimg")[0] == EXIT_MALFORMED

    def test_unknown_config_key(self, tmp_path, capsys):
        conf = tmp_path / "c.txt"
        conf.write_text("colour = red\n")
        assert run(capsys, "project", "a", "b", "--config", conf)[0] == EXIT_USAGE


class TestReconstruct:
    def test_round_trip_deterministic(self, tmp_path, capsys):
        rimg = tmp_path / "f.rimg"
        run(capsys, "project", FRAMES / "000000.bin", rimg)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert run(capsys, "reconstruct", rimg, a)[0] == EXIT_OK
        run(capsys, "reconstruct", rimg, b)
        assert a.read_bytes() == b.read_bytes()
        run(capsys, "project", a, tmp_path / "g.rimg")
        np.testing.assert_array_equal(read_rimg(rimg).valid, read_rimg(tmp_path / "g.rimg").valid)

    def test_empty_image(self, tmp_path, capsys):
        empty = tmp_path / "e.bin"
        empty.write_bytes(b"")
        assert run(capsys, "project", empty, tmp_path / "e.rimg")[0] == EXIT_MALFORMED
        write_rimg(tmp_path / "e.rimg", RangeImage(np.zeros((5, 4, 8), np.float32), ProjectionConfig(4, 8)))
        assert run(capsys, "reconstruct", tmp_path / "e.rimg", tmp_path / "o.bin")[0] == EXIT_MALFORMED

    def test_bad_magic(self, tmp_path, capsys):
        p = tmp_path / "x.rimg"
        p.write_bytes(b"NOPE" + b"\0" * 40)
        assert run(capsys, "reconstruct", p, tmp_path / "o.bin")[0] == EXIT_MALFORMED


class TestInterpolateEval:
    def test_pipeline(self, tmp_path, capsys, toy_ckpt):
        out = tmp_path / "mid.bin"
        code, io = run(capsys, "interpolate", FRAMES / "000000.bin", FRAMES / "000002.bin", out,
                       "--checkpoint", toy_ckpt)
        assert code == EXIT_OK and "inference time:" in io.out
        assert out.stat().st_size % 16 == 0 and out.stat().st_size > 0
        again = tmp_path / "again.bin"
        run(capsys, "interpolate", FRAMES / "000000.bin", FRAMES / "000002.bin", again, "--checkpoint", toy_ckpt)
        assert out.read_bytes() == again.read_bytes()
        code, io = run(capsys, "eval", out, FRAMES / "000001.bin")
        assert code == EXIT_OK and io.out.startswith("SNNRMSE: ")

    @pytest.mark.parametrize("t", ["-0.5", "1.01"])
    def test_t_range(self, tmp_path, capsys, toy_ckpt, t):
        code, _ = run(capsys, "interpolate", FRAMES / "000000.bin", FRAMES / "000002.bin", tmp_path / "o.bin",
                      "--checkpoint", toy_ckpt, f"--t={t}")
        assert code == EXIT_USAGE

    def test_shape_mismatch(self, tmp_path, capsys, toy_ckpt):
        ck = load_checkpoint(toy_ckpt)
        ck.meta["projection"] = {"h": 64, "w": 200}
        bad = tmp_path / "bad.rnck"
        save_checkpoint(bad, ck)
        code, _ = run(capsys, "interpolate", FRAMES / "000000.bin", FRAMES / "000002.bin", tmp_path / "o.bin",
                      "--checkpoint", bad)
        assert code == EXIT_MODEL

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.rnck"
        bad.write_bytes(b"garbage")
        code, _ = run(capsys, "interpolate", FRAMES / "000000.bin", FRAMES / "000002.bin", tmp_path / "o.bin",
                      "--checkpoint", bad)
        assert code == EXIT_MALFORMED

    def test_eval_identical_and_unit(self, tmp_path, capsys):
        code, io = run(capsys, "eval", FRAMES / "000000.bin", FRAMES / "000000.bin")
        assert code == EXIT_OK and io.out.strip() == "SNNRMSE: 0.0000 m"
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        a.write_bytes(struct.pack("<4f", 1, 0, 0, 0))
        b.write_bytes(struct.pack("<4f", 2, 0, 0, 0))
        assert run(capsys, "eval", a, b)[1].out.strip() == "SNNRMSE: 1.0000 m"

    def test_eval_empty(self, tmp_path, capsys):
        e = tmp_path / "e.bin"
        e.write_bytes(b"")
        assert run(capsys, "eval", e, FRAMES / "000000.bin")[0] == EXIT_MALFORMED


class TestTrainAndTriplets:
    def test_interp_without_flow(self, capsys):
        assert run(capsys, "train", "--phase", "interp", "--data-root", FIXTURE)[0] == EXIT_PHASE

    def test_show_config_phase_defaults(self, capsys):
        code, io = run(capsys, "train", "--phase", "finetune", "--show-config")
        assert code == EXIT_OK and "lr0 = 1e-05" in io.out and "plateau_patience = 5" in io.out

    def test_train_and_resume(self, tmp_path, capsys):
        out = tmp_path / "flow.rnck"
        args = ["train", "--phase", "flow", "--data-root", FIXTURE, "--epochs", 1, "--iters-per-epoch", 1,
                "--model-divisor", 8, "--out", out, "--log", tmp_path / "log.jsonl"]
        code, io = run(capsys, *args)
        assert code == EXIT_OK and "split: train=" in io.out and out.exists()
        code, _ = run(capsys, *args[:6], 2, *args[7:-4], "--out", tmp_path / "r.rnck", "--resume", out)
        assert code == EXIT_OK
        code, _ = run(capsys, "train", "--phase", "interp", "--data-root", FIXTURE, "--epochs", 1,
                      "--iters-per-epoch", 1, "--init", out, "--out", tmp_path / "i.rnck")
        assert code == EXIT_OK

    def test_make_triplets(self, tmp_path, capsys):
        root = tmp_path / "kitti"
        seq = root / "sequences" / "00" / "velodyne"
        seq.mkdir(parents=True)
        for k in range(7):
            shutil.copy(FRAMES / "000000.bin", seq / f"{k:06d}.bin")
        man = tmp_path / "m.txt"
        code, io = run(capsys, "make-triplets", "--data-root", root, "-o", man)
        assert code == EXIT_OK and len(man.read_text().splitlines()) == 2
        first = man.read_bytes()
        run(capsys, "make-triplets", "--data-root", root, "-o", man)
        assert man.read_bytes() == first

    def test_make_triplets_empty(self, tmp_path, capsys):
        (tmp_path / "sequences" / "00").mkdir(parents=True)
        assert run(capsys, "make-triplets", "--data-root", tmp_path, "-o", tmp_path / "m")[0] == EXIT_MALFORMED


class TestExportPgm:
    def test_export(self, tmp_path, capsys):
        rimg = tmp_path / "f.rimg"
        run(capsys, "project", FRAMES / "000000.bin", rimg, "--width", 256)
        pgm = tmp_path / "f.pgm"
        assert run(capsys, "export-pgm", rimg, pgm)[0] == EXIT_OK
        assert pgm.read_bytes().startswith(b"P5")

    def test_bad_input(self, tmp_path, capsys):
        p = tmp_path / "x.rimg"
        p.write_bytes(b"junk")
        assert run(capsys, "export-pgm", p, tmp_path / "o.pgm")[0] == EXIT_MALFORMED


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == EXIT_USAGE
