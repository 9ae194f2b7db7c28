import subprocess
import sys

import numpy as np
import pytest

from scrnet.cli import boundary, main, overlay, read_config
from scrnet.data import decode_netpbm, encode_netpbm, load_dataset

TINY = ["--synth", "4", "--size", "32", "--depth", "2", "--widths", "8,16", "--batch", "2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--synth", "8", "--size", "64", "--depth", "3", "--widths", "8,16,32", "--epochs", "3",
            "--seed", "7", "--out", str(out)]
    assert main(argv) == 0
    return out


def model_flags(out):
    return ["--config", str(out / "resolved_config.txt"), "--checkpoint", str(out / "best.ckpt")]


class TestTrain:
    def test_smoke_outputs(self, trained):
        lines = (trained / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,val_dsc,val_miou,val_iou_fg,val_precision,val_recall"
        assert len(lines) == 4
        for name in ("best.ckpt", "last.ckpt", "resolved_config.txt"):
            assert (trained / name).exists()

    def test_resolved_config_records_recipe(self, trained):
        cfg = read_config(trained / "resolved_config.txt")
        assert cfg["command"] == "train" and cfg["widths"] == "8,16,32" and cfg["ablate_fam"] == "false"

    def test_paper_defaults(self, tmp_path):
        assert main(["train", *TINY, "--epochs", "1", "--out", str(tmp_path)]) == 0
        cfg = read_config(tmp_path / "resolved_config.txt")
        assert (cfg["lr"], cfg["weight_decay"], cfg["batch"]) == ("0.0001", "0.0005", "2")
        parsed = __import__("scrnet.cli", fromlist=["parse_args"]).parse_args(["train", "--synth", "1", "--out", "x"])
        assert (parsed.epochs, parsed.batch, parsed.lr, parsed.weight_decay, parsed.size) == (100, 8, 1e-4, 5e-4,
                                                                                                (256, 256))

    def test_no_fam_recorded(self, tmp_path):
        assert main(["train", *TINY, "--epochs", "1", "--no-fam", "--out", str(tmp_path)]) == 0
        assert read_config(tmp_path / "resolved_config.txt")["ablate_fam"] == "true"

    def test_rerun_byte_identical(self, tmp_path):
        for k in ("a", "b"):
            assert main(["train", *TINY, "--epochs", "2", "--seed", "3", "--out", str(tmp_path / k)]) == 0
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_config_alone_reproduces(self, tmp_path):
        assert main(["train", *TINY, "--epochs", "2", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", str(tmp_path / "a" / "resolved_config.txt"), "--out",
                     str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()

    def test_progress_lines(self, tmp_path, capsys):
        main(["train", *TINY, "--epochs", "2", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert out.count("epoch=") == 2

    def test_runtime_failure_names_stage(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
        assert "error: data:" in capsys.readouterr().err

    def test_bad_model_config_exit_1(self, tmp_path, capsys):
        assert main(["train", *TINY, "--widths", "8,10", "--out", str(tmp_path)]) == 1
        assert "error: config:" in capsys.readouterr().err


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [[], ["train"], ["fly"], ["train", "--synth", "2", "--widths", "a,b", "--out", "x"],
                                      ["train", "--synth", "2", "--data", "d", "--out", "x"]])
    def test_exit_2(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "scrnet", "synth"], capture_output=True, text=True)
        assert res.returncode == 2 and "usage" in res.stderr


class TestEval:
    def test_metrics_and_determinism(self, trained, tmp_path, capsys):
        for k in ("a", "b"):
            assert main(["eval", "--synth", "8", "--size", "64", *model_flags(trained), "--out",
                         str(tmp_path / k)]) == 0
        a = (tmp_path / "a" / "metrics.csv").read_text()
        assert a == (tmp_path / "b" / "metrics.csv").read_text()
        lines = a.splitlines()
        assert lines[0].startswith("id,dsc,miou") and len(lines) == 10 and lines[-1].startswith("mean,")
        assert "dsc=" in capsys.readouterr().out

    def test_checkpoint_mismatch(self, trained, tmp_path, capsys):
        argv = ["eval", "--synth", "2", "--size", "64", *model_flags(trained), "--no-fam", "--out", str(tmp_path)]
        assert main(argv) == 1
        assert "error: checkpoint:" in capsys.readouterr().err

    def test_empty_dataset(self, trained, tmp_path, capsys):
        (tmp_path / "d" / "images").mkdir(parents=True)
        (tmp_path / "d" / "masks").mkdir()
        argv = ["eval", "--data", str(tmp_path / "d"), *model_flags(trained), "--out", str(tmp_path / "o")]
        assert main(argv) == 1
        assert "no samples" in capsys.readouterr().err


class TestPredict:
    def test_outputs(self, trained, tmp_path):
        assert main(["synth", "--n", "2", "--size", "40x48", "--out", str(tmp_path / "d")]) == 0
        inputs = sorted(str(p) for p in (tmp_path / "d" / "images").iterdir())
        argv = ["predict", *inputs, "--size", "64", *model_flags(trained), "--out", str(tmp_path / "p")]
        assert main(argv) == 0
        for path in inputs:
            stem = path.rsplit("/", 1)[1][:-4]
            mask = decode_netpbm((tmp_path / "p" / f"{stem}_mask.pgm").read_bytes())
            assert mask.shape == (40, 48) and set(np.unique(mask)) <= {0, 255}
            src = decode_netpbm((tmp_path / "d" / "images" / f"{stem}.ppm").read_bytes())
            ov = decode_netpbm((tmp_path / "p" / f"{stem}_overlay.ppm").read_bytes())
            changed = np.any(ov != src, axis=2)
            assert not (changed & ~boundary(mask > 0)).any()
        first = (tmp_path / "p" / f"{stem}_mask.pgm").read_bytes()
        assert main(argv) == 0 and (tmp_path / "p" / f"{stem}_mask.pgm").read_bytes() == first

    def test_bad_input_continues(self, trained, tmp_path, capsys):
        good = tmp_path / "good.ppm"
        good.write_bytes(encode_netpbm(np.full((32, 32, 3), 128, dtype=np.uint8)))
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"nonsense")
        argv = ["predict", str(bad), str(good), "--size", "32", *model_flags(trained), "--out", str(tmp_path / "p")]
        assert main(argv) == 1
        assert (tmp_path / "p" / "good_mask.pgm").exists()
        assert "bad.ppm" in capsys.readouterr().err

    def test_boundary_and_overlay(self):
        m = np.zeros((5, 5))
        m[1:4, 1:4] = 1
        b = boundary(m)
        assert b.sum() == 8 and not b[2, 2]
        img = np.full((3, 5, 5), 0.5)
        ov = overlay(img, m)
        assert np.array_equal(ov[:, b], np.repeat([[1.0], [0.0], [0.0]], 8, axis=1))
        assert np.array_equal(ov[:, ~b], img[:, ~b])


class TestGradcheck:
    def test_only_softmax(self, capsys):
        assert main(["gradcheck", "--only", "softmax"]) == 0
        out = capsys.readouterr().out
        assert "softmax" in out and "all 1 checks passed" in out

    def test_forced_failure(self, capsys):
        assert main(["gradcheck", "--only", "sigmoid,gelu", "--tol", "1e-12"]) == 1
        assert "FAILED: sigmoid, gelu" in capsys.readouterr().out

    def test_list(self, capsys):
        assert main(["gradcheck", "--list"]) == 0
        out = capsys.readouterr().out
        for name in ("spatial_gate", "channel_refinement", "ccapm", "fusion_block", "fam", "scrnet_depth2"):
            assert name in out

    def test_unknown_check(self, capsys):
        assert main(["gradcheck", "--only", "nope"]) == 1


class TestSynth:
    def test_writes_loadable_pairs(self, tmp_path):
        assert main(["synth", "--n", "16", "--size", "64", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
        assert len(list((tmp_path / "a" / "images").iterdir())) == 16
        assert len(load_dataset(tmp_path / "a", resize_to=None)) == 16
        assert main(["synth", "--n", "16", "--size", "64", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
        for p in sorted((tmp_path / "a").rglob("*.p?m")):
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--n", "1", "--size", "32", "--out", str(blocker / "sub")]) == 1
        assert "error: output:" in capsys.readouterr().err
