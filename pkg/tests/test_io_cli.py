import math
import subprocess
import sys

import numpy as np
import pytest

from iifcn import cli
from iifcn.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from iifcn.config import RunConfig, parse_config, serialize_config
from iifcn.dataio import (
    DatasetError,
    ellipse_mask,
    load_dataset,
    read_png,
    save_dataset,
    synth_dataset,
    write_png,
)
from iifcn.errors import ConfigError, CorruptCheckpointError
from iifcn.model import ModelConfig, build_model
from iifcn.trainer import ScaleStage

TINY_CONFIG = """\
# tiny run for the CLI tests
model.num_blocks = 2
model.widths = 4, 4
model.head = 3:2
train.stages = 28x28@4:1
train.val_size = 2
train.validate_crf = false
crf.max_side = 16
"""


class TestDataset:
    def test_roundtrip_three_pairs(self, tmp_path):
        samples = synth_dataset(3, (20, 24), seed=1)
        save_dataset(samples, tmp_path)
        manifest, loaded = load_dataset(tmp_path)
        assert manifest.count == 3 == manifest.candidates
        for a, b in zip(samples, loaded):
            assert a.id == b.id
            assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)

    def test_png_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
        write_png(tmp_path / "x.png", x)
        assert np.array_equal(read_png(tmp_path / "x.png"), x)

    def test_all_offenders_listed(self, tmp_path):
        save_dataset(synth_dataset(4, 16, seed=2), tmp_path)
        m = read_png(tmp_path / "synth_00000_segmentation.png").copy()
        m[0, 0] = 128
        write_png(tmp_path / "synth_00000_segmentation.png", m)
        (tmp_path / "synth_00001_segmentation.png").unlink()
        write_png(tmp_path / "synth_00002_segmentation.png", np.zeros((8, 8), np.uint8))
        write_png(tmp_path / "stray_segmentation.png", np.zeros((16, 16), np.uint8))
        with pytest.raises(DatasetError) as info:
            load_dataset(tmp_path)
        text = "\n".join(info.value.problems)
        assert "synth_00000_segmentation.png" in text and "128" in text
        assert "synth_00001.png: missing mask" in text
        assert "synth_00002" in text and "differ in size" in text
        assert "stray_segmentation.png" in text
        assert len(info.value.problems) == 4

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DatasetError.__mro__[1]):
            load_dataset(tmp_path / "nope")


class TestSynth:
    def test_empty(self):
        assert synth_dataset(0, 32, seed=0) == []

    def test_masks_binary_nonempty_and_deterministic(self):
        a = synth_dataset(20, (40, 36), seed=3)
        b = synth_dataset(20, (40, 36), seed=3)
        for x, y in zip(a, b):
            assert set(np.unique(x.mask)) == {0, 255}
            assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)

    def test_ellipse_area(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = rng.uniform(10, 30, 2)
            m = ellipse_mask(100, 100, 50 + rng.random(), 50 + rng.random(), a, b, rng.uniform(0, np.pi))
            assert abs(m.sum() / (math.pi * a * b) - 1) <= 0.05


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = build_model(ModelConfig(2, (4, 8)), seed=5)
        save_checkpoint(model, tmp_path / "m.iifcn")
        back = load_checkpoint(tmp_path / "m.iifcn")
        assert back.config == model.config
        for k, p in model.params.items():
            assert np.array_equal(back.params[k].data, p.data)

    def test_truncated_and_flipped(self):
        buf = dumps(build_model(ModelConfig(1, (2,)), seed=0))
        assert buf.startswith(MAGIC)
        for bad in (buf[:len(buf) // 2], buf[:3], b"", buf[:-1] + bytes([buf[-1] ^ 1])):
            with pytest.raises(CorruptCheckpointError):
                loads(bad)
        corrupt = bytearray(buf)
        corrupt[len(buf) // 2] ^= 0xFF
        with pytest.raises(CorruptCheckpointError, match="checksum"):
            loads(bytes(corrupt))

    def test_mismatched_config_names_first(self):
        buf = dumps(build_model(ModelConfig(2, (4, 8)), seed=0))
        with pytest.raises(CorruptCheckpointError, match=r"enc0\.branch0\.0\.w"):
            loads(buf, expected=ModelConfig(2, (8, 8)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "absent.iifcn")


class TestConfig:
    def test_defaults_fixed_point(self):
        text = serialize_config(RunConfig())
        assert serialize_config(parse_config(text)) == text
        assert parse_config(text) == RunConfig()

    def test_custom_fixed_point(self):
        once = parse_config(TINY_CONFIG)
        assert once.model.widths == (4, 4) and once.train.stages == (ScaleStage(28, 28, 4, 1),)
        assert parse_config(serialize_config(once)) == once

    @pytest.mark.parametrize("text", ["model.depth = 3", "optim.lr = 1", "train.lr", "lr = 0.1",
                                      "model.num_blocks = three", "augment.p_zoom = 2"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(TINY_CONFIG)
    assert cli.main(["synth", "--n", "6", "--size", "28", "28", "--seed", "1", "--out", str(root / "data")]) == 0
    code = cli.main(["train", "--data", str(root / "data"), "--config", str(root / "cfg.txt"),
                     "--seed", "2", "--out", str(root / "run")])
    assert code == 0
    return root


class TestCli:
    def test_train_outputs(self, trained):
        run = trained / "run"
        assert (run / "final.iifcn").exists() and (run / "epochs.csv").exists()
        assert parse_config((run / "config.txt").read_text()).seed == 2

    def test_train_synthetic(self, tmp_path):
        (tmp_path / "cfg.txt").write_text(TINY_CONFIG)
        assert cli.main(["train", "--synthetic", "5", "--config", str(tmp_path / "cfg.txt"),
                         "--out", str(tmp_path / "run")]) == 0

    def test_infer(self, trained, tmp_path):
        img = trained / "data" / "synth_00000.png"
        ckpt = str(trained / "run" / "final.iifcn")
        assert cli.main(["infer", "--checkpoint", ckpt, "--image", str(img), "--out", str(tmp_path / "m.png"),
                         "--prob-out", str(tmp_path / "p.png")]) == 0
        mask = read_png(tmp_path / "m.png")
        assert mask.shape == (28, 28) and set(np.unique(mask)) <= {0, 255}
        assert read_png(tmp_path / "p.png").shape == (28, 28)
        assert cli.main(["infer", "--checkpoint", ckpt, "--image", str(img), "--crf",
                         "--out", str(tmp_path / "c.png")]) == 0

    def test_infer_odd_size(self, trained, tmp_path):
        write_png(tmp_path / "odd.png", np.full((23, 31, 3), 100, np.uint8))
        assert cli.main(["infer", "--checkpoint", str(trained / "run" / "final.iifcn"),
                         "--image", str(tmp_path / "odd.png"), "--out", str(tmp_path / "m.png")]) == 0
        assert read_png(tmp_path / "m.png").shape == (23, 31)

    def test_eval(self, trained, capsys):
        assert cli.main(["eval", "--checkpoint", str(trained / "run" / "final.iifcn"),
                         "--data", str(trained / "data")]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0].startswith("image_id,tp,fp,tn,fn") and len(out) == 7

    def test_refine(self, trained, tmp_path):
        img = trained / "data" / "synth_00001.png"
        gt = read_png(trained / "data" / "synth_00001_segmentation.png")
        write_png(tmp_path / "p.png", np.where(gt > 0, 200, 40).astype(np.uint8))
        assert cli.main(["refine", "--image", str(img), "--prob", str(tmp_path / "p.png"),
                         "--out", str(tmp_path / "r.png"), "--crf-iters", "3"]) == 0
        assert set(np.unique(read_png(tmp_path / "r.png"))) <= {0, 255}

    def test_exit_code_validation_errors(self, trained, tmp_path, capsys):
        assert cli.main(["infer", "--checkpoint", str(tmp_path / "none.iifcn"), "--image", "x.png",
                         "--out", str(tmp_path / "o.png")]) == 1
        (tmp_path / "bad.txt").write_text("model.colour = red\n")
        assert cli.main(["train", "--synthetic", "4", "--config", str(tmp_path / "bad.txt")]) == 1
        assert cli.main(["eval", "--checkpoint", str(trained / "run" / "final.iifcn"),
                         "--data", str(tmp_path / "nodata")]) == 1
        assert cli.main(["bogus"]) == 1
        assert "error" in capsys.readouterr().err

    def test_exit_code_internal(self, monkeypatch):
        def boom(args):
            raise RuntimeError("unexpected")
        monkeypatch.setattr(cli, "cmd_synth", boom)
        assert cli.main(["synth", "--n", "1", "--size", "8", "8", "--out", "unused"]) == 2

    def test_module_entry_and_threads(self, tmp_path):
        env = {"IIFCN_THREADS": "1", "PATH": "/usr/bin:/bin"}
        r = subprocess.run([sys.executable, "-m", "iifcn.cli", "synth", "--n", "2", "--size", "12", "12",
                            "--out", str(tmp_path / "d")], env=env, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        assert len(list((tmp_path / "d").glob("*.png"))) == 4
