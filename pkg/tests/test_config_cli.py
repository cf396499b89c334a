from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from depthcomp.cli import main
from depthcomp.config import DataConfig, RunConfig
from depthcomp.errors import ConfigError
from depthcomp.imaging import DepthMap, ImageRgba, load_image, save_depth, save_image
from depthcomp.trainer.loop import read_curves

TINY_YAML = """\
train:
  max_steps: 4
  epochs: 10
  seed: 0
generator:
  image_size: 16
  base_channels: 4
  depth_levels: 2
discriminator:
  channel_ladder: [4, 8]
stn:
  localization_channels: [4]
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(root), "--count", "10", "--seed", "1", "--size", "16"]) == 0
    return root


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.parse(TINY_YAML)
        assert RunConfig.parse(cfg.to_text()) == cfg
        assert cfg.train.generator.image_size == 16
        assert cfg.train.discriminator.channel_ladder == (4, 8)

    def test_defaults(self):
        assert RunConfig.parse("") == RunConfig()

    def test_exponent_strings(self):
        assert RunConfig.parse("train:\n  lr_g: 2e-4\n").train.lr_g == 2e-4

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lr_gen"):
            RunConfig.parse("train:\n  lr_gen: 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="optimizer"):
            RunConfig.parse("optimizer: {}\n")

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("train:\n  batch_size: two\n")
        with pytest.raises(ConfigError):
            RunConfig.parse("generator:\n  input_skip: 1\n")

    def test_validation_propagates(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("loss:\n  lambda_depth: -1\n")

    def test_overrides(self):
        cfg = RunConfig().with_overrides(seed=7, max_steps=None)
        assert cfg.train.seed == 7 and cfg.train.max_steps is None
        assert cfg.data == DataConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "nope.yaml")


class TestCli:
    def test_gen_data_deterministic(self, tmp_path):
        args = ["gen-data", "--count", "4", "--seed", "3", "--size", "16"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["threshold"] == 0.5 and len(manifest["samples"]) == 4

    def test_train_and_eval(self, dataset, tiny_yaml, tmp_path):
        assert main(["train", "--config", str(tiny_yaml), "--data", str(dataset), "--out", str(tmp_path / "r1")]) == 0
        assert main(["train", "--config", str(tiny_yaml), "--data", str(dataset), "--out", str(tmp_path / "r2")]) == 0
        assert tree_bytes(tmp_path / "r1") == tree_bytes(tmp_path / "r2")
        assert {"run.yaml", "checkpoint.dpgn", "curves.csv", "collapse.json"} <= set(tree_bytes(tmp_path / "r1"))
        assert len(read_curves(tmp_path / "r1" / "curves.csv")) == 4

        for name in ("e1.csv", "e2.csv"):
            code = main(["eval", "--config", str(tiny_yaml), "--data", str(dataset),
                         "--checkpoint", str(tmp_path / "r1" / "checkpoint.dpgn"), "--report", str(tmp_path / name)])
            assert code == 0
        assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
        rows = list(csv.DictReader(open(tmp_path / "e1.csv")))
        assert rows[-1]["sample_id"] == "mean" and len(rows) == 2

    def test_resume_matches_unbroken(self, dataset, tiny_yaml, tmp_path):
        text = TINY_YAML.replace("seed: 0", "seed: 0\n  checkpoint_every: 2")
        tiny_yaml.write_text(text)
        assert main(["train", "--config", str(tiny_yaml), "--data", str(dataset), "--out", str(tmp_path / "full")]) == 0
        ck = tmp_path / "full" / "checkpoint_step000002.dpgn"
        assert main(["train", "--config", str(tiny_yaml), "--data", str(dataset), "--out", str(tmp_path / "rest"),
                     "--resume", str(ck)]) == 0
        full = read_curves(tmp_path / "full" / "curves.csv")
        rest = read_curves(tmp_path / "rest" / "curves.csv")
        assert rest == full[2:]
        assert (tmp_path / "full" / "checkpoint.dpgn").read_bytes() == (tmp_path / "rest" / "checkpoint.dpgn").read_bytes()

    def test_eval_baselines(self, dataset, tmp_path):
        assert main(["eval", "--data", str(dataset), "--baseline", "gt", "--report", str(tmp_path / "gt.csv")]) == 0
        mean = list(csv.DictReader(open(tmp_path / "gt.csv")))[-1]
        assert float(mean["mae"]) == 0.0 and float(mean["psnr"]) == 100.0
        assert main(["eval", "--data", str(dataset), "--baseline", "classical", "--report", str(tmp_path / "c.csv")]) == 0
        assert float(list(csv.DictReader(open(tmp_path / "c.csv")))[-1]["mae"]) == 0.0

    def test_composite(self, tmp_path):
        rng = np.random.default_rng(0)
        save_image(ImageRgba.filled(8, 8, [1, 0, 0, 1]), tmp_path / "fg.png")
        save_image(ImageRgba(np.concatenate([rng.uniform(size=(8, 8, 3)), np.ones((8, 8, 1))], -1)), tmp_path / "bg.png")
        depth = np.zeros((8, 8))
        depth[:, :4] = 0.9
        save_depth(DepthMap(depth), tmp_path / "d.png")
        code = main(["composite", "--fg", str(tmp_path / "fg.png"), "--bg", str(tmp_path / "bg.png"),
                     "--depth", str(tmp_path / "d.png"), "--fg-depth", "0.5", "--out", str(tmp_path / "o.png"),
                     "--mask-out", str(tmp_path / "m.png")])
        assert code == 0
        out = load_image(tmp_path / "o.png")
        bg = load_image(tmp_path / "bg.png")
        assert out.pixels[:, :4].tolist() == bg.pixels[:, :4].tolist()
        assert np.all(out.pixels[:, 4:, 0] == 1.0)

    def test_gradcheck_subset(self, tmp_path):
        code = main(["gradcheck", "--ops", "abs", "tanh", "--trials", "3", "--report", str(tmp_path / "g.csv")])
        assert code == 0
        assert (tmp_path / "g.csv").read_text().count("\n") == 3

    def test_pixelopt(self, dataset, tmp_path):
        code = main(["pixelopt", "--data", str(dataset), "--iterations", "20", "--out", str(tmp_path / "p.csv")])
        assert code == 0

    def test_experiments(self, dataset, tiny_yaml, tmp_path):
        base = ["--config", str(tiny_yaml), "--data", str(dataset), "--steps", "2"]
        assert main(["ablate", *base, "--out", str(tmp_path / "a.csv")]) == 0
        assert main(["sweep-lr", *base, "--grid", "2e-4:1e-4", "--out", str(tmp_path / "l.csv")]) == 0
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "mode,mae,psnr,ssim,masked_mae"
        assert (tmp_path / "l.csv").read_text().splitlines()[1].split(",")[3] == "no"

    @pytest.mark.parametrize("argv,code", [
        (["train", "--out", "x"], 2),
        (["eval", "--data", "/nonexistent", "--report", "r.csv"], 3),
        (["gen-data", "--out", "x", "--count", "0"], 2),
        (["gen-data", "--out", "x", "--splits", "1,2"], 2),
    ])
    def test_exit_codes(self, argv, code, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(argv) == code

    def test_bad_config_exit(self, dataset, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train:\n  nope: 1\n")
        assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2

    def test_checkpoint_mismatch_exit(self, dataset, tiny_yaml, tmp_path):
        assert main(["train", "--config", str(tiny_yaml), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 0
        other = tmp_path / "other.yaml"
        other.write_text(TINY_YAML.replace("channel_ladder: [4, 8]", "channel_ladder: [4, 8]\n  extra_block: true"))
        code = main(["eval", "--config", str(other), "--data", str(dataset),
                     "--checkpoint", str(tmp_path / "r" / "checkpoint.dpgn"), "--report", str(tmp_path / "e.csv")])
        assert code == 5

    def test_argparse_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 2
