import struct

import numpy as np
import pytest

from cpnorm.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, thread_count
from cpnorm.config import ConfigError, RunConfig, build_config, parse_config_text
from cpnorm.nn import LayerSpec, build_model


def specs(normalization):
    return [
        LayerSpec("conv2d", "c1", in_channels=1, out_channels=3, kernel_size=3, normalization=normalization, rank=5),
        LayerSpec("relu", "r"),
        LayerSpec("flatten", "f"),
        LayerSpec("dropout", "d", keep_prob=0.5),
        LayerSpec("linear", "l", in_features=48, out_features=4, normalization=normalization, rank=3),
    ]


class TestCheckpoint:
    @pytest.mark.parametrize("normalization", ["none", "weight", "cp"])
    def test_round_trip(self, tmp_path, rng, normalization):
        m = build_model(specs(normalization), (1, 6, 6), seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, {"epoch": 2})
        loaded, meta = load_checkpoint(path)
        assert meta == {"epoch": 2}
        for (na, a), (nb, b) in zip(m.parameters(), loaded.parameters()):
            assert na == nb
            np.testing.assert_array_equal(a, b)
        x = rng.standard_normal((4, 1, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(m.forward(x), loaded.forward(x))
        assert loaded.current_specs() == m.current_specs()

    def test_identical_bytes(self, tmp_path):
        m = build_model(specs("cp"), (1, 6, 6), seed=3)
        save_checkpoint(tmp_path / "a", m, {"k": 1})
        save_checkpoint(tmp_path / "b", m, {"k": 1})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def _saved(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, build_model(specs("cp"), (1, 6, 6)), {})
        return path, path.read_bytes()

    def test_offsets_tile_payload(self, tmp_path):
        path, raw = self._saved(tmp_path)
        header, arrays = read_checkpoint(path)
        (hlen,) = struct.unpack("<Q", raw[8:16])
        assert sum(e["nbytes"] for e in header["tensors"]) == len(raw) - 16 - hlen
        assert set(arrays) == {e["name"] for e in header["tensors"]}

    def test_bad_magic(self, tmp_path):
        path, raw = self._saved(tmp_path)
        path.write_bytes(b"X" + raw[1:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path, raw = self._saved(tmp_path)
        path.write_bytes(raw + b"\0\0\0\0")
        with pytest.raises(CheckpointError, match="unaccounted"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path, raw = self._saved(tmp_path)
        path.write_bytes(raw[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path, raw = self._saved(tmp_path)
        path.write_bytes(raw.replace(b'"format_version": 1', b'"format_version": 9'))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_starts_with_magic(self, tmp_path):
        _, raw = self._saved(tmp_path)
        assert raw.startswith(MAGIC)

    def test_thread_count(self):
        assert thread_count() >= 1


class TestConfig:
    def test_grammar(self):
        text = "# run\narchitecture = alexnet\n\nlr = 0.01   # step\nrank.conv2 = 256\nsubset=0.5\n"
        d = parse_config_text(text)
        assert d == {"architecture": "alexnet", "lr": 0.01, "ranks": {"conv2": 256}, "subset": 0.5}

    @pytest.mark.parametrize("text, match", [
        ("colour = red", "unknown key"),
        ("lr", "key = value"),
        ("epochs = five", "epochs"),
        ("rank.conv1 = x", "integer"),
    ])
    def test_grammar_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config_text(text)

    def test_precedence(self):
        assert build_config().epochs == 50
        assert build_config({"architecture": "alexnet"}).epochs == 150
        cfg = build_config({"preset": "desk", "epochs": 7, "lr": 0.1}, {"lr": 0.2, "ranks": {"conv1": 4}})
        assert (cfg.epochs, cfg.subset, cfg.seeds, cfg.lr, cfg.ranks) == (7, 0.2, 3, 0.2, {"conv1": 4})
        assert build_config(None, {"preset": "desk"}).epochs == 5

    def test_ranks_merge(self):
        cfg = build_config({"ranks": {"conv1": 4, "fc1": 9}}, {"ranks": {"conv1": 5}})
        assert cfg.ranks == {"conv1": 5, "fc1": 9}

    @pytest.mark.parametrize("values", [
        {"normalization": "none", "ranks": {"conv1": 4}},
        {"lr": -1.0},
        {"epochs": 0},
        {"subset": 0.0},
        {"rate": 1.0},
        {"optimizer": "lbfgs"},
        {"dataset": "svhn"},
        {"preset": "huge"},
    ])
    def test_validation(self, values):
        with pytest.raises(ConfigError):
            build_config(values)

    def test_echo_round_trip(self):
        cfg = build_config({"architecture": "alexnet", "lr": 0.01, "ranks": {"conv1": 3}})
        back = build_config(parse_config_text("\n".join(cfg.to_lines())))
        assert back == cfg

    def test_default_dataset(self):
        assert RunConfig().resolved_dataset() == "mnist"
        assert RunConfig(architecture="alexnet").resolved_dataset() == "cifar10"
