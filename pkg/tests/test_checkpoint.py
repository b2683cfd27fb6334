"""Serialization round-trips and corruption handling."""

import numpy as np
import pytest

from skiff.checkpoint import (append_metric, format_config, load_model_dir,
                              parse_config, read_checkpoint, read_config,
                              read_metrics, read_quantized_checkpoint,
                              save_model_dir, write_checkpoint, write_config,
                              write_quantized_checkpoint)
from skiff.errors import DataError
from skiff.model import Model, ModelConfig, SourceFactorSpec, TargetFactorSpec
from skiff.vocab import SPECIALS, Vocabulary


def _arrays():
    rng = np.random.default_rng(2)
    return {
        "embed.src.surface": rng.normal(size=(5, 3)).astype(np.float32),
        "encoder.layer0.ffn.w1": rng.normal(size=(4, 3)).astype(np.float32),
        "decoder.final_norm.gain": np.ones(3, dtype=np.float32),
    }


class TestCheckpointFile:
    def test_round_trip_values(self, tmp_path):
        path = tmp_path / "params.bin"
        arrays = _arrays()
        write_checkpoint(path, arrays)
        loaded = read_checkpoint(path)
        assert list(loaded) == list(arrays)
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_checkpoint(a, _arrays())
        write_checkpoint(b, read_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "params.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError):
            read_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "params.bin"
        write_checkpoint(path, _arrays())
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DataError):
            read_checkpoint(path)

    def test_non_finite_values_rejected(self, tmp_path):
        path = tmp_path / "params.bin"
        arr = np.array([1.0, np.nan], dtype=np.float32)
        # Writer accepts anything; the loader is the integrity gate.
        write_checkpoint(path, {"a.b": arr})
        with pytest.raises(DataError):
            read_checkpoint(path)

    def test_bad_name_in_file(self, tmp_path):
        path = tmp_path / "params.bin"
        name = b"Bad.Name"
        payload = b"SKP1" + len(name).to_bytes(4, "little") + name
        payload += (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        payload += np.zeros(1, dtype="<f4").tobytes()
        path.write_bytes(payload)
        with pytest.raises(DataError):
            read_checkpoint(path)


class TestQuantizedCheckpointFile:
    def test_mixed_entries_round_trip(self, tmp_path):
        path = tmp_path / "params.int8.bin"
        rng = np.random.default_rng(3)
        q = rng.integers(-127, 128, size=(4, 6)).astype(np.int8)
        scales = rng.uniform(0.01, 0.2, size=4).astype(np.float32)
        fp = rng.normal(size=(2, 3)).astype(np.float32)
        write_quantized_checkpoint(path, {"ffn.w1": (q, scales), "norm.gain": fp})
        loaded = read_quantized_checkpoint(path)
        np.testing.assert_array_equal(loaded["ffn.w1"][0], q)
        np.testing.assert_array_equal(loaded["ffn.w1"][1], scales)
        np.testing.assert_array_equal(loaded["norm.gain"], fp)

    def test_rewrite_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        q = np.arange(-6, 6, dtype=np.int8).reshape(3, 4)
        scales = np.array([0.1, 0.2, 0.3], dtype=np.float32)
        write_quantized_checkpoint(a, {"w": (q, scales)})
        write_quantized_checkpoint(b, read_quantized_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_dtype_byte(self, tmp_path):
        path = tmp_path / "x.bin"
        name = b"w"
        payload = b"SKP1" + len(name).to_bytes(4, "little") + name
        payload += (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes([7])
        path.write_bytes(payload)
        with pytest.raises(DataError):
            read_quantized_checkpoint(path)


class TestConfigFile:
    def _config(self):
        return ModelConfig(
            src_vocab_size=30, trg_vocab_size=40, d_model=24, heads=4, ff_dim=48,
            encoder_layers=3, decoder_layers=1, decoder_kind="ssru",
            source_factor_specs=[SourceFactorSpec(8, 8, "concat"),
                                 SourceFactorSpec(9, 24, "sum")],
            target_factor_specs=[TargetFactorSpec(7)],
            nvs_enabled=True, max_seq_len=64)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "config"
        cfg = self._config()
        write_config(path, cfg)
        assert read_config(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(DataError):
            parse_config(format_config(self._config()) + "dropout = 0.1\n")

    def test_missing_key(self):
        text = "\n".join(format_config(self._config()).splitlines()[:-1])
        with pytest.raises(DataError):
            parse_config(text)

    def test_duplicate_key(self):
        with pytest.raises(DataError):
            parse_config(format_config(self._config()) + "d_model = 24\n")

    def test_bad_bool(self):
        text = format_config(self._config()).replace("nvs_enabled = true",
                                                     "nvs_enabled = yes")
        with pytest.raises(DataError):
            parse_config(text)


class TestMetrics:
    def test_append_and_read(self, tmp_path):
        path = tmp_path / "metrics"
        append_metric(path, 500, 3.25)
        append_metric(path, 1000, 2.5)
        assert read_metrics(path) == [(500, 3.25), (1000, 2.5)]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "metrics"
        path.write_text("500 3.25\n")
        with pytest.raises(DataError):
            read_metrics(path)


class TestModelDir:
    def test_save_and_load(self, tmp_path):
        cfg = ModelConfig(src_vocab_size=6, trg_vocab_size=7, d_model=8, heads=2,
                          ff_dim=16, encoder_layers=1, decoder_layers=1, max_seq_len=16)
        model = Model(cfg, seed=4)
        src_vocab = Vocabulary(SPECIALS + ["a", "b"])
        trg_vocab = Vocabulary(SPECIALS + ["x", "y", "z"])
        save_model_dir(tmp_path / "m", model, src_vocab, trg_vocab)
        loaded = load_model_dir(tmp_path / "m")
        assert loaded.model.config == cfg
        for name, t in model.params.items():
            np.testing.assert_array_equal(loaded.model.params[name].data, t.data)
        assert loaded.src_vocab.tokens == src_vocab.tokens
        assert loaded.trg_vocab.tokens == trg_vocab.tokens

    def test_vocab_size_mismatch_detected(self, tmp_path):
        cfg = ModelConfig(src_vocab_size=6, trg_vocab_size=7, d_model=8, heads=2,
                          ff_dim=16, encoder_layers=1, decoder_layers=1, max_seq_len=16)
        model = Model(cfg, seed=4)
        save_model_dir(tmp_path / "m", model, Vocabulary(SPECIALS + ["a", "b"]),
                       Vocabulary(SPECIALS + ["x"]))
        with pytest.raises(DataError):
            load_model_dir(tmp_path / "m")

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            load_model_dir(tmp_path / "absent")
