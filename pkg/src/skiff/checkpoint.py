"""Checkpoint and model directory serialization.

Weight files are a flat little-endian container: the 4-byte magic "SKP1",
then one record per parameter holding the name (u32 byte length + UTF-8),
the rank (u32), the extents (u32 each) and the float32 values in C order.
The file ends after the last record.

The quantized variant inserts one dtype byte after the extents: 0 means
float32 values follow as above, 1 means int8 values followed by one
float32 scale per output row. Quantized files live under a separate name
(params.int8.bin) next to the float32 weights.

Model directories bundle a key=value config file, the weight file and one
vocabulary JSON per stream.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import (Model, ModelConfig, ModelParams, SourceFactorSpec,
                    TargetFactorSpec, _NAME_RE)
from .vocab import Vocabulary

MAGIC = b"SKP1"
DTYPE_F32 = 0
DTYPE_I8 = 1

PARAMS_FILE = "params.bin"
QUANT_PARAMS_FILE = "params.int8.bin"
CONFIG_FILE = "config"
METRICS_FILE = "metrics"

_MAX_RANK = 8


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_header(name: str, shape: tuple[int, ...]) -> bytes:
    if not _NAME_RE.match(name):
        raise ConfigError(f"bad parameter name {name!r}")
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", len(shape))]
    parts.extend(struct.pack("<I", n) for n in shape)
    return b"".join(parts)


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        parts.append(_encode_header(name, arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    _atomic_write(path, b"".join(parts))


def write_quantized_checkpoint(path: str | Path, entries: dict) -> None:
    """entries maps name to either a float32 array or an (int8 values,
    float32 row scales) pair."""
    path = Path(path)
    parts = [MAGIC]
    for name, entry in entries.items():
        if isinstance(entry, tuple):
            values, scales = entry
            values = np.ascontiguousarray(values, dtype=np.int8)
            scales = np.ascontiguousarray(scales, dtype=np.float32)
            if values.ndim != 2 or scales.shape != (values.shape[0],):
                raise ConfigError(
                    f"{name}: int8 entries need 2-d values and one scale per row")
            parts.append(_encode_header(name, values.shape))
            parts.append(struct.pack("<B", DTYPE_I8))
            parts.append(values.tobytes())
            parts.append(scales.astype("<f4", copy=False).tobytes())
        else:
            arr = np.ascontiguousarray(entry, dtype=np.float32)
            parts.append(_encode_header(name, arr.shape))
            parts.append(struct.pack("<B", DTYPE_F32))
            parts.append(arr.astype("<f4", copy=False).tobytes())
    _atomic_write(path, b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    @property
    def done(self) -> bool:
        return self.off == len(self.buf)


def _read_header(cur: _Cursor) -> tuple[str, tuple[int, ...]]:
    name = cur.take(cur.u32()).decode("utf-8")
    if not _NAME_RE.match(name):
        raise DataError(f"{cur.path}: bad parameter name {name!r}")
    rank = cur.u32()
    if rank > _MAX_RANK:
        raise DataError(f"{cur.path}: parameter {name} has implausible rank {rank}")
    shape = tuple(cur.u32() for _ in range(rank))
    return name, shape


def _open(path: str | Path) -> _Cursor:
    path = Path(path)
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    cur = _Cursor(buf, path)
    cur.off = 4
    return cur


def _f32_values(cur: _Cursor, name: str, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(shape)
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise DataError(f"{cur.path}: parameter {name} holds non-finite values")
    return arr


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    cur = _open(path)
    out: dict[str, np.ndarray] = {}
    while not cur.done:
        name, shape = _read_header(cur)
        if name in out:
            raise DataError(f"{cur.path}: duplicate parameter {name}")
        out[name] = _f32_values(cur, name, shape)
    return out


def read_quantized_checkpoint(path: str | Path) -> dict:
    cur = _open(path)
    out: dict = {}
    while not cur.done:
        name, shape = _read_header(cur)
        if name in out:
            raise DataError(f"{cur.path}: duplicate parameter {name}")
        dtype = cur.u8()
        if dtype == DTYPE_F32:
            out[name] = _f32_values(cur, name, shape)
        elif dtype == DTYPE_I8:
            if len(shape) != 2:
                raise DataError(f"{cur.path}: int8 parameter {name} must be 2-d")
            count = shape[0] * shape[1]
            values = np.frombuffer(cur.take(count), dtype=np.int8).reshape(shape).copy()
            scales = np.frombuffer(cur.take(4 * shape[0]), dtype="<f4").astype(np.float32)
            if not np.isfinite(scales).all():
                raise DataError(f"{cur.path}: parameter {name} holds non-finite scales")
            out[name] = (values, scales)
        else:
            raise DataError(f"{cur.path}: unknown dtype byte {dtype} for {name}")
    return out


# ------------------------------------------------------------------ config

_CONFIG_KEYS = ["src_vocab_size", "trg_vocab_size", "d_model", "heads", "ff_dim",
                "encoder_layers", "decoder_layers", "decoder_kind",
                "source_factor_specs", "target_factor_specs", "nvs_enabled",
                "max_seq_len"]


def format_config(config: ModelConfig) -> str:
    src_specs = ",".join(f"{s.vocab_size}:{s.dim}:{s.combine}"
                         for s in config.source_factor_specs)
    trg_specs = ",".join(str(s.vocab_size) for s in config.target_factor_specs)
    values = {
        "src_vocab_size": config.src_vocab_size,
        "trg_vocab_size": config.trg_vocab_size,
        "d_model": config.d_model,
        "heads": config.heads,
        "ff_dim": config.ff_dim,
        "encoder_layers": config.encoder_layers,
        "decoder_layers": config.decoder_layers,
        "decoder_kind": config.decoder_kind,
        "source_factor_specs": src_specs,
        "target_factor_specs": trg_specs,
        "nvs_enabled": "true" if config.nvs_enabled else "false",
        "max_seq_len": config.max_seq_len,
    }
    return "".join(f"{k} = {values[k]}\n" for k in _CONFIG_KEYS)


def write_config(path: str | Path, config: ModelConfig) -> None:
    _atomic_write(Path(path), format_config(config).encode("utf-8"))


def parse_config(text: str, origin: str = "config") -> ModelConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise DataError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise DataError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in values]
    if missing:
        raise DataError(f"{origin}: missing keys {missing}")

    def intval(key: str) -> int:
        try:
            return int(values[key])
        except ValueError:
            raise DataError(f"{origin}: key {key} is not an integer") from None

    src_specs = []
    if values["source_factor_specs"]:
        for item in values["source_factor_specs"].split(","):
            fields = item.split(":")
            if len(fields) != 3 or fields[2] not in ("sum", "concat"):
                raise DataError(f"{origin}: bad source factor spec {item!r}")
            src_specs.append(SourceFactorSpec(int(fields[0]), int(fields[1]), fields[2]))
    trg_specs = []
    if values["target_factor_specs"]:
        trg_specs = [TargetFactorSpec(int(v)) for v in values["target_factor_specs"].split(",")]
    if values["nvs_enabled"] not in ("true", "false"):
        raise DataError(f"{origin}: nvs_enabled must be true or false")
    config = ModelConfig(
        src_vocab_size=intval("src_vocab_size"),
        trg_vocab_size=intval("trg_vocab_size"),
        d_model=intval("d_model"),
        heads=intval("heads"),
        ff_dim=intval("ff_dim"),
        encoder_layers=intval("encoder_layers"),
        decoder_layers=intval("decoder_layers"),
        decoder_kind=values["decoder_kind"],
        source_factor_specs=src_specs,
        target_factor_specs=trg_specs,
        nvs_enabled=values["nvs_enabled"] == "true",
        max_seq_len=intval("max_seq_len"),
    )
    config.validate()
    return config


def read_config(path: str | Path) -> ModelConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), origin=str(path))


# ----------------------------------------------------------------- metrics

def append_metric(path: str | Path, update: int, val_loss: float) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(f"{update}\t{val_loss:.6f}\n")


def read_metrics(path: str | Path) -> list[tuple[int, float]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataError(f"{path}:{lineno}: expected 'update<TAB>loss'")
            out.append((int(fields[0]), float(fields[1])))
    return out


# --------------------------------------------------------------- model dir

@dataclass
class ModelDir:
    model: Model
    src_vocab: Vocabulary
    trg_vocab: Vocabulary
    src_factor_vocabs: list[Vocabulary]
    trg_factor_vocabs: list[Vocabulary]
    path: Path


def save_model_dir(path: str | Path, model: Model, src_vocab: Vocabulary,
                   trg_vocab: Vocabulary,
                   src_factor_vocabs: list[Vocabulary] | None = None,
                   trg_factor_vocabs: list[Vocabulary] | None = None,
                   params_file: str = PARAMS_FILE) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_config(path / CONFIG_FILE, model.config)
    write_checkpoint(path / params_file, {n: t.data for n, t in model.params.items()})
    src_vocab.save(path / "vocab.src.json")
    trg_vocab.save(path / "vocab.trg.json")
    for i, v in enumerate(src_factor_vocabs or []):
        v.save(path / f"vocab.src.factor{i}.json")
    for i, v in enumerate(trg_factor_vocabs or []):
        v.save(path / f"vocab.trg.factor{i}.json")


def load_model_dir(path: str | Path, params_file: str | None = None) -> ModelDir:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a model directory")
    config = read_config(path / CONFIG_FILE)
    if params_file is None:
        params_file = PARAMS_FILE
    arrays = read_checkpoint(path / params_file)
    params = ModelParams()
    for name, arr in arrays.items():
        params.add(name, arr)
    model = Model(config, params=params)
    src_vocab = Vocabulary.load(path / "vocab.src.json")
    trg_vocab = Vocabulary.load(path / "vocab.trg.json")
    src_factors = [Vocabulary.load(path / f"vocab.src.factor{i}.json")
                   for i in range(len(config.source_factor_specs))]
    trg_factors = [Vocabulary.load(path / f"vocab.trg.factor{i}.json")
                   for i in range(len(config.target_factor_specs))]
    if len(src_vocab) != config.src_vocab_size or len(trg_vocab) != config.trg_vocab_size:
        raise DataError(f"{path}: vocabulary sizes disagree with the config")
    return ModelDir(model, src_vocab, trg_vocab, src_factors, trg_factors, path)
