"""Factored transformer encoder/decoder for translation.

The encoder is a pre-norm transformer stack. The decoder stack comes in
two variants: pre-norm self-attention, or an SSRU recurrence that
replaces self-attention with a single forget gate,

    f_t = sigmoid(W_f x_t + b_f)
    c_t = f_t * c_{t-1} + (1 - f_t) * W x_t
    h_t = relu(c_t)

which drops the quadratic dependence on output length during decoding.

Source factors are extra embeddings combined with the surface embedding
(summed at full width or concatenated into it). Target factors shift by
one time step: the attributes of the token produced at step t are
predicted at step t + 1, so that the surface token is known when its
attributes are chosen. Every factor stream keeps its own small output
head; the surface output layer is the transposed target embedding.
"""

from __future__ import annotations

import fnmatch
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .kernels import NEG_INF, Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, SHIFT_ID, UNK_ID

_NAME_RE = re.compile(r"^[a-z0-9_]+(\.[a-z0-9_]+)*$")

SELF_ATTENTION = "self_attention"
SSRU = "ssru"


@dataclass(frozen=True)
class SourceFactorSpec:
    vocab_size: int
    dim: int
    combine: str = "sum"  # "sum" or "concat"


@dataclass(frozen=True)
class TargetFactorSpec:
    vocab_size: int


@dataclass
class ModelConfig:
    src_vocab_size: int
    trg_vocab_size: int
    d_model: int = 512
    heads: int = 8
    ff_dim: int = 2048
    encoder_layers: int = 6
    decoder_layers: int = 6
    decoder_kind: str = SELF_ATTENTION
    source_factor_specs: list[SourceFactorSpec] = field(default_factory=list)
    target_factor_specs: list[TargetFactorSpec] = field(default_factory=list)
    nvs_enabled: bool = False
    max_seq_len: int = 128

    @property
    def surface_embed_dim(self) -> int:
        """Width left for the source surface embedding after concat factors."""
        taken = sum(s.dim for s in self.source_factor_specs if s.combine == "concat")
        return self.d_model - taken

    def validate(self) -> None:
        if self.d_model <= 0 or self.ff_dim <= 0:
            raise ConfigError("d_model and ff_dim must be positive")
        if self.heads <= 0 or self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by heads {self.heads}")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.decoder_kind not in (SELF_ATTENTION, SSRU):
            raise ConfigError(f"unknown decoder kind {self.decoder_kind!r}")
        if self.src_vocab_size < 4 or self.trg_vocab_size < 4:
            raise ConfigError("vocabularies must at least hold the special ids")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be at least 1")
        for i, spec in enumerate(self.source_factor_specs):
            if spec.combine not in ("sum", "concat"):
                raise ConfigError(f"source factor {i}: unknown combine {spec.combine!r}")
            if spec.combine == "sum" and spec.dim != self.d_model:
                raise ConfigError(
                    f"source factor {i}: sum-combined dim {spec.dim} must equal "
                    f"d_model {self.d_model}")
            if spec.vocab_size < 4:
                raise ConfigError(f"source factor {i}: vocabulary too small")
        if self.surface_embed_dim < 1:
            raise ConfigError("concat factor dims leave no room for the surface embedding")
        for i, spec in enumerate(self.target_factor_specs):
            if spec.vocab_size <= SHIFT_ID:
                raise ConfigError(f"target factor {i}: vocabulary must hold the shift id")


class ModelParams:
    """Flat store of named parameter tensors.

    Names are dot-separated [a-z0-9_]+ segments. A frozen parameter keeps
    requires_grad False, so the tape never records an op whose output
    depends only on frozen values.
    """

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if not _NAME_RE.match(name):
            raise ConfigError(f"bad parameter name {name!r}")
        if name in self._store:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def freeze(self, patterns: list[str]) -> list[str]:
        """Set requires_grad False on every name matching any glob pattern."""
        matched = []
        for pattern in patterns:
            hits = fnmatch.filter(self._store, pattern)
            if not hits:
                raise ConfigError(f"freeze pattern {pattern!r} matches no parameter")
            matched.extend(hits)
        for name in matched:
            self._store[name].requires_grad = False
        return sorted(set(matched))

    def frozen_names(self) -> set[str]:
        return {n for n, t in self._store.items() if not t.requires_grad}

    def size(self) -> int:
        return sum(t.size for t in self._store.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._store.items()}


def positional_encoding(length: int, dim: int, offset: int = 0,
                        dtype=np.float32) -> np.ndarray:
    """Interleaved sinusoidal position codes, (length, dim)."""
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freq = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))[None, :]
    angles = pos * freq
    pe = np.zeros((length, 2 * half), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe[:, :dim].astype(dtype)


def length_bias(lengths: np.ndarray, max_len: int, dtype=np.float32) -> np.ndarray:
    """Additive attention bias (B, 1, 1, max_len): NEG_INF past each length."""
    steps = np.arange(max_len)[None, :]
    pad = steps >= np.asarray(lengths)[:, None]
    bias = np.where(pad, NEG_INF, 0.0).astype(dtype)
    return bias[:, None, None, :]


def param_shapes(config: ModelConfig) -> dict[str, tuple[str, tuple[int, ...]]]:
    """Ordered map of parameter name to (init kind, shape).

    Kinds: "mat" Xavier-uniform matrix, "emb" embedding table, "one" norm
    gain, "zero" bias.
    """
    config.validate()
    d, ff = config.d_model, config.ff_dim
    shapes: dict[str, tuple[str, tuple[int, ...]]] = {}

    def norm(prefix: str) -> None:
        shapes[prefix + ".gain"] = ("one", (d,))
        shapes[prefix + ".bias"] = ("zero", (d,))

    def attention(prefix: str) -> None:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = ("mat", (d, d))

    def ffn(prefix: str) -> None:
        shapes[prefix + ".w1"] = ("mat", (ff, d))
        shapes[prefix + ".b1"] = ("zero", (ff,))
        shapes[prefix + ".w2"] = ("mat", (d, ff))
        shapes[prefix + ".b2"] = ("zero", (d,))

    shapes["embed.src.surface"] = ("emb", (config.src_vocab_size, config.surface_embed_dim))
    for i, spec in enumerate(config.source_factor_specs):
        shapes[f"embed.src.factor{i}"] = ("emb", (spec.vocab_size, spec.dim))
    shapes["embed.trg.surface"] = ("emb", (config.trg_vocab_size, d))
    for i, spec in enumerate(config.target_factor_specs):
        shapes[f"embed.trg.factor{i}"] = ("emb", (spec.vocab_size, d))

    for i in range(config.encoder_layers):
        attention(f"encoder.layer{i}.self_attn")
        norm(f"encoder.layer{i}.self_attn_norm")
        ffn(f"encoder.layer{i}.ffn")
        norm(f"encoder.layer{i}.ffn_norm")

    for i in range(config.decoder_layers):
        if config.decoder_kind == SSRU:
            shapes[f"decoder.layer{i}.ssru.wf"] = ("mat", (d, d))
            shapes[f"decoder.layer{i}.ssru.bf"] = ("zero", (d,))
            shapes[f"decoder.layer{i}.ssru.w"] = ("mat", (d, d))
            norm(f"decoder.layer{i}.ssru_norm")
        else:
            attention(f"decoder.layer{i}.self_attn")
            norm(f"decoder.layer{i}.self_attn_norm")
        attention(f"decoder.layer{i}.cross_attn")
        norm(f"decoder.layer{i}.cross_attn_norm")
        ffn(f"decoder.layer{i}.ffn")
        norm(f"decoder.layer{i}.ffn_norm")
    norm("decoder.final_norm")

    for i, spec in enumerate(config.target_factor_specs):
        shapes[f"output.factor{i}.w"] = ("mat", (spec.vocab_size, d))
        shapes[f"output.factor{i}.b"] = ("zero", (spec.vocab_size,))

    if config.nvs_enabled:
        shapes["nvs.w"] = ("mat", (config.trg_vocab_size, d))
        shapes["nvs.b"] = ("zero", (config.trg_vocab_size,))
    return shapes


def init_params(config: ModelConfig, seed: int = 13) -> ModelParams:
    """Deterministic parameter init.

    Weight matrices are Xavier uniform. Embedding tables are normal with
    std 0.3 / sqrt(dim), small enough that the tied output logits start
    near uniform: the initial cross-entropy then sits within a few percent
    of ln(vocab). Norm gains start at one, every bias at zero.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, (kind, shape) in param_shapes(config).items():
        if kind == "mat":
            out_dim, in_dim = shape
            limit = math.sqrt(6.0 / (in_dim + out_dim))
            params.add(name, rng.uniform(-limit, limit, size=shape))
        elif kind == "emb":
            params.add(name, rng.normal(0.0, 0.3 / math.sqrt(shape[1]), size=shape))
        elif kind == "one":
            params.add(name, np.ones(shape))
        else:
            params.add(name, np.zeros(shape))
    return params


def ssru_cell(x: Tensor, c_prev: Tensor, wf: Tensor, bf: Tensor, w: Tensor):
    """One SSRU step. Returns (hidden, new cell), both shaped like x."""
    f = K.sigmoid(K.linear(x, wf, bf))
    c = K.add(K.mul(f, c_prev), K.mul(K.sub(1.0, f), K.linear(x, w)))
    return K.relu(c), c


@dataclass
class StepOutput:
    """Logits for one decode step, surface restricted to active_ids if set."""
    surface: Tensor
    factors: list[Tensor]
    active_ids: np.ndarray | None


@dataclass
class SequenceOutput:
    surface: Tensor
    factors: list[Tensor]
    nvs: Tensor | None


class _LayerState:
    __slots__ = ("kh", "vh", "cell", "cross_kh", "cross_vh")

    def __init__(self, cross_kh: Tensor, cross_vh: Tensor):
        self.kh: Tensor | None = None
        self.vh: Tensor | None = None
        self.cell: Tensor | None = None
        self.cross_kh = cross_kh
        self.cross_vh = cross_vh


class DecodeState:
    """Per-sentence incremental decoder state."""

    def __init__(self, enc: Tensor, cross_bias: np.ndarray,
                 layers: list[_LayerState], active_ids: np.ndarray | None):
        self.enc = enc
        self.cross_bias = cross_bias
        self.layers = layers
        self.active_ids = active_ids
        self.step = 0

    @property
    def batch(self) -> int:
        return self.enc.shape[0]

    def select_rows(self, indices) -> None:
        """Keep (and possibly repeat) batch rows, in the given order. Beam
        search uses this to follow surviving parents and to widen the batch
        from a single start hypothesis."""
        idx = np.asarray(indices, dtype=np.int64)
        self.enc = Tensor(self.enc.data[idx])
        self.cross_bias = self.cross_bias[idx]
        for ls in self.layers:
            ls.cross_kh = Tensor(ls.cross_kh.data[idx])
            ls.cross_vh = Tensor(ls.cross_vh.data[idx])
            if ls.kh is not None:
                ls.kh = Tensor(ls.kh.data[idx])
                ls.vh = Tensor(ls.vh.data[idx])
            if ls.cell is not None:
                ls.cell = Tensor(ls.cell.data[idx])


def validate_active_ids(config: ModelConfig, active_ids) -> np.ndarray:
    """Normalize a restricted output vocabulary to sorted unique ids."""
    active_ids = np.unique(np.asarray(active_ids, dtype=np.int64))
    if active_ids.size == 0:
        raise ConfigError("restricted output vocabulary is empty")
    if active_ids[0] < 0 or active_ids[-1] >= config.trg_vocab_size:
        raise ConfigError("restricted vocabulary ids out of range")
    return active_ids


class Model:
    def __init__(self, config: ModelConfig, params: ModelParams | None = None,
                 seed: int = 13):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        # Feed-forward weights swapped to int8 at inference, keyed by name.
        self.quantized: dict[str, object] = {}
        self._check_params()

    def _check_params(self) -> None:
        expected = param_shapes(self.config)
        have = set(self.params.names())
        want = set(expected)
        if have != want:
            missing = sorted(want - have)
            extra = sorted(have - want)
            raise ConfigError(
                f"parameters do not match config (missing {missing[:4]}, extra {extra[:4]})")
        for name, (_, shape) in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name}: shape {self.params[name].shape}, "
                    f"config wants {shape}")

    # ---------------------------------------------------------------- embed

    def embed_source(self, src_ids: np.ndarray,
                     factor_ids: list[np.ndarray]) -> Tensor:
        """Combine surface and factor embeddings, (B, L) ids -> (B, L, d).

        Position codes span the surface width only and are added before
        concat factors join, so a concat factor's slice of the output is
        exactly its embedding row.
        """
        cfg = self.config
        if len(factor_ids) != len(cfg.source_factor_specs):
            raise ShapeError(
                f"model wants {len(cfg.source_factor_specs)} source factor "
                f"streams, got {len(factor_ids)}")
        length = src_ids.shape[1]
        surf = K.embedding(self.params["embed.src.surface"], src_ids)
        pe = positional_encoding(length, cfg.surface_embed_dim)
        x = K.add(surf, pe[None])
        parts = [x]
        for i, spec in enumerate(cfg.source_factor_specs):
            emb = K.embedding(self.params[f"embed.src.factor{i}"], factor_ids[i])
            if spec.combine == "concat":
                parts.append(emb)
        if len(parts) > 1:
            x = K.concat(parts, axis=-1)
        for i, spec in enumerate(cfg.source_factor_specs):
            if spec.combine == "sum":
                x = K.add(x, K.embedding(self.params[f"embed.src.factor{i}"], factor_ids[i]))
        return x

    def embed_target(self, trg_ids: np.ndarray, factor_ids: list[np.ndarray],
                     offset: int = 0) -> Tensor:
        cfg = self.config
        if len(factor_ids) != len(cfg.target_factor_specs):
            raise ShapeError(
                f"model wants {len(cfg.target_factor_specs)} target factor "
                f"streams, got {len(factor_ids)}")
        x = K.embedding(self.params["embed.trg.surface"], trg_ids)
        x = K.add(x, positional_encoding(trg_ids.shape[1], cfg.d_model, offset)[None])
        for i in range(len(cfg.target_factor_specs)):
            x = K.add(x, K.embedding(self.params[f"embed.trg.factor{i}"], factor_ids[i]))
        return x

    # --------------------------------------------------------------- encode

    def encode(self, src_ids: np.ndarray, factor_ids: list[np.ndarray],
               lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Returns encoder states (B, L, d) and the additive pad bias."""
        x = self.embed_source(src_ids, factor_ids)
        bias = length_bias(lengths, src_ids.shape[1])
        p = self.params
        for i in range(self.config.encoder_layers):
            base = f"encoder.layer{i}"
            h = K.layer_norm(x, p[f"{base}.self_attn_norm.gain"], p[f"{base}.self_attn_norm.bias"])
            a = K.multi_head_attention(
                h, h, h, self.config.heads,
                p[f"{base}.self_attn.wq"], p[f"{base}.self_attn.wk"],
                p[f"{base}.self_attn.wv"], p[f"{base}.self_attn.wo"],
                mask=bias)
            x = K.add(x, a)
            x = K.add(x, self._ffn(x, f"{base}.ffn"))
        return x, bias

    def _ffn(self, x: Tensor, base: str) -> Tensor:
        p = self.params
        h = K.layer_norm(x, p[base + "_norm.gain"], p[base + "_norm.bias"])
        q1 = self.quantized.get(base + ".w1")
        if q1 is not None:
            h = K.relu(q1(h, p[base + ".b1"]))
            return self.quantized[base + ".w2"](h, p[base + ".b2"])
        h = K.relu(K.linear(h, p[base + ".w1"], p[base + ".b1"]))
        return K.linear(h, p[base + ".w2"], p[base + ".b2"])

    # -------------------------------------------------------- teacher forced

    def forward_sequence(self, src_ids, src_factor_ids, src_lengths,
                         trg_in_ids, trg_in_factor_ids) -> SequenceOutput:
        """Full teacher-forced pass. Target inputs must already carry BOS
        at position 0 and the shift marker in factor streams."""
        enc, bias = self.encode(src_ids, src_factor_ids, src_lengths)
        x = self.embed_target(trg_in_ids, trg_in_factor_ids)
        p = self.params
        cfg = self.config
        for i in range(cfg.decoder_layers):
            base = f"decoder.layer{i}"
            if cfg.decoder_kind == SSRU:
                h = K.layer_norm(x, p[f"{base}.ssru_norm.gain"], p[f"{base}.ssru_norm.bias"])
                x = K.add(x, self._ssru_scan(h, base))
            else:
                h = K.layer_norm(x, p[f"{base}.self_attn_norm.gain"],
                                 p[f"{base}.self_attn_norm.bias"])
                a = K.multi_head_attention(
                    h, h, h, cfg.heads,
                    p[f"{base}.self_attn.wq"], p[f"{base}.self_attn.wk"],
                    p[f"{base}.self_attn.wv"], p[f"{base}.self_attn.wo"],
                    mask="causal")
                x = K.add(x, a)
            h = K.layer_norm(x, p[f"{base}.cross_attn_norm.gain"],
                             p[f"{base}.cross_attn_norm.bias"])
            c = K.multi_head_attention(
                h, enc, enc, cfg.heads,
                p[f"{base}.cross_attn.wq"], p[f"{base}.cross_attn.wk"],
                p[f"{base}.cross_attn.wv"], p[f"{base}.cross_attn.wo"],
                mask=bias)
            x = K.add(x, c)
            x = K.add(x, self._ffn(x, f"{base}.ffn"))
        h = K.layer_norm(x, p["decoder.final_norm.gain"], p["decoder.final_norm.bias"])
        surface = K.matmul(h, K.transpose(p["embed.trg.surface"]))
        factors = [K.linear(h, p[f"output.factor{i}.w"], p[f"output.factor{i}.b"])
                   for i in range(len(cfg.target_factor_specs))]
        nvs = self.nvs_logits(enc, src_lengths) if cfg.nvs_enabled else None
        return SequenceOutput(surface, factors, nvs)

    def _ssru_scan(self, h: Tensor, base: str) -> Tensor:
        p = self.params
        wf, bf, w = p[f"{base}.ssru.wf"], p[f"{base}.ssru.bf"], p[f"{base}.ssru.w"]
        b, length, d = h.shape
        c = Tensor(np.zeros((b, 1, d), dtype=h.data.dtype))
        outs = []
        for t in range(length):
            x_t = K.slice_axis(h, 1, t, t + 1)
            out, c = ssru_cell(x_t, c, wf, bf, w)
            outs.append(out)
        return K.concat(outs, axis=1)

    # ----------------------------------------------------------------- nvs

    def nvs_logits(self, enc: Tensor, lengths: np.ndarray) -> Tensor:
        """Max-pool unpadded encoder positions, then one linear layer."""
        keep = (np.arange(enc.shape[1])[None, :] < np.asarray(lengths)[:, None])
        pooled = K.masked_max(enc, keep[:, :, None], axis=1)
        return K.linear(pooled, self.params["nvs.w"], self.params["nvs.b"])

    def nvs_select(self, enc: Tensor, lengths: np.ndarray, threshold: float,
                   always_include) -> list[np.ndarray]:
        """Per sentence: ids with sigmoid score strictly above the threshold,
        united with always_include. Threshold 0 keeps the full vocabulary,
        threshold 1 keeps only always_include."""
        if not self.config.nvs_enabled:
            raise ConfigError("model was built without vocabulary selection")
        if not (0.0 <= threshold <= 1.0):
            raise ConfigError(f"nvs threshold {threshold} outside [0, 1]")
        probs = K.sigmoid(self.nvs_logits(enc, lengths)).data
        forced = np.asarray(sorted(set(int(i) for i in always_include)), dtype=np.int64)
        out = []
        for row in probs:
            chosen = np.flatnonzero(row > threshold)
            out.append(np.union1d(chosen, forced).astype(np.int64))
        return out

    # ------------------------------------------------------------ decoding

    def decode_init(self, src_ids, src_factor_ids, lengths,
                    active_ids: np.ndarray | None = None) -> DecodeState:
        """Run the encoder and set up per-layer caches for stepping."""
        enc, bias = self.encode(src_ids, src_factor_ids, lengths)
        p = self.params
        layers = []
        for i in range(self.config.decoder_layers):
            base = f"decoder.layer{i}.cross_attn"
            kh = K.split_heads(K.linear(enc, p[base + ".wk"]), self.config.heads)
            vh = K.split_heads(K.linear(enc, p[base + ".wv"]), self.config.heads)
            layers.append(_LayerState(kh, vh))
        if active_ids is not None:
            active_ids = validate_active_ids(self.config, active_ids)
        return DecodeState(enc, bias, layers, active_ids)

    def decode_step(self, state: DecodeState, prev_ids: np.ndarray,
                    prev_factor_ids: list[np.ndarray]) -> StepOutput:
        """Advance one step. prev_ids is (B,): BOS on the first call, then
        the last emitted surface token; factor streams carry the shift
        marker first, then the factor chosen for the previous token."""
        cfg = self.config
        p = self.params
        if state.step >= 2 * cfg.max_seq_len + 10:
            raise ShapeError("decode ran past the hard position limit")
        x = self.embed_target(np.asarray(prev_ids)[:, None],
                              [np.asarray(f)[:, None] for f in prev_factor_ids],
                              offset=state.step)
        for i in range(cfg.decoder_layers):
            base = f"decoder.layer{i}"
            ls = state.layers[i]
            if cfg.decoder_kind == SSRU:
                h = K.layer_norm(x, p[f"{base}.ssru_norm.gain"], p[f"{base}.ssru_norm.bias"])
                if ls.cell is None:
                    ls.cell = Tensor(np.zeros_like(h.data))
                out, ls.cell = ssru_cell(h, ls.cell, p[f"{base}.ssru.wf"],
                                         p[f"{base}.ssru.bf"], p[f"{base}.ssru.w"])
                x = K.add(x, out)
            else:
                h = K.layer_norm(x, p[f"{base}.self_attn_norm.gain"],
                                 p[f"{base}.self_attn_norm.bias"])
                qh = K.split_heads(K.linear(h, p[f"{base}.self_attn.wq"]), cfg.heads)
                kh = K.split_heads(K.linear(h, p[f"{base}.self_attn.wk"]), cfg.heads)
                vh = K.split_heads(K.linear(h, p[f"{base}.self_attn.wv"]), cfg.heads)
                ls.kh = kh if ls.kh is None else K.concat([ls.kh, kh], axis=2)
                ls.vh = vh if ls.vh is None else K.concat([ls.vh, vh], axis=2)
                ctx = K.merge_heads(K.attention_core(qh, ls.kh, ls.vh, mask=None))
                x = K.add(x, K.linear(ctx, p[f"{base}.self_attn.wo"]))
            h = K.layer_norm(x, p[f"{base}.cross_attn_norm.gain"],
                             p[f"{base}.cross_attn_norm.bias"])
            qh = K.split_heads(K.linear(h, p[f"{base}.cross_attn.wq"]), cfg.heads)
            ctx = K.merge_heads(K.attention_core(qh, ls.cross_kh, ls.cross_vh,
                                                 mask=state.cross_bias))
            x = K.add(x, K.linear(ctx, p[f"{base}.cross_attn.wo"]))
            x = K.add(x, self._ffn(x, f"{base}.ffn"))
        h = K.layer_norm(x, p["decoder.final_norm.gain"], p["decoder.final_norm.bias"])
        h = K.reshape(h, (h.shape[0], h.shape[2]))
        if state.active_ids is not None:
            rows = K.embedding(p["embed.trg.surface"], state.active_ids)
        else:
            rows = p["embed.trg.surface"]
        surface = K.matmul(h, K.transpose(rows))
        factors = [K.linear(h, p[f"output.factor{i}.w"], p[f"output.factor{i}.b"])
                   for i in range(len(cfg.target_factor_specs))]
        state.step += 1
        return StepOutput(surface, factors, state.active_ids)


# ------------------------------------------------------------------- costs

def decoder_step_cost(config: ModelConfig, step: int, src_len: int) -> int:
    """Multiply-accumulate count for decode step number `step` (0-based).

    Cross-attention key/value projections are charged once per sentence in
    translation_cost, not here. Self-attention grows with the number of
    cached positions; the SSRU replaces it with two fixed projections.
    """
    d, ff = config.d_model, config.ff_dim
    if config.decoder_kind == SSRU:
        inner = 2 * d * d
    else:
        inner = 4 * d * d + 2 * (step + 1) * d
    cross = 2 * d * d + 2 * src_len * d
    per_layer = inner + cross + 2 * d * ff
    output = d * config.trg_vocab_size
    output += sum(d * s.vocab_size for s in config.target_factor_specs)
    return config.decoder_layers * per_layer + output


def encoder_cost(config: ModelConfig, src_len: int) -> int:
    """Multiply-accumulate count for encoding a source of src_len tokens."""
    d, ff = config.d_model, config.ff_dim
    per_layer = 4 * src_len * d * d + 2 * src_len * src_len * d + 2 * src_len * d * ff
    return config.encoder_layers * per_layer


def translation_cost(config: ModelConfig, src_len: int, out_len: int) -> int:
    """Total MACs to translate one sentence: encode, project cross K/V once,
    then decode out_len steps."""
    cross_kv = config.decoder_layers * 2 * src_len * config.d_model * config.d_model
    steps = sum(decoder_step_cost(config, t, src_len) for t in range(out_len))
    return encoder_cost(config, src_len) + cross_kv + steps
