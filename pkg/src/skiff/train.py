"""Single-process training loop.

The objective is label-smoothed cross-entropy over the surface stream plus
every target factor stream, averaged over non-PAD positions, with an
optional binary cross-entropy term tying the encoder-side vocabulary
selection head to the bag of target words. Adam with an inverse square
root warmup schedule drives the updates.

Data order is a pure function of the base seed and the update index:
epoch e iterates its shards with epoch seed base + e, so resuming from a
checkpoint replays the same schedule and reproduces the uninterrupted
loss trajectory bit for bit. Checkpoints land every checkpoint_interval
updates together with a metrics line (update index, validation loss); at
the end the best checkpoints by validation loss are averaged elementwise
into the serving parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from . import kernels as K
from .checkpoint import (CONFIG_FILE, METRICS_FILE, append_metric,
                         read_checkpoint, read_metrics, write_checkpoint,
                         write_config)
from .data import Batch, ShardIterator, ShardSet, pack_batches
from .errors import ConfigError, DataError, NumericError
from .kernels import GradTape, Tensor
from .model import Model, ModelParams, SequenceOutput
from .vocab import BOS_ID, EOS_ID, PAD_ID, SHIFT_ID

logger = logging.getLogger(__name__)

FREEZE_PRESETS = ("all_except_decoder", "all_except_output_layer",
                  "all_except_embeddings", "all_except_feed_forward")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9


@dataclass
class TrainConfig:
    max_updates: int
    checkpoint_interval: int = 500
    learning_rate: float = 1.0     # multiplier on the warmup schedule
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    freeze_spec: str | list[str] | None = None
    factor_loss_weights: list[float] | None = None
    nvs_loss_weight: float = 1.0
    average_best: int = 8
    batch_tokens: int = 1024
    seed: int = 13

    def validate(self) -> None:
        if self.max_updates < 0:
            raise ConfigError(f"max_updates must be non-negative, got {self.max_updates}")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be at least 1")
        if self.max_updates > 0 and self.checkpoint_interval > self.max_updates:
            raise ConfigError(
                f"checkpoint_interval {self.checkpoint_interval} exceeds "
                f"max_updates {self.max_updates}")
        if self.average_best < 1:
            raise ConfigError("average_best must be at least 1")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be at least 1")


def learning_rate(config: TrainConfig, d_model: int, update: int) -> float:
    """Inverse square root schedule with linear warmup, 1-based updates."""
    scale = config.learning_rate * d_model ** -0.5
    return scale * min(update ** -0.5, update * config.warmup_steps ** -1.5)


# --------------------------------------------------------------------- loss

def smoothed_ce(logits: Tensor, labels: np.ndarray, mask: np.ndarray,
                epsilon: float) -> tuple[Tensor, float]:
    """Label-smoothed cross-entropy summed over positions where mask is 1.

    The smoothing mass epsilon spreads over the vocab minus the target
    class. Returns the summed loss and the count of masked-in positions.
    """
    if labels.shape != logits.shape[:-1]:
        raise K.ShapeError(
            f"labels shape {labels.shape} must equal {logits.shape[:-1]}")
    vocab = logits.shape[-1]
    logp = K.log_softmax(logits)
    picked = K.gather_last(logp, labels)
    total = K.reduce_sum(logp, axis=-1)
    off = epsilon / (vocab - 1)
    # -(1-eps)*lp[y] - off*(sum - lp[y])
    per_pos = K.sub(K.mul(picked, -(1.0 - epsilon - off)), K.mul(total, off))
    masked = K.mul(per_pos, mask.astype(logits.data.dtype))
    return K.reduce_sum(masked), float(mask.sum())


def bag_of_words(trg: np.ndarray, lengths: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per-sentence 0/1 bag over the target vocabulary, specials excluded."""
    bags = np.zeros((trg.shape[0], vocab_size), dtype=np.float32)
    for b in range(trg.shape[0]):
        ids = trg[b, :int(lengths[b])]
        bags[b, ids[ids >= SHIFT_ID]] = 1.0
    return bags


def compute_loss(output: SequenceOutput, trg_labels: np.ndarray,
                 trg_factor_labels: list[np.ndarray], label_smoothing: float,
                 factor_weights: list[float] | None = None,
                 nvs_weight: float = 1.0,
                 nvs_targets: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Joint loss: per-token mean of weighted smoothed CE over all output
    streams, plus the weighted NVS binary CE when both sides are present.

    Factor streams share the surface PAD mask. SHIFT-labeled factor
    positions count toward the loss but not toward factor accuracy.
    """
    if len(trg_factor_labels) != len(output.factors):
        raise K.ShapeError(
            f"model emits {len(output.factors)} factor streams, "
            f"targets have {len(trg_factor_labels)}")
    weights = list(factor_weights) if factor_weights is not None \
        else [1.0] * len(output.factors)
    if len(weights) != len(output.factors):
        raise ConfigError(
            f"{len(weights)} factor loss weights for {len(output.factors)} streams")
    mask = (trg_labels != PAD_ID).astype(np.float32)
    metrics: dict[str, float] = {}

    total, count = smoothed_ce(output.surface, trg_labels, mask, label_smoothing)
    metrics["ce.surface"] = float(total.data) / count
    pred = output.surface.data.argmax(axis=-1)
    metrics["acc.surface"] = float(((pred == trg_labels) * mask).sum() / mask.sum())
    for k, (logits, labels) in enumerate(zip(output.factors, trg_factor_labels)):
        stream_sum, _ = smoothed_ce(logits, labels, mask, label_smoothing)
        metrics[f"ce.factor{k}"] = float(stream_sum.data) / count
        scored = mask * (labels != SHIFT_ID)
        pred = logits.data.argmax(axis=-1)
        hits = ((pred == labels) * scored).sum()
        metrics[f"acc.factor{k}"] = float(hits / scored.sum()) if scored.any() else 1.0
        total = K.add(total, K.mul(stream_sum, weights[k]))
    loss = K.mul(total, 1.0 / count)

    if output.nvs is not None and nvs_targets is not None:
        nvs = K.bce_with_logits(output.nvs, nvs_targets)
        metrics["nvs"] = float(nvs.data)
        loss = K.add(loss, K.mul(nvs, nvs_weight))
    metrics["loss"] = float(loss.data)
    return loss, metrics


# ----------------------------------------------------------------- freezing

def freeze_params(params: ModelParams, spec: str | list[str]) -> ModelParams:
    """Flag parameters frozen by preset name or glob patterns. A pattern
    matching nothing is reported as a warning, not an error."""
    names = params.names()
    if isinstance(spec, str):
        if spec not in FREEZE_PRESETS:
            raise ConfigError(
                f"unknown freeze preset {spec!r}; choose from {FREEZE_PRESETS} "
                f"or pass glob patterns")
        if spec == "all_except_decoder":
            frozen = [n for n in names if not n.startswith("decoder.")]
        elif spec == "all_except_output_layer":
            # the surface output projection is the tied target embedding
            frozen = [n for n in names
                      if not n.startswith("output.") and n != "embed.trg.surface"]
        elif spec == "all_except_embeddings":
            frozen = [n for n in names if not n.startswith("embed.")]
        else:  # all_except_feed_forward
            frozen = [n for n in names if ".ffn." not in n]
    else:
        frozen = []
        for pattern in spec:
            matched = [n for n in names if fnmatchcase(n, pattern)]
            if not matched:
                logger.warning("freeze pattern %r matches no parameters", pattern)
            frozen.extend(matched)
    for name in frozen:
        params[name].requires_grad = False
    logger.info("frozen %d of %d parameters", len(set(frozen)), len(names))
    return params


# -------------------------------------------------------------------- adam

class AdamState:
    """First/second moment buffers plus the global step, serializable to
    the checkpoint format for bit-exact resume."""

    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params.names()}
        self.v = {n: np.zeros_like(params[n].data) for n in params.names()}

    def apply(self, params: ModelParams, lr: float) -> None:
        self.step += 1
        b1c = 1.0 - ADAM_BETA1 ** self.step
        b2c = 1.0 - ADAM_BETA2 ** self.step
        for name in params.names():
            p = params[name]
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * np.square(g)
            p.data -= (lr / b1c) * m / (np.sqrt(v / b2c) + ADAM_EPS)

    def save(self, path: Path) -> None:
        blob = {"step": np.array([self.step], dtype=np.float32)}
        for n, a in self.m.items():
            blob[f"adam.m.{n}"] = a
        for n, a in self.v.items():
            blob[f"adam.v.{n}"] = a
        write_checkpoint(path, blob)

    @classmethod
    def load(cls, path: Path, params: ModelParams) -> "AdamState":
        blob = read_checkpoint(path)
        state = cls(params)
        state.step = int(blob["step"][0])
        for n in params.names():
            state.m[n] = blob[f"adam.m.{n}"]
            state.v[n] = blob[f"adam.v.{n}"]
        return state


# ---------------------------------------------------------------- averaging

def average_checkpoints(checkpoints: list[tuple[int, float, str | Path]],
                        best_n: int) -> dict[str, np.ndarray]:
    """Elementwise mean of the best_n checkpoints by ascending validation
    loss, ties broken by earlier update index. checkpoints holds
    (update, validation loss, params path) triples."""
    if best_n < 1:
        raise ConfigError("best_n must be at least 1")
    if not checkpoints:
        raise ConfigError("no checkpoints to average")
    ranked = sorted(checkpoints, key=lambda c: (c[1], c[0]))[:best_n]
    sums: dict[str, np.ndarray] = {}
    schema: dict[str, tuple] = {}
    for _, _, path in ranked:
        blob = read_checkpoint(path)
        if not sums:
            sums = {n: a.astype(np.float64) for n, a in blob.items()}
            schema = {n: a.shape for n, a in blob.items()}
            continue
        if set(blob) != set(schema):
            odd = sorted(set(blob) ^ set(schema))[0]
            raise DataError(f"checkpoint {path} schema differs at {odd!r}")
        for n, a in blob.items():
            if a.shape != schema[n]:
                raise DataError(f"checkpoint {path} shape differs at {n!r}")
            sums[n] += a
    return {n: (s / len(ranked)).astype(np.float32) for n, s in sums.items()}


# ------------------------------------------------------------------- loop

def shift_right(labels: np.ndarray, fill: int) -> np.ndarray:
    """Decoder input ids: the fill id, then the labels minus their last
    position."""
    out = np.empty_like(labels)
    out[:, 0] = fill
    out[:, 1:] = labels[:, :-1]
    return out


def batch_loss(model: Model, batch: Batch, config: TrainConfig) -> tuple[Tensor, dict]:
    trg_in = shift_right(batch.trg, BOS_ID)
    fac_in = [shift_right(f, SHIFT_ID) for f in batch.trg_factors]
    output = model.forward_sequence(batch.src, batch.src_factors, batch.src_lengths,
                                    trg_in, fac_in)
    nvs_targets = None
    if model.config.nvs_enabled:
        nvs_targets = bag_of_words(batch.trg, batch.trg_lengths,
                                   model.config.trg_vocab_size)
    return compute_loss(output, batch.trg, batch.trg_factors,
                        config.label_smoothing, config.factor_loss_weights,
                        config.nvs_loss_weight, nvs_targets)


def evaluate(model: Model, batches: list[Batch], config: TrainConfig) -> float:
    """Mean objective over validation batches, weighted by token count."""
    total = 0.0
    tokens = 0
    for batch in batches:
        loss, _ = batch_loss(model, batch, config)
        n = int((batch.trg != PAD_ID).sum())
        total += float(loss.data) * n
        tokens += n
    return total / max(tokens, 1)


def encode_pairs(shard_set: ShardSet, src_lines: list[list[str]],
                 trg_lines: list[list[str]],
                 src_factor_lines: list[list[list[str]]] | None = None,
                 trg_factor_lines: list[list[list[str]]] | None = None
                 ) -> list[list[np.ndarray]]:
    """Encode raw token pairs with a shard set's vocabularies, in the
    stream layout the trainer expects. Pairs with an empty side are
    dropped."""
    if len(src_lines) != len(trg_lines):
        raise DataError(
            f"line count mismatch: {len(src_lines)} source lines, "
            f"{len(trg_lines)} target lines")
    src_vocab = shard_set.vocab("src")
    trg_vocab = shard_set.vocab("trg")
    n_sf = sum(1 for n in shard_set.streams if n.startswith("src_factor"))
    n_tf = sum(1 for n in shard_set.streams if n.startswith("trg_factor"))
    sf_lines = src_factor_lines or []
    tf_lines = trg_factor_lines or []
    if len(sf_lines) != n_sf or len(tf_lines) != n_tf:
        raise DataError(
            f"validation factor streams ({len(sf_lines)} source, {len(tf_lines)} "
            f"target) do not match the prepared data ({n_sf}, {n_tf})")
    sf_vocabs = [shard_set.vocab(f"src_factor{i}") for i in range(n_sf)]
    tf_vocabs = [shard_set.vocab(f"trg_factor{i}") for i in range(n_tf)]
    records = []
    for i, (s, t) in enumerate(zip(src_lines, trg_lines)):
        if not s or not t:
            continue
        streams = [np.array(src_vocab.encode(s), dtype=np.int32)]
        for vocab, lines in zip(sf_vocabs, sf_lines):
            streams.append(np.array(vocab.encode(lines[i]), dtype=np.int32))
        streams.append(np.array(trg_vocab.encode(t) + [EOS_ID], dtype=np.int32))
        for vocab, lines in zip(tf_vocabs, tf_lines):
            streams.append(np.array([SHIFT_ID] + vocab.encode(lines[i]),
                                    dtype=np.int32))
        records.append(streams)
    return records


@dataclass
class TrainSummary:
    out_dir: Path
    updates: int
    checkpoints: list[tuple[int, float]] = field(default_factory=list)


def _save_checkpoint(out_dir: Path, update: int, model: Model,
                     adam: AdamState) -> Path:
    path = out_dir / f"params.{update:05d}.bin"
    write_checkpoint(path, {n: model.params[n].data for n in model.params.names()})
    adam.save(out_dir / f"optimizer.{update:05d}.bin")
    return path


def train(model: Model, shard_set: ShardSet, config: TrainConfig,
          out_dir: str | Path, val_batches: list[Batch] | None = None,
          resume_from: str | Path | None = None) -> TrainSummary:
    """Run up to max_updates optimizer steps and write a servable model
    directory: numbered checkpoints, a metrics sidecar, and final params
    averaged over the best checkpoints by validation loss (the last
    training loss stands in when no validation data is given)."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / CONFIG_FILE, model.config)
    for stream in shard_set.streams:
        # shard streams are src_factor0...; the model directory uses dots
        name = f"vocab.{stream.replace('_factor', '.factor')}.json"
        data = (shard_set.path / f"vocab.{stream}.json").read_bytes()
        (out_dir / name).write_bytes(data)
    n_factors = sum(1 for n in shard_set.streams if n.startswith("trg_factor"))
    if n_factors != len(model.config.target_factor_specs):
        raise ConfigError(
            f"model has {len(model.config.target_factor_specs)} target factor "
            f"streams, prepared data has {n_factors}")

    if config.freeze_spec is not None:
        freeze_params(model.params, config.freeze_spec)

    adam = AdamState(model.params)
    start_update = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        blob = read_checkpoint(resume_from)
        for name in model.params.names():
            if name not in blob:
                raise DataError(f"{resume_from}: missing parameter {name!r}")
            model.params[name].data[...] = blob[name]
        twin = resume_from.with_name(resume_from.name.replace("params.", "optimizer."))
        if twin.exists():
            adam = AdamState.load(twin, model.params)
            start_update = adam.step
            logger.info("resumed at update %d", start_update)
        else:
            logger.warning("no optimizer state next to %s; Adam starts fresh",
                           resume_from)

    metrics_path = out_dir / METRICS_FILE
    checkpoints: list[tuple[int, float, Path]] = []

    def checkpoint(update: int, train_loss: float) -> None:
        val = evaluate(model, val_batches, config) if val_batches else train_loss
        path = _save_checkpoint(out_dir, update, model, adam)
        append_metric(metrics_path, update, val)
        checkpoints.append((update, val, path))
        logger.info("checkpoint %05d: validation loss %.6f", update, val)

    update = start_update
    if config.max_updates == 0:
        checkpoint(0, evaluate(model, val_batches, config) if val_batches else 0.0)
    last_loss = math.nan
    epoch = 0
    while update < config.max_updates:
        iterator = ShardIterator(shard_set, config.batch_tokens,
                                 epoch_seed=config.seed + epoch)
        for batch in iterator:
            if update >= config.max_updates:
                break
            if start_update > 0:
                # replay the schedule up to the resume point
                start_update -= 1
                continue
            update += 1
            with GradTape() as tape:
                loss, _ = batch_loss(model, batch, config)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at update {update}")
                tape.backward(loss)
            for name in model.params.names():
                p = model.params[name]
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(
                        f"non-finite gradient for {name} at update {update}")
            adam.apply(model.params, learning_rate(config, model.config.d_model,
                                                   update))
            for name in model.params.names():
                model.params[name].grad = None
            last_loss = float(loss.data)
            if update % config.checkpoint_interval == 0 or update == config.max_updates:
                checkpoint(update, last_loss)
        epoch += 1

    if not checkpoints:
        checkpoint(update, last_loss)
    averaged = average_checkpoints([(u, v, p) for u, v, p in checkpoints],
                                   min(config.average_best, len(checkpoints)))
    write_checkpoint(out_dir / "params.bin", averaged)
    return TrainSummary(out_dir, update, [(u, v) for u, v, _ in checkpoints])


def load_metrics_checkpoints(out_dir: str | Path) -> list[tuple[int, float, Path]]:
    """Pair each metrics line with its checkpoint file."""
    out_dir = Path(out_dir)
    entries = []
    for update, loss in read_metrics(out_dir / METRICS_FILE):
        path = out_dir / f"params.{update:05d}.bin"
        if path.exists():
            entries.append((update, loss, path))
    return entries
