"""Command-line surface: prepare-data, train, translate, build-shortlist, bench.

Exit codes follow the package error hierarchy: 0 on success, 1 for usage
or configuration problems, 2 for bad input or data files, 3 for numeric
failures. Diagnostics go to stderr; stdout carries only translations and
reports. NMT_NUM_THREADS (read at import) caps numeric thread counts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_model_dir
from .data import DEFAULT_MAX_LEN, ShardSet, pack_batches, prepare_shards
from .errors import DataError, InputError, NumericError, SkiffError
from .model import (Model, ModelConfig, SourceFactorSpec, TargetFactorSpec,
                    decoder_step_cost)
from .quant import quantize_model
from .search import (NvsRestriction, SearchSettings, ShortlistRestriction,
                     parse_input_line, translate)
from .shortlist import (DEFAULT_ITERATIONS, DEFAULT_K, Shortlist, train_model1,
                        write_shortlist_file)
from .train import (FREEZE_PRESETS, TrainConfig, encode_pairs, train)
from .vocab import BOS_ID, build_vocab

logger = logging.getLogger(__name__)

DEFAULT_SEED = 13


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _read_token_lines(path: str | Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f]


def _print_config(config: ModelConfig) -> None:
    for f in dataclasses.fields(config):
        print(f"{f.name} = {getattr(config, f.name)}")


# ------------------------------------------------------------- prepare-data

def _cmd_prepare_data(args) -> int:
    prepare_shards(
        args.source, args.target, args.output,
        source_factor_paths=args.source_factors,
        target_factor_paths=args.target_factors,
        num_shards=args.num_shards, seed=args.seed, max_len=args.max_len,
        min_count=args.min_count)
    return 0


# ---------------------------------------------------------------------- train

def _freeze_spec(raw: str | None):
    if raw is None:
        return None
    return raw if raw in FREEZE_PRESETS else raw.split(",")


def _cmd_train(args) -> int:
    if (args.validation_source is None) != (args.validation_target is None):
        raise InputError("-vs and -vt must be given together")
    shard_set = ShardSet.load(args.data)
    n_sf = sum(1 for n in shard_set.streams if n.startswith("src_factor"))
    n_tf = sum(1 for n in shard_set.streams if n.startswith("trg_factor"))
    config = ModelConfig(
        src_vocab_size=len(shard_set.vocab("src")),
        trg_vocab_size=len(shard_set.vocab("trg")),
        d_model=args.d_model, heads=args.heads, ff_dim=args.ff_dim,
        encoder_layers=args.encoder_layers, decoder_layers=args.decoder_layers,
        decoder_kind=args.decoder,
        source_factor_specs=[
            SourceFactorSpec(len(shard_set.vocab(f"src_factor{i}")),
                             args.d_model, "sum") for i in range(n_sf)],
        target_factor_specs=[
            TargetFactorSpec(len(shard_set.vocab(f"trg_factor{i}")))
            for i in range(n_tf)],
        nvs_enabled=args.nvs, max_seq_len=args.max_seq_len)
    if args.show_config:
        _print_config(config)
        return 0
    model = Model(config, seed=args.seed)
    val_batches = None
    if args.validation_source is not None:
        records = encode_pairs(shard_set,
                               _read_token_lines(args.validation_source),
                               _read_token_lines(args.validation_target))
        val_batches = pack_batches(records, args.batch_tokens, n_sf, n_tf)
    train_config = TrainConfig(
        max_updates=args.max_updates,
        checkpoint_interval=args.checkpoint_interval,
        learning_rate=args.learning_rate, warmup_steps=args.warmup_steps,
        label_smoothing=args.label_smoothing,
        freeze_spec=_freeze_spec(args.freeze),
        average_best=args.average_best, batch_tokens=args.batch_tokens,
        seed=args.seed)
    summary = train(model, shard_set, train_config, args.output,
                    val_batches=val_batches, resume_from=args.params)
    logger.info("finished after %d updates, %d checkpoints in %s",
                summary.updates, len(summary.checkpoints), summary.out_dir)
    return 0


# ------------------------------------------------------------------ translate

def _cmd_translate(args) -> int:
    model_dir = load_model_dir(args.model)
    model = model_dir.model
    if args.show_config:
        _print_config(model.config)
        return 0
    if args.quantize == "int8":
        quantize_model(model)
    restriction = None
    if args.shortlist is not None:
        shortlist = Shortlist.from_file(args.shortlist, model_dir.src_vocab,
                                        model_dir.trg_vocab)
        restriction = ShortlistRestriction(shortlist)
    elif args.nvs_threshold is not None:
        restriction = NvsRestriction(args.nvs_threshold)
    settings = SearchSettings(beam=args.beam, length_alpha=args.length_alpha,
                              restriction=restriction,
                              use_greedy=True if args.greedy else None)

    out = sys.stdout
    pending: list = []
    for line in sys.stdin:
        try:
            inp = parse_input_line(line.rstrip("\n"))
            inp.strip_prefix = args.strip_prefix
            inp.prefix_all_chunks = args.prefix_all_chunks
            pending.append(inp)
        except InputError as e:
            # a malformed line must not sink its whole batch
            pending.append(e)
        if len(pending) >= args.batch_size:
            _emit(out, args, model, model_dir, settings, pending)
            pending.clear()
    if pending:
        _emit(out, args, model, model_dir, settings, pending)
    out.flush()
    return 0


def _emit(out, args, model, model_dir, settings, pending) -> None:
    """Translate a batch where parse failures are carried as exceptions."""
    good = [p for p in pending if not isinstance(p, InputError)]
    records = iter(translate(model, model_dir, good, settings))
    for p in pending:
        if isinstance(p, InputError):
            logger.warning("input error: %s", p)
            text, score, factors, forced, error = "", 0.0, [], False, str(p)
        else:
            r = next(records)
            if r.error is not None:
                logger.warning("input error: %s", r.error)
            text, score, factors, forced, error = (r.text, r.score, r.factors,
                                                   r.forced_eos, r.error)
        if args.json:
            obj: dict = {"translation": text, "score": score}
            if factors:
                obj["factors"] = factors
            obj["forced_eos"] = forced
            if error is not None:
                obj["error"] = error
            out.write(json.dumps(obj, ensure_ascii=False) + "\n")
        else:
            out.write(text + "\n")


# ------------------------------------------------------------ build-shortlist

def _cmd_build_shortlist(args) -> int:
    src_lines = _read_token_lines(args.source)
    trg_lines = _read_token_lines(args.target)
    if len(src_lines) != len(trg_lines):
        raise DataError(f"line count mismatch: {len(src_lines)} source lines, "
                        f"{len(trg_lines)} target lines")
    src_vocab = build_vocab(src_lines)
    trg_vocab = build_vocab(trg_lines)
    pairs = [(src_vocab.encode(s), trg_vocab.encode(t))
             for s, t in zip(src_lines, trg_lines) if s and t]
    table = train_model1(pairs, iterations=args.iterations)
    write_shortlist_file(args.output, table, src_vocab, trg_vocab, k=args.k)
    logger.info("wrote %d shortlist rows to %s",
                len(table.rows) - (1 if -1 in table.rows else 0), args.output)
    return 0


# ----------------------------------------------------------------------- bench

def _cmd_bench(args) -> int:
    model_dir = load_model_dir(args.model)
    model = model_dir.model
    if args.show_config:
        _print_config(model.config)
        return 0
    if args.quantize == "int8":
        quantize_model(model)
    config = model.config
    rng = np.random.default_rng(args.seed)

    def synth():
        src = rng.integers(4, config.src_vocab_size, size=args.length,
                           dtype=np.int32)[None, :]
        factors = [rng.integers(4, spec.vocab_size, size=args.length,
                                dtype=np.int32)[None, :]
                   for spec in config.source_factor_specs]
        return src, factors

    def run_one() -> None:
        src, factors = synth()
        state = model.decode_init(src, factors, np.array([args.length]))
        prev = np.array([BOS_ID], dtype=np.int64)
        prev_fac = [np.array([4], dtype=np.int64)
                    for _ in config.target_factor_specs]
        for _ in range(args.steps):
            step = model.decode_step(state, prev, prev_fac)
            prev = step.surface.data.argmax(axis=-1).reshape(1)
            prev_fac = [f.data.argmax(axis=-1).reshape(1) for f in step.factors]

    for _ in range(args.warmup):
        run_one()
    start = time.perf_counter()
    for _ in range(args.sentences):
        run_one()
    elapsed = time.perf_counter() - start

    cost = sum(decoder_step_cost(config, t, args.length)
               for t in range(args.steps)) / args.steps
    print(f"sentences_per_sec = {args.sentences / elapsed:.3f}")
    print(f"tokens_per_sec = {args.sentences * args.steps / elapsed:.3f}")
    print(f"decoder_step_cost = {cost:.1f}")
    return 0


# ---------------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skiff",
                     description="Compact neural machine translation engine.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="shard and encode a parallel corpus")
    p.add_argument("-s", "--source", required=True, help="tokenized source file")
    p.add_argument("-t", "--target", required=True, help="tokenized target file")
    p.add_argument("-o", "--output", required=True, help="shard directory to create")
    p.add_argument("--source-factors", type=lambda v: v.split(","),
                   help="comma-separated source factor files")
    p.add_argument("--target-factors", type=lambda v: v.split(","),
                   help="comma-separated target factor files")
    p.add_argument("--num-shards", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN,
                   help="drop pairs with either side longer than this")
    p.add_argument("--min-count", type=int, default=1,
                   help="minimum token count to enter a vocabulary")
    p.set_defaults(func=_cmd_prepare_data)

    p = sub.add_parser("train", help="train a model on prepared shards")
    p.add_argument("-d", "--data", required=True, help="prepared shard directory")
    p.add_argument("-vs", "--validation-source", help="tokenized validation source")
    p.add_argument("-vt", "--validation-target", help="tokenized validation target")
    p.add_argument("-o", "--output", required=True, help="model directory to write")
    p.add_argument("--max-updates", type=int, required=True)
    p.add_argument("--params", help="checkpoint to resume from")
    p.add_argument("--freeze", metavar="PRESET|PATTERNS",
                   help=f"one of {', '.join(FREEZE_PRESETS)} or "
                        "comma-separated glob patterns")
    p.add_argument("--decoder", choices=["self_attention", "ssru"],
                   default="self_attention")
    p.add_argument("--encoder-layers", type=int, default=6)
    p.add_argument("--decoder-layers", type=int, default=6)
    p.add_argument("--d-model", type=int, default=512)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--ff-dim", type=int, default=2048)
    p.add_argument("--max-seq-len", type=int, default=128)
    p.add_argument("--nvs", action="store_true",
                   help="add the encoder-side vocabulary selection head")
    p.add_argument("--batch-tokens", type=int, default=1024)
    p.add_argument("--checkpoint-interval", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=1.0)
    p.add_argument("--warmup-steps", type=int, default=400)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--average-best", type=int, default=8)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--show-config", action="store_true",
                   help="print the resolved model config and exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("translate", help="translate stdin lines to stdout")
    p.add_argument("-m", "--model", required=True, help="model directory")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--beam", type=int, default=1, help="beam size")
    mode.add_argument("--greedy", action="store_true",
                      help="force the dedicated greedy decoder")
    restrict = p.add_mutually_exclusive_group()
    restrict.add_argument("--shortlist", help="lexical shortlist file")
    restrict.add_argument("--nvs-threshold", type=float,
                          help="vocabulary selection probability threshold")
    p.add_argument("--quantize", choices=["int8"],
                   help="run feed-forward layers in int8")
    p.add_argument("--json", action="store_true",
                   help="emit one JSON object per line")
    p.add_argument("--strip-prefix", action="store_true",
                   help="drop forced target prefixes from the output")
    p.add_argument("--prefix-all-chunks", action="store_true",
                   help="apply the target prefix to every chunk of a long input")
    p.add_argument("--length-alpha", type=float, default=1.0,
                   help="length normalization exponent")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--show-config", action="store_true",
                   help="print the loaded model config and exit")
    p.set_defaults(func=_cmd_translate)

    p = sub.add_parser("build-shortlist",
                       help="train word alignments and write a shortlist file")
    p.add_argument("-s", "--source", required=True, help="tokenized source file")
    p.add_argument("-t", "--target", required=True, help="tokenized target file")
    p.add_argument("-o", "--output", required=True, help="shortlist file to write")
    p.add_argument("--k", type=int, default=DEFAULT_K,
                   help="targets kept per source token")
    p.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS,
                   help="expectation-maximization iterations")
    p.set_defaults(func=_cmd_build_shortlist)

    p = sub.add_parser("bench",
                       help="measure batch-1 decoding speed for a model")
    p.add_argument("-m", "--model", required=True, help="model directory")
    p.add_argument("--sentences", type=int, default=16)
    p.add_argument("--length", type=int, default=12, help="source length")
    p.add_argument("--steps", type=int, default=24,
                   help="decode steps per sentence")
    p.add_argument("--warmup", type=int, default=2,
                   help="untimed sentences before measuring")
    p.add_argument("--quantize", choices=["int8"],
                   help="run feed-forward layers in int8")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--show-config", action="store_true",
                   help="print the loaded model config and exit")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="[%(levelname)s] %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError) as e:
        print(f"skiff: error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"skiff: error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"skiff: error: {e}", file=sys.stderr)
        return 2
    except SkiffError as e:
        print(f"skiff: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
