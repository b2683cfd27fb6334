"""Sharded binary training data.

prepare_shards reads parallel text (plus optional factor streams), drops
pairs longer than max_len tokens on either side, builds vocabularies from
the surviving corpus and writes id-encoded binary shards with a JSON
manifest. A pair lands in shard mix(seed, line_index) % num_shards, a
seeded 64-bit hash of the line index, so the split is reproducible and
independent of tokenization. The whole directory appears atomically via a
temp-dir rename.

Shard files carry the magic "SKD1" and a version word, then one record
per sentence: u32 stream count, then per stream u32 length + u32 ids.
Stream order is source, source factors, target, target factors. The
target surface stream ends with EOS; target factor streams start with the
SHIFT label, aligning attribute labels one step behind the surface (the
attributes of token t are predicted at step t + 1).

shard_iterator streams batches while keeping at most one decoded shard in
memory.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .vocab import (EOS_ID, FACTOR_SPECIALS, SHIFT_ID, SPECIALS, Vocabulary,
                    build_vocab)

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"SKD1"
SHARD_VERSION = 1
MANIFEST_FILE = "manifest.json"

DEFAULT_MAX_LEN = 95
_MASK = (1 << 64) - 1


def _mix64(z: int) -> int:
    """splitmix64 finalizer; the documented shard-assignment hash."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def shard_of(seed: int, line_index: int, num_shards: int) -> int:
    return _mix64((seed & _MASK) ^ _mix64(line_index)) % num_shards


def _read_token_lines(path: str | Path) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8") as f:
            return [line.split() for line in f]
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from None


@dataclass
class ShardSet:
    path: Path
    manifest: dict

    @property
    def num_shards(self) -> int:
        return len(self.manifest["shards"])

    @property
    def streams(self) -> list[str]:
        return self.manifest["streams"]

    @property
    def total_sentences(self) -> int:
        return sum(s["sentences"] for s in self.manifest["shards"])

    @classmethod
    def load(cls, path: str | Path) -> "ShardSet":
        path = Path(path)
        manifest_path = path / MANIFEST_FILE
        if not manifest_path.is_file():
            raise DataError(f"{path}: no {MANIFEST_FILE}; not a prepared data directory")
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        if manifest.get("version") != SHARD_VERSION:
            raise DataError(f"{path}: unsupported manifest version {manifest.get('version')}")
        return cls(path, manifest)

    def vocab(self, stream: str) -> Vocabulary:
        return Vocabulary.load(self.path / f"vocab.{stream}.json")

    def read_shard(self, index: int) -> list[list[np.ndarray]]:
        """Decode one shard to per-sentence, per-stream id arrays, after
        verifying its checksum."""
        entry = self.manifest["shards"][index]
        shard_path = self.path / entry["file"]
        with open(shard_path, "rb") as f:
            buf = f.read()
        crc = zlib.crc32(buf)
        if crc != entry["crc32"]:
            raise DataError(
                f"{shard_path}: checksum mismatch (manifest {entry['crc32']}, file {crc})")
        if buf[:4] != SHARD_MAGIC:
            raise DataError(f"{shard_path}: bad magic")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != SHARD_VERSION:
            raise DataError(f"{shard_path}: unsupported shard version {version}")
        n_streams = len(self.streams)
        sentences = []
        off = 8
        for _ in range(entry["sentences"]):
            if off + 4 > len(buf):
                raise DataError(f"{shard_path}: truncated record")
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            if count != n_streams:
                raise DataError(
                    f"{shard_path}: record has {count} streams, manifest says {n_streams}")
            streams = []
            for _ in range(count):
                (length,) = struct.unpack_from("<I", buf, off)
                off += 4
                end = off + 4 * length
                if end > len(buf):
                    raise DataError(f"{shard_path}: truncated record")
                ids = np.frombuffer(buf, dtype="<u4", count=length, offset=off)
                streams.append(ids.astype(np.int32))
                off = end
            sentences.append(streams)
        if off != len(buf):
            raise DataError(f"{shard_path}: trailing bytes after the last record")
        return sentences


def _check_factor_lengths(surface: list[list[str]], factors: list[list[list[str]]],
                          side: str) -> None:
    for f_idx, stream in enumerate(factors):
        for line_no, (surf, fac) in enumerate(zip(surface, stream), 1):
            if len(surf) != len(fac):
                raise DataError(
                    f"line {line_no}: {side} factor stream {f_idx} has {len(fac)} "
                    f"tokens, surface has {len(surf)}")


def prepare_shards(src_path: str | Path, trg_path: str | Path, out_dir: str | Path,
                   source_factor_paths: list[str | Path] | None = None,
                   target_factor_paths: list[str | Path] | None = None,
                   num_shards: int = 1, seed: int = 13,
                   max_len: int = DEFAULT_MAX_LEN,
                   min_count: int = 1, max_size: int | None = None) -> ShardSet:
    """Filter, encode and shard a parallel corpus. Vocabularies are built
    from the pairs that survive filtering."""
    if num_shards < 1:
        raise ConfigError(f"num_shards must be at least 1, got {num_shards}")
    if max_len < 1:
        raise ConfigError(f"max_len must be at least 1, got {max_len}")
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise DataError(f"{out_dir}: output directory already exists")

    src_lines = _read_token_lines(src_path)
    trg_lines = _read_token_lines(trg_path)
    if len(src_lines) != len(trg_lines):
        raise DataError(
            f"line count mismatch: {src_path} has {len(src_lines)} lines, "
            f"{trg_path} has {len(trg_lines)}")
    src_factor_lines = [_read_token_lines(p) for p in source_factor_paths or []]
    trg_factor_lines = [_read_token_lines(p) for p in target_factor_paths or []]
    for p, lines in zip(list(source_factor_paths or []) + list(target_factor_paths or []),
                        src_factor_lines + trg_factor_lines):
        if len(lines) != len(src_lines):
            raise DataError(
                f"line count mismatch: {p} has {len(lines)} lines, "
                f"{src_path} has {len(src_lines)}")
    _check_factor_lengths(src_lines, src_factor_lines, "source")
    _check_factor_lengths(trg_lines, trg_factor_lines, "target")

    kept: list[int] = []
    for i, (s, t) in enumerate(zip(src_lines, trg_lines)):
        if not s or not t:
            continue
        if len(s) > max_len or len(t) > max_len:
            continue
        kept.append(i)
    if not kept:
        raise InputError("no sentence pairs survive filtering")
    dropped = len(src_lines) - len(kept)
    logger.info("prepare: kept %d pairs, dropped %d (max_len %d)",
                len(kept), dropped, max_len)

    src_vocab = build_vocab((src_lines[i] for i in kept),
                            min_count=min_count, max_size=max_size)
    trg_vocab = build_vocab((trg_lines[i] for i in kept),
                            min_count=min_count, max_size=max_size)
    src_factor_vocabs = [build_vocab((lines[i] for i in kept), min_count=min_count)
                         for lines in src_factor_lines]
    trg_factor_vocabs = [build_vocab((lines[i] for i in kept),
                                     specials=FACTOR_SPECIALS, min_count=min_count)
                         for lines in trg_factor_lines]

    streams = (["src"] + [f"src_factor{i}" for i in range(len(src_factor_lines))]
               + ["trg"] + [f"trg_factor{i}" for i in range(len(trg_factor_lines))])

    def encode_line(i: int) -> list[list[int]]:
        encoded = [src_vocab.encode(src_lines[i])]
        for vocab, lines in zip(src_factor_vocabs, src_factor_lines):
            encoded.append(vocab.encode(lines[i]))
        encoded.append(trg_vocab.encode(trg_lines[i]) + [EOS_ID])
        for vocab, lines in zip(trg_factor_vocabs, trg_factor_lines):
            encoded.append([SHIFT_ID] + vocab.encode(lines[i]))
        return encoded

    buckets: list[list[int]] = [[] for _ in range(num_shards)]
    for i in kept:
        buckets[shard_of(seed, i, num_shards)].append(i)

    tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=out_dir.name + ".part."))
    try:
        shard_entries = []
        for shard_idx, members in enumerate(buckets):
            name = f"shard.{shard_idx:05d}.bin"
            parts = [SHARD_MAGIC, struct.pack("<I", SHARD_VERSION)]
            for i in members:  # line order within each shard
                encoded = encode_line(i)
                parts.append(struct.pack("<I", len(encoded)))
                for ids in encoded:
                    parts.append(struct.pack("<I", len(ids)))
                    parts.append(np.asarray(ids, dtype="<u4").tobytes())
            payload = b"".join(parts)
            (tmp / name).write_bytes(payload)
            shard_entries.append({"file": name, "sentences": len(members),
                                  "crc32": zlib.crc32(payload)})
        manifest = {
            "version": SHARD_VERSION,
            "seed": seed,
            "num_shards": num_shards,
            "max_len": max_len,
            "streams": streams,
            "kept": len(kept),
            "dropped": dropped,
            "shards": shard_entries,
        }
        with open(tmp / MANIFEST_FILE, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        src_vocab.save(tmp / "vocab.src.json")
        trg_vocab.save(tmp / "vocab.trg.json")
        for i, v in enumerate(src_factor_vocabs):
            v.save(tmp / f"vocab.src_factor{i}.json")
        for i, v in enumerate(trg_factor_vocabs):
            v.save(tmp / f"vocab.trg_factor{i}.json")
        os.rename(tmp, out_dir)
    except BaseException:
        for p in tmp.glob("*"):
            p.unlink()
        if tmp.exists():
            tmp.rmdir()
        raise
    return ShardSet.load(out_dir)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded id arrays for one training step. Factor streams share their
    surface stream's lengths by construction."""
    src: np.ndarray                 # (B, Ls) int32, PAD past src_lengths
    src_factors: list[np.ndarray]   # each (B, Ls)
    src_lengths: np.ndarray         # (B,)
    trg: np.ndarray                 # (B, Lt), ends with EOS per sentence
    trg_factors: list[np.ndarray]   # each (B, Lt), starts with SHIFT
    trg_lengths: np.ndarray         # (B,)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    def nbytes(self) -> int:
        arrays = [self.src, self.src_lengths, self.trg, self.trg_lengths,
                  *self.src_factors, *self.trg_factors]
        return sum(a.nbytes for a in arrays)


def _pad_block(rows: list[np.ndarray]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.int32)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def pack_batches(sentences: list[list[np.ndarray]], batch_tokens: int,
                 n_src_factors: int, n_trg_factors: int) -> list[Batch]:
    """Bucket sentences by length and group them so a batch holds at most
    batch_tokens padded target tokens; a longer sentence forms a singleton
    batch."""
    if batch_tokens < 1:
        raise ConfigError(f"batch_tokens must be at least 1, got {batch_tokens}")
    trg_idx = 1 + n_src_factors
    order = sorted(range(len(sentences)),
                   key=lambda i: (len(sentences[i][trg_idx]),
                                  len(sentences[i][0]), i))
    groups: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        t_len = len(sentences[i][trg_idx])
        new_width = max(width, t_len)
        if current and new_width * (len(current) + 1) > batch_tokens:
            groups.append(current)
            current, width = [], 0
            new_width = t_len
        current.append(i)
        width = new_width
    if current:
        groups.append(current)

    batches = []
    for group in groups:
        rows = [sentences[i] for i in group]
        batches.append(Batch(
            src=_pad_block([r[0] for r in rows]),
            src_factors=[_pad_block([r[1 + f] for r in rows])
                         for f in range(n_src_factors)],
            src_lengths=np.array([len(r[0]) for r in rows], dtype=np.int32),
            trg=_pad_block([r[trg_idx] for r in rows]),
            trg_factors=[_pad_block([r[trg_idx + 1 + f] for r in rows])
                         for f in range(n_trg_factors)],
            trg_lengths=np.array([len(r[trg_idx]) for r in rows], dtype=np.int32),
        ))
    return batches


class ShardIterator:
    """One epoch over a ShardSet with a single shard resident at a time.

    Shard visit order is shuffled by epoch_seed. Within a shard, sentences
    are bucketed by length and grouped so a batch holds at most
    batch_tokens padded target tokens (a longer sentence forms a singleton
    batch). max_resident_bytes tracks the high-water mark of decoded shard
    plus current batch.
    """

    def __init__(self, shard_set: ShardSet, batch_tokens: int, epoch_seed: int = 0):
        if batch_tokens < 1:
            raise ConfigError(f"batch_tokens must be at least 1, got {batch_tokens}")
        self.shard_set = shard_set
        self.batch_tokens = batch_tokens
        self.epoch_seed = epoch_seed
        self.max_resident_bytes = 0
        names = shard_set.streams
        self._n_src_factors = sum(1 for n in names if n.startswith("src_factor"))
        self._n_trg_factors = sum(1 for n in names if n.startswith("trg_factor"))

    def __iter__(self):
        rng = np.random.default_rng(self.epoch_seed)
        shard_order = rng.permutation(self.shard_set.num_shards)
        for shard_idx in shard_order:
            sentences = self.shard_set.read_shard(int(shard_idx))
            if not sentences:
                continue
            shard_bytes = sum(s.nbytes for streams in sentences for s in streams)
            for batch in pack_batches(sentences, self.batch_tokens,
                                      self._n_src_factors, self._n_trg_factors):
                self.max_resident_bytes = max(self.max_resident_bytes,
                                              shard_bytes + batch.nbytes())
                yield batch
            del sentences
