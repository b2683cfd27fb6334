"""Sharded data preparation and iteration.

The central oracle is decode-and-compare: read every shard back, map ids
to tokens through the saved vocabularies and demand the exact multiset of
filtered input pairs. Byte-level determinism is checked by preparing the
same corpus twice and comparing files.
"""

import json
import zlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from skiff.data import (DEFAULT_MAX_LEN, MANIFEST_FILE, Batch, ShardIterator,
                        ShardSet, prepare_shards, shard_of)
from skiff.errors import ConfigError, DataError, InputError
from skiff.vocab import EOS_ID, SHIFT_ID, build_vocab


def write_lines(path: Path, lines: list[str]) -> Path:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def make_corpus(n: int, seed: int, max_words: int = 12) -> tuple[list[str], list[str]]:
    rng = np.random.default_rng(seed)
    src_words = [f"s{i}" for i in range(40)]
    trg_words = [f"t{i}" for i in range(40)]
    src, trg = [], []
    for _ in range(n):
        ls = int(rng.integers(1, max_words + 1))
        lt = int(rng.integers(1, max_words + 1))
        src.append(" ".join(rng.choice(src_words, size=ls)))
        trg.append(" ".join(rng.choice(trg_words, size=lt)))
    return src, trg


def prepare_simple(tmp_path: Path, src: list[str], trg: list[str], name: str = "data",
                   **kwargs) -> ShardSet:
    s = write_lines(tmp_path / f"{name}.src", src)
    t = write_lines(tmp_path / f"{name}.trg", trg)
    return prepare_shards(s, t, tmp_path / name, **kwargs)


def decode_all(shard_set: ShardSet) -> list[tuple[str, str]]:
    """All (src text, trg text) pairs across shards, via the saved vocabs."""
    sv = shard_set.vocab("src")
    tv = shard_set.vocab("trg")
    trg_idx = shard_set.streams.index("trg")
    pairs = []
    for i in range(shard_set.num_shards):
        for streams in shard_set.read_shard(i):
            src_text = " ".join(sv.decode(streams[0].tolist()))
            trg_ids = streams[trg_idx].tolist()
            assert trg_ids[-1] == EOS_ID
            trg_text = " ".join(tv.decode(trg_ids[:-1]))
            pairs.append((src_text, trg_text))
    return pairs


# ------------------------------------------------------------ vocabulary

def test_build_vocab_frequency_then_lexicographic():
    v = build_vocab([["b", "a", "a", "c", "b", "a"]])
    # a(3) then b(2) then c(1), after the four reserved entries
    assert v.to_id("a") == 4 and v.to_id("b") == 5 and v.to_id("c") == 6


def test_build_vocab_tie_breaks_lexicographically():
    v = build_vocab([["z", "m", "a"]])
    assert v.to_id("a") == 4 and v.to_id("m") == 5 and v.to_id("z") == 6


def test_build_vocab_min_count_drops_rare_tokens():
    v = build_vocab([["a", "a", "b"]], min_count=2)
    assert v.to_id("a") == 4
    assert v.to_id("b") == 1  # unk


def test_build_vocab_empty_corpus_is_an_input_error():
    with pytest.raises(InputError):
        build_vocab([])
    with pytest.raises(InputError):
        build_vocab([[], []])


# --------------------------------------------------------- shard assignment

def test_shard_assignment_is_deterministic_and_seeded():
    a = [shard_of(13, i, 4) for i in range(100)]
    b = [shard_of(13, i, 4) for i in range(100)]
    assert a == b
    c = [shard_of(14, i, 4) for i in range(100)]
    assert a != c
    assert all(0 <= x < 4 for x in a)


def test_shard_assignment_ignores_content(tmp_path):
    src1, trg1 = make_corpus(200, seed=1)
    src2, trg2 = make_corpus(200, seed=2)
    s1 = prepare_simple(tmp_path, src1, trg1, name="one", num_shards=4, seed=7)
    s2 = prepare_simple(tmp_path, src2, trg2, name="two", num_shards=4, seed=7)
    counts1 = [e["sentences"] for e in s1.manifest["shards"]]
    counts2 = [e["sentences"] for e in s2.manifest["shards"]]
    assert counts1 == counts2  # same line indices, same seed, same split


# ------------------------------------------------------------- preparation

def test_thousand_pairs_four_shards_multiset_roundtrip(tmp_path):
    src, trg = make_corpus(1000, seed=3)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=4, seed=13)
    counts = [e["sentences"] for e in shard_set.manifest["shards"]]
    assert len(counts) == 4
    assert sum(counts) == 1000
    assert Counter(decode_all(shard_set)) == Counter(zip(src, trg))


def test_single_shard_preserves_input_order(tmp_path):
    src, trg = make_corpus(60, seed=4)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=1)
    assert decode_all(shard_set) == list(zip(src, trg))


def test_same_seed_rerun_is_byte_identical(tmp_path):
    src, trg = make_corpus(300, seed=5)
    a = prepare_simple(tmp_path, src, trg, name="run_a", num_shards=4, seed=9)
    b = prepare_simple(tmp_path, src, trg, name="run_b", num_shards=4, seed=9)
    files_a = sorted(p.name for p in a.path.iterdir())
    files_b = sorted(p.name for p in b.path.iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (a.path / name).read_bytes() == (b.path / name).read_bytes(), name


def test_max_len_boundary_drops_96_keeps_95(tmp_path):
    long_src = " ".join(["w"] * 96)
    edge_src = " ".join(["w"] * 95)
    src = [long_src, edge_src, "w w"]
    trg = ["x", "x", " ".join(["x"] * 96)]
    shard_set = prepare_simple(tmp_path, src, trg)
    assert shard_set.manifest["max_len"] == DEFAULT_MAX_LEN == 95
    pairs = decode_all(shard_set)
    assert pairs == [(edge_src, "x")]  # either side over 95 excludes the pair
    assert shard_set.manifest["dropped"] == 2


def test_empty_lines_are_dropped(tmp_path):
    shard_set = prepare_simple(tmp_path, ["a b", "", "c"], ["x", "y", ""])
    assert decode_all(shard_set) == [("a b", "x")]


def test_nothing_survives_filtering_is_an_input_error(tmp_path):
    with pytest.raises(InputError):
        prepare_simple(tmp_path, [" ".join(["w"] * 50)], ["x"], max_len=10)


def test_line_count_mismatch_reports_both_counts(tmp_path):
    s = write_lines(tmp_path / "a.src", ["a", "b", "c"])
    t = write_lines(tmp_path / "a.trg", ["x", "y"])
    with pytest.raises(DataError, match=r"3.*2|2.*3"):
        prepare_shards(s, t, tmp_path / "out")


def test_factor_length_mismatch_reports_line_number(tmp_path):
    s = write_lines(tmp_path / "b.src", ["a b", "c d"])
    t = write_lines(tmp_path / "b.trg", ["x", "y"])
    f = write_lines(tmp_path / "b.fac", ["U L", "U"])
    with pytest.raises(DataError, match="line 2"):
        prepare_shards(s, t, tmp_path / "out", source_factor_paths=[f])


def test_existing_output_directory_is_refused(tmp_path):
    s = write_lines(tmp_path / "c.src", ["a"])
    t = write_lines(tmp_path / "c.trg", ["x"])
    (tmp_path / "out").mkdir()
    with pytest.raises(DataError, match="exists"):
        prepare_shards(s, t, tmp_path / "out")


def test_bad_num_shards_and_max_len_are_config_errors(tmp_path):
    s = write_lines(tmp_path / "d.src", ["a"])
    t = write_lines(tmp_path / "d.trg", ["x"])
    with pytest.raises(ConfigError):
        prepare_shards(s, t, tmp_path / "out", num_shards=0)
    with pytest.raises(ConfigError):
        prepare_shards(s, t, tmp_path / "out2", max_len=0)


# ----------------------------------------------------------- stream layout

def test_stream_layout_with_factors(tmp_path):
    s = write_lines(tmp_path / "e.src", ["aa bb cc"])
    t = write_lines(tmp_path / "e.trg", ["xx yy"])
    sf = write_lines(tmp_path / "e.sf", ["P Q P"])
    tf = write_lines(tmp_path / "e.tf", ["U L"])
    shard_set = prepare_shards(s, t, tmp_path / "out",
                               source_factor_paths=[sf], target_factor_paths=[tf])
    assert shard_set.streams == ["src", "src_factor0", "trg", "trg_factor0"]
    (streams,) = shard_set.read_shard(0)
    src_ids, sf_ids, trg_ids, tf_ids = streams
    assert len(src_ids) == len(sf_ids) == 3
    assert trg_ids[-1] == EOS_ID and len(trg_ids) == 3
    # target factor stream: shift label first, then one label per token
    assert tf_ids[0] == SHIFT_ID and len(tf_ids) == len(trg_ids)
    tfv = shard_set.vocab("trg_factor0")
    assert tfv.decode(tf_ids[1:].tolist()) == ["U", "L"]


# ---------------------------------------------------------------- iterator

def test_epoch_yields_every_pair_exactly_once(tmp_path):
    src, trg = make_corpus(250, seed=6)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=4)
    sv, tv = shard_set.vocab("src"), shard_set.vocab("trg")
    seen: Counter = Counter()
    for batch in ShardIterator(shard_set, batch_tokens=64, epoch_seed=1):
        assert isinstance(batch, Batch)
        for row in range(batch.size):
            ls = int(batch.src_lengths[row])
            lt = int(batch.trg_lengths[row])
            s_text = " ".join(sv.decode(batch.src[row, :ls].tolist()))
            t_text = " ".join(tv.decode(batch.trg[row, :lt - 1].tolist()))
            seen[(s_text, t_text)] += 1
            # padding is zeros beyond the stated lengths
            assert not batch.src[row, ls:].any()
            assert not batch.trg[row, lt:].any()
    assert seen == Counter(zip(src, trg))


def test_batches_respect_target_token_budget(tmp_path):
    src, trg = make_corpus(300, seed=7)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=3)
    budget = 48
    for batch in ShardIterator(shard_set, batch_tokens=budget, epoch_seed=0):
        padded = batch.size * batch.trg.shape[1]
        assert padded <= budget or batch.size == 1


def test_tiny_budget_degrades_to_singletons(tmp_path):
    src, trg = make_corpus(40, seed=8)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=2)
    batches = list(ShardIterator(shard_set, batch_tokens=1, epoch_seed=0))
    assert all(b.size == 1 for b in batches)
    assert len(batches) == 40


def test_same_epoch_seed_reproduces_the_batch_sequence(tmp_path):
    src, trg = make_corpus(120, seed=9)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=4)

    def signature(epoch_seed):
        sig = []
        for b in ShardIterator(shard_set, batch_tokens=32, epoch_seed=epoch_seed):
            sig.append((b.src.tobytes(), b.trg.tobytes()))
        return sig

    assert signature(5) == signature(5)
    assert signature(5) != signature(6)  # shard order moves with the seed


def test_corrupt_shard_is_reported_by_name(tmp_path):
    src, trg = make_corpus(50, seed=10)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=2)
    victim = shard_set.path / shard_set.manifest["shards"][1]["file"]
    raw = bytearray(victim.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(DataError, match=victim.name):
        shard_set.read_shard(1)


def test_manifest_checksum_guards_truncation(tmp_path):
    src, trg = make_corpus(50, seed=11)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=1)
    victim = shard_set.path / shard_set.manifest["shards"][0]["file"]
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(DataError, match="checksum"):
        shard_set.read_shard(0)


def test_load_rejects_directories_without_manifest(tmp_path):
    (tmp_path / "plain").mkdir()
    with pytest.raises(DataError):
        ShardSet.load(tmp_path / "plain")


def test_high_water_memory_tracks_one_shard_plus_one_batch(tmp_path):
    src, trg = make_corpus(800, seed=12)
    sharded = prepare_simple(tmp_path, src, trg, name="eight", num_shards=8)
    whole = prepare_simple(tmp_path, src, trg, name="one", num_shards=1)

    def run(shard_set):
        it = ShardIterator(shard_set, batch_tokens=64, epoch_seed=0)
        max_batch = 0
        for b in it:
            max_batch = max(max_batch, b.nbytes())
        shard_bytes = [sum(s.nbytes for streams in shard_set.read_shard(i)
                           for s in streams) for i in range(shard_set.num_shards)]
        return it.max_resident_bytes, max(shard_bytes), max_batch

    high8, biggest_shard8, batch8 = run(sharded)
    high1, whole_corpus, batch1 = run(whole)
    assert high8 <= biggest_shard8 + batch8  # never more than one shard resident
    assert high1 <= whole_corpus + batch1
    # with 8 shards the high-water mark drops to roughly an eighth
    assert high8 < high1 / 4


def test_checksums_in_manifest_match_zlib_crc32(tmp_path):
    src, trg = make_corpus(30, seed=14)
    shard_set = prepare_simple(tmp_path, src, trg, num_shards=2)
    for entry in shard_set.manifest["shards"]:
        payload = (shard_set.path / entry["file"]).read_bytes()
        assert entry["crc32"] == zlib.crc32(payload)
    # manifest is valid JSON with the documented keys
    manifest = json.loads((shard_set.path / MANIFEST_FILE).read_text())
    assert {"version", "seed", "num_shards", "streams", "shards"} <= manifest.keys()
