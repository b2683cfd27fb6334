"""Aligner and shortlist tests, checked against a dense EM oracle."""

import numpy as np
import pytest

from skiff.errors import ConfigError, DataError, InputError
from skiff.shortlist import (NULL_ID, LexicalTable, Shortlist, extract_shortlist,
                             read_shortlist_file, train_model1,
                             write_shortlist_file)
from skiff.vocab import SPECIALS, Vocabulary


def dense_model1_oracle(pairs, iterations):
    """Textbook dense EM over explicit count matrices."""
    src_ids = sorted({e for s, _ in pairs for e in s}) + [NULL_ID]
    trg_ids = sorted({f for _, t in pairs for f in t})
    ei = {e: i for i, e in enumerate(src_ids)}
    fi = {f: i for i, f in enumerate(trg_ids)}
    t = np.full((len(src_ids), len(trg_ids)), 1.0 / len(trg_ids))
    for _ in range(iterations):
        cnt = np.zeros_like(t)
        tot = np.zeros(len(src_ids))
        for src, trg in pairs:
            ctx = list(src) + [NULL_ID]
            for f in trg:
                denom = sum(t[ei[e], fi[f]] for e in ctx)
                for e in ctx:
                    share = t[ei[e], fi[f]] / denom
                    cnt[ei[e], fi[f]] += share
                    tot[ei[e]] += share
        t = cnt / tot[:, None]
    return t, ei, fi


def random_corpus(rng, n_pairs=12, vocab=8):
    pairs = []
    for _ in range(n_pairs):
        ls, lt = rng.integers(1, 5, size=2)
        pairs.append((rng.integers(0, vocab, size=ls).tolist(),
                      rng.integers(0, vocab, size=lt).tolist()))
    return pairs


class TestModel1:
    def test_single_pair_symmetry(self):
        # One pair, one token each: the source word and NULL are
        # indistinguishable, and each row must still normalize to one.
        table = train_model1([([4], [7])], iterations=1)
        assert table.prob(4, 7) == table.prob(NULL_ID, 7)
        assert abs(sum(table.row(4).values()) - 1.0) < 1e-9
        table.validate()

    def test_four_pair_corpus_matches_dense_oracle(self):
        a, b, x, y = 4, 5, 6, 7
        pairs = [([a], [x]), ([a], [x]), ([a], [x]), ([a, b], [x, y])]
        table = train_model1(pairs, iterations=5)
        dense, ei, fi = dense_model1_oracle(pairs, iterations=5)
        for e in (a, b, NULL_ID):
            for f in (x, y):
                assert abs(table.prob(e, f) - dense[ei[e], fi[f]]) < 1e-9
        row = table.row(a)
        assert max(row, key=row.get) == x

    def test_log_likelihood_non_decreasing(self):
        for seed in range(10):
            rng = np.random.default_rng(200 + seed)
            table = train_model1(random_corpus(rng), iterations=6)
            lls = table.log_likelihoods
            assert len(lls) == 6
            for earlier, later in zip(lls, lls[1:]):
                assert later >= earlier - 1e-9

    def test_rows_normalize_after_training(self):
        rng = np.random.default_rng(33)
        table = train_model1(random_corpus(rng), iterations=3)
        table.validate()

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            train_model1([], iterations=1)
        with pytest.raises(InputError):
            train_model1([([], [])], iterations=1)

    def test_iteration_bound(self):
        with pytest.raises(ConfigError):
            train_model1([([1], [2])], iterations=0)

    def test_deterministic(self):
        rng = np.random.default_rng(77)
        pairs = random_corpus(rng)
        t1 = train_model1(pairs, iterations=4)
        t2 = train_model1(pairs, iterations=4)
        assert t1.rows == t2.rows
        assert t1.log_likelihoods == t2.log_likelihoods


class TestExtract:
    def _hand_table(self):
        table = LexicalTable()
        table.rows = {
            3: {10: 0.7, 11: 0.2, 12: 0.1},
            4: {10: 0.5, 11: 0.5},
            NULL_ID: {10: 1.0},
        }
        return table

    def test_large_k_keeps_full_rows(self):
        out = extract_shortlist(self._hand_table(), k=100)
        assert out[3] == [10, 11, 12]

    def test_truncation(self):
        out = extract_shortlist(self._hand_table(), k=2)
        assert out[3] == [10, 11]

    def test_tie_breaks_on_lower_id(self):
        out = extract_shortlist(self._hand_table(), k=1)
        assert out[4] == [10]

    def test_null_row_dropped(self):
        out = extract_shortlist(self._hand_table(), k=5)
        assert NULL_ID not in out

    def test_prefix_closed_in_k(self):
        rng = np.random.default_rng(55)
        table = train_model1(random_corpus(rng, n_pairs=20), iterations=3)
        small = extract_shortlist(table, k=3)
        large = extract_shortlist(table, k=6)
        for src_id, row in small.items():
            assert large[src_id][:len(row)] == row

    def test_k_bound(self):
        with pytest.raises(ConfigError):
            extract_shortlist(self._hand_table(), k=0)


class TestShortlistFile:
    def _vocabs(self):
        src = Vocabulary(SPECIALS + ["alef", "bet"])
        trg = Vocabulary(SPECIALS + ["ex", "why", "zed"])
        return src, trg

    def test_round_trip(self, tmp_path):
        src, trg = self._vocabs()
        table = LexicalTable()
        table.rows = {4: {4: 0.75, 5: 0.25}, 5: {6: 1.0}, NULL_ID: {4: 1.0}}
        path = tmp_path / "short.tsv"
        write_shortlist_file(path, table, src, trg, k=10)
        raw = read_shortlist_file(path)
        assert raw == {"alef": [("ex", 0.75), ("why", 0.25)], "bet": [("zed", 1.0)]}

    def test_rewrite_is_byte_identical(self, tmp_path):
        src, trg = self._vocabs()
        rng = np.random.default_rng(3)
        table = train_model1([([4, 5], [4, 5]), ([4], [4]), ([5], [6, 5])], iterations=5)
        a = tmp_path / "a.tsv"
        write_shortlist_file(a, table, src, trg, k=5)
        raw = read_shortlist_file(a)
        b = tmp_path / "b.tsv"
        with open(b, "w", encoding="utf-8") as f:
            for token in sorted(raw):
                entries = " ".join(f"{t}:{p:.9g}" for t, p in raw[token])
                f.write(f"{token}\t{entries}\n")
        assert a.read_bytes() == b.read_bytes()

    def test_malformed_lines(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("alef no_tab_here\n")
        with pytest.raises(DataError):
            read_shortlist_file(path)
        path.write_text("alef\tex:notafloat\n")
        with pytest.raises(DataError):
            read_shortlist_file(path)
        path.write_text("alef\tex:0.5\nalef\twhy:0.5\n")
        with pytest.raises(DataError):
            read_shortlist_file(path)

    def test_id_space_lookup(self, tmp_path):
        src, trg = self._vocabs()
        path = tmp_path / "short.tsv"
        path.write_text("alef\tex:0.9 why:0.1\nbet\tzed:0.8 ex:0.2\nghost\twhy:1"
                        "\nalso\tmissing:1\n")
        sl = Shortlist.from_file(path, src, trg)
        # "ghost"/"also" are not in the source vocabulary; "missing" not in
        # the target one.
        assert set(sl.rows) == {4, 5}
        np.testing.assert_array_equal(sl.lookup([4]), [4, 5])
        np.testing.assert_array_equal(sl.lookup([4, 5]), [4, 5, 6])
        np.testing.assert_array_equal(sl.lookup([9]), [])
