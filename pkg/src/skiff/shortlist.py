"""Lexical translation probabilities and top-k shortlists.

A small IBM Model 1 aligner estimates p(target | source) over id-encoded
sentence pairs with expectation maximization: the E-step splits each
target token's unit count over the source tokens of its sentence (plus a
NULL word) in proportion to the current probabilities, the M-step
renormalizes per source id. Entries below 1e-9 are pruned after each
M-step to bound table growth.

The resulting table backs decoder vocabulary shortlists: for each source
id, the k most probable target ids. The text file format keeps one line
per source token, `source<TAB>target:prob target:prob ...`, targets in
descending probability.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

NULL_ID = -1

PRUNE_THRESHOLD = 1e-9

DEFAULT_K = 200
DEFAULT_ITERATIONS = 5


class LexicalTable:
    """Sparse p(target | source) rows, including a row for the NULL word."""

    def __init__(self):
        self.rows: dict[int, dict[int, float]] = {}
        self.log_likelihoods: list[float] = []

    def prob(self, src_id: int, trg_id: int) -> float:
        return self.rows.get(src_id, {}).get(trg_id, 0.0)

    def row(self, src_id: int) -> dict[int, float]:
        return dict(self.rows.get(src_id, {}))

    def sources(self) -> list[int]:
        return sorted(self.rows)

    def validate(self) -> None:
        for src_id, row in self.rows.items():
            total = sum(row.values())
            if abs(total - 1.0) > 1e-6:
                raise DataError(f"row for source id {src_id} sums to {total}")
            if any(p < 0 for p in row.values()):
                raise DataError(f"row for source id {src_id} holds a negative probability")


def _corpus_log_likelihood(pairs, table: LexicalTable) -> float:
    ll = 0.0
    for src, trg in pairs:
        ctx = list(src) + [NULL_ID]
        norm = math.log(len(ctx))
        for f in trg:
            total = sum(table.prob(e, f) for e in ctx)
            if total <= 0.0:
                return float("-inf")
            ll += math.log(total) - norm
    return ll


def train_model1(pairs: list[tuple[list[int], list[int]]],
                 iterations: int = DEFAULT_ITERATIONS) -> LexicalTable:
    """EM over id-encoded pairs. Deterministic given corpus order; the
    per-iteration corpus log-likelihood lands in table.log_likelihoods."""
    if iterations < 1:
        raise ConfigError(f"iterations must be at least 1, got {iterations}")
    pairs = [(list(s), list(t)) for s, t in pairs]
    if not pairs or all(not s or not t for s, t in pairs):
        raise InputError("alignment corpus is empty")

    target_types = sorted({f for _, trg in pairs for f in trg})
    uniform = 1.0 / len(target_types)
    table = LexicalTable()
    for src, trg in pairs:
        for e in list(src) + [NULL_ID]:
            row = table.rows.setdefault(e, {})
            for f in trg:
                row[f] = uniform

    for it in range(iterations):
        counts: dict[int, dict[int, float]] = defaultdict(lambda: defaultdict(float))
        totals: dict[int, float] = defaultdict(float)
        for src, trg in pairs:
            ctx = list(src) + [NULL_ID]
            for f in trg:
                probs = [table.prob(e, f) for e in ctx]
                denom = sum(probs)
                for e, p in zip(ctx, probs):
                    share = p / denom
                    counts[e][f] += share
                    totals[e] += share
        table.rows = {}
        for e, row in counts.items():
            total = totals[e]
            kept = {f: c / total for f, c in row.items() if c / total >= PRUNE_THRESHOLD}
            table.rows[e] = kept
        ll = _corpus_log_likelihood(pairs, table)
        table.log_likelihoods.append(ll)
        logger.info("model1 iteration %d/%d: log-likelihood %.6f", it + 1, iterations, ll)
    return table


def extract_shortlist(table: LexicalTable, k: int = DEFAULT_K) -> dict[int, list[int]]:
    """Per source id, the k most probable target ids, descending; ties
    break on the lower id. The NULL row never appears in a shortlist."""
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    out: dict[int, list[int]] = {}
    for src_id, row in table.rows.items():
        if src_id == NULL_ID:
            continue
        ranked = sorted(row.items(), key=lambda kv: (-kv[1], kv[0]))
        out[src_id] = [t for t, _ in ranked[:k]]
    return out


# -------------------------------------------------------------------- file

def write_shortlist_file(path: str | Path, table: LexicalTable,
                         src_vocab: Vocabulary, trg_vocab: Vocabulary,
                         k: int = DEFAULT_K) -> None:
    """One line per source token, sorted by token, targets by descending
    probability (ties on the lower id), probabilities printed %.9g."""
    lines = []
    for src_id, row in table.rows.items():
        if src_id == NULL_ID:
            continue
        token = src_vocab.to_token(src_id)
        ranked = sorted(row.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
        entries = " ".join(f"{trg_vocab.to_token(t)}:{p:.9g}" for t, p in ranked)
        lines.append((token, entries))
    lines.sort(key=lambda kv: kv[0])
    with open(path, "w", encoding="utf-8") as f:
        for token, entries in lines:
            f.write(f"{token}\t{entries}\n")


def read_shortlist_file(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    out: dict[str, list[tuple[str, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'source<TAB>entries'")
            token, _, rest = line.partition("\t")
            if token in out:
                raise DataError(f"{path}:{lineno}: duplicate source token {token!r}")
            entries = []
            for item in rest.split(" ") if rest else []:
                trg, sep, prob = item.rpartition(":")
                if not sep or not trg:
                    raise DataError(f"{path}:{lineno}: bad entry {item!r}")
                try:
                    entries.append((trg, float(prob)))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad probability in {item!r}") from None
            out[token] = entries
    return out


class Shortlist:
    """Id-space shortlist for a particular model vocabulary pair."""

    def __init__(self, rows: dict[int, np.ndarray]):
        self.rows = rows

    @classmethod
    def from_file(cls, path: str | Path, src_vocab: Vocabulary,
                  trg_vocab: Vocabulary) -> "Shortlist":
        """Tokens unknown to either model vocabulary are dropped: the file
        may come from a differently-built corpus run."""
        raw = read_shortlist_file(path)
        rows: dict[int, np.ndarray] = {}
        dropped = 0
        for token, entries in raw.items():
            if token not in src_vocab:
                dropped += 1
                continue
            ids = [trg_vocab.to_id(t) for t, _ in entries if t in trg_vocab]
            rows[src_vocab.to_id(token)] = np.asarray(sorted(set(ids)), dtype=np.int64)
        if dropped:
            logger.info("shortlist: dropped %d source tokens unknown to the model", dropped)
        return cls(rows)

    def lookup(self, src_ids) -> np.ndarray:
        """Union of the rows for the given source ids."""
        parts = [self.rows[i] for i in set(int(i) for i in src_ids) if i in self.rows]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))
