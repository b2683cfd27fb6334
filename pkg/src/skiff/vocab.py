"""Token vocabularies with fixed special symbols.

Ids 0..3 are pinned for every stream: PAD, UNK, BOS, EOS. Target factor
streams additionally pin id 4 for the shift marker that pads the first
decoding step, where no previous surface token exists yet to attach an
attribute to.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

from .errors import DataError, InputError

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
SHIFT_ID = 4

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
SHIFT = "<shift>"

SPECIALS = [PAD, UNK, BOS, EOS]
FACTOR_SPECIALS = [PAD, UNK, BOS, EOS, SHIFT]


class Vocabulary:
    """Bidirectional token/id map. Ids are dense, specials come first."""

    def __init__(self, tokens: list[str]):
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def to_id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def to_token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self._tokens, f, ensure_ascii=False, indent=0)
            f.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = json.load(f)
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise DataError(f"{path}: vocabulary file must hold a list of strings")
        required = tokens[:4]
        if required != SPECIALS:
            raise DataError(f"{path}: first four entries must be {SPECIALS}")
        return cls(tokens)


def build_vocab(token_streams, specials: list[str] | None = None,
                min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Count tokens over an iterable of token lists and keep the most frequent.

    Ties at equal count break lexicographically so the same corpus always
    produces the same vocabulary.
    """
    counts: Counter[str] = Counter()
    for tokens in token_streams:
        counts.update(tokens)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    specials = list(SPECIALS if specials is None else specials)
    for s in specials:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_count]
    if max_size is not None:
        budget = max_size - len(specials)
        if budget < 0:
            raise DataError(f"max vocabulary size {max_size} cannot fit the specials")
        kept = kept[:budget]
    return Vocabulary(specials + kept)
