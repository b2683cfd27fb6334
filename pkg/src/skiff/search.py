"""Inference-time sequence generation.

Two search implementations share one contract: a dedicated greedy decoder
with no hypothesis bookkeeping, and a beam decoder that scores hypotheses
by accumulated surface log-probability. Target factor streams never enter
the beam score; each is chosen greedily per step, so beam size 1
reproduces greedy output token for token. Ties break toward the lowest
token id, then the lowest parent index.

Long inputs are split into chunks translated independently. A source
prefix rides along at the start of every chunk; a target prefix forces
the first output tokens (their true log-probs still accumulate) and can
be stripped from the final text. Target factor overrides land one step
after their surface position because factor streams are trained
time-shifted: the attributes of token t are predicted at step t + 1.

Output length is capped at 2 * source_len + 10 ids including EOS; when
the cap binds, the final step is forced to EOS and the hypothesis is
flagged. The restricted output vocabulary, when a shortlist or encoder
vocabulary selection is active, is always widened with PAD, UNK, EOS and
any target prefix ids so forcing stays scoreable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, InputError
from .model import Model, validate_active_ids
from .vocab import BOS_ID, EOS_ID, PAD_ID, SHIFT_ID, UNK_ID, Vocabulary

logger = logging.getLogger(__name__)

INPUT_KEYS = ("text", "source_prefix", "target_prefix",
              "target_prefix_factors", "source_factors")


@dataclass
class SentenceInput:
    """One sentence to translate, with optional factors and prefixes."""
    tokens: list[str]
    source_factors: list[list[str]] = field(default_factory=list)
    source_prefix: list[str] = field(default_factory=list)
    target_prefix: list[str] = field(default_factory=list)
    target_prefix_factors: list[list[str]] = field(default_factory=list)
    prefix_all_chunks: bool = False
    strip_prefix: bool = False

    def validate(self) -> None:
        for i, stream in enumerate(self.source_factors):
            if len(stream) != len(self.tokens):
                raise InputError(
                    f"source factor stream {i} has {len(stream)} tokens, "
                    f"text has {len(self.tokens)}")


@dataclass
class Hypothesis:
    """A finished hypothesis. tokens excludes EOS; factors holds one entry
    per decode step including the EOS step, so entry t is the attribute of
    the token emitted at step t - 1."""
    tokens: list[int]
    factors: list[list[int]]
    logprob: float
    steps: int
    forced_eos: bool
    finished: bool = True

    def normalized(self, length_alpha: float) -> float:
        return self.logprob / (self.steps ** length_alpha)


@dataclass
class TranslationRecord:
    text: str
    score: float
    factors: list[str]
    chunks: int
    forced_eos: bool
    error: str | None = None


class ShortlistRestriction:
    """Restrict output ids to the union of shortlist rows of the chunk's
    source ids."""

    def __init__(self, shortlist):
        self.shortlist = shortlist

    def resolve(self, model, state, src_ids, lengths, extra_ids) -> np.ndarray:
        ids = self.shortlist.lookup(src_ids)
        return np.union1d(ids, extra_ids)


class NvsRestriction:
    """Restrict output ids with the model's encoder-side vocabulary
    selection head at the given probability threshold."""

    def __init__(self, threshold: float):
        self.threshold = threshold

    def resolve(self, model, state, src_ids, lengths, extra_ids) -> np.ndarray:
        (ids,) = model.nvs_select(state.enc, lengths, self.threshold,
                                  always_include=extra_ids)
        return ids


@dataclass
class SearchSettings:
    beam: int = 1
    length_alpha: float = 1.0
    restriction: ShortlistRestriction | NvsRestriction | None = None
    # None: use the dedicated greedy decoder whenever beam == 1.
    use_greedy: bool | None = None


# ------------------------------------------------------------------- input

def parse_input_line(line: str) -> SentenceInput:
    """Plain tokenized text, or one JSON object with the documented keys."""
    stripped = line.strip()
    if not stripped.startswith("{"):
        return SentenceInput(tokens=line.split())
    try:
        obj = json.loads(stripped)
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON input: {e}") from None
    if not isinstance(obj, dict):
        raise InputError("JSON input must be an object")
    unknown = set(obj) - set(INPUT_KEYS)
    if unknown:
        raise InputError(f"unknown input keys: {sorted(unknown)}")
    if "text" not in obj:
        raise InputError("JSON input is missing \"text\"")

    def as_tokens(key: str) -> list[str]:
        value = obj.get(key, "")
        if not isinstance(value, str):
            raise InputError(f"\"{key}\" must be a string")
        return value.split()

    def as_streams(key: str) -> list[list[str]]:
        value = obj.get(key, [])
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise InputError(f"\"{key}\" must be a sequence of strings")
        return [v.split() for v in value]

    inp = SentenceInput(
        tokens=as_tokens("text"),
        source_factors=as_streams("source_factors"),
        source_prefix=as_tokens("source_prefix"),
        target_prefix=as_tokens("target_prefix"),
        target_prefix_factors=as_streams("target_prefix_factors"),
    )
    inp.validate()
    return inp


def chunk_input(inp: SentenceInput, max_seq_len: int) -> list[SentenceInput]:
    """Split the source into consecutive chunks of at most max_seq_len
    minus the source prefix length; the prefix is carried into every
    chunk. The target prefix attaches to the first chunk only, unless
    prefix_all_chunks."""
    if not inp.tokens:
        raise InputError("empty input")
    prefix_len = len(inp.source_prefix)
    if max_seq_len <= prefix_len:
        raise InputError(
            f"source prefix ({prefix_len} tokens) leaves no room in a "
            f"window of {max_seq_len}")
    budget = max_seq_len - prefix_len
    chunks = []
    for start in range(0, len(inp.tokens), budget):
        first = start == 0
        with_target = first or inp.prefix_all_chunks
        chunks.append(SentenceInput(
            tokens=inp.tokens[start:start + budget],
            source_factors=[s[start:start + budget] for s in inp.source_factors],
            source_prefix=list(inp.source_prefix),
            target_prefix=list(inp.target_prefix) if with_target else [],
            target_prefix_factors=[list(s) for s in inp.target_prefix_factors]
            if with_target else [],
            prefix_all_chunks=inp.prefix_all_chunks,
            strip_prefix=inp.strip_prefix,
        ))
    return chunks


def encode_chunk(chunk: SentenceInput, vocabs) -> tuple[np.ndarray, list[np.ndarray],
                                                        np.ndarray]:
    """Ids for one chunk: source prefix + body, factor streams padded at
    the prefix positions. vocabs is anything with src_vocab, trg_vocab and
    the factor vocabulary lists (a loaded model directory fits)."""
    src_tokens = chunk.source_prefix + chunk.tokens
    src_ids = vocabs.src_vocab.encode(src_tokens)
    prefix_len = len(chunk.source_prefix)
    factor_ids = []
    for stream, vocab in zip(chunk.source_factors, vocabs.src_factor_vocabs):
        factor_ids.append(np.array([[PAD_ID] * prefix_len + vocab.encode(stream)],
                                   dtype=np.int64))
    return (np.array([src_ids], dtype=np.int64), factor_ids,
            np.array([len(src_ids)], dtype=np.int64))


def _encode_with_warning(tokens: list[str], vocab: Vocabulary, what: str) -> list[int]:
    ids = []
    for tok in tokens:
        if tok not in vocab:
            logger.warning("%s token %r is not in the vocabulary; using UNK", what, tok)
        ids.append(vocab.to_id(tok))
    return ids


def encode_target_prefix(chunk: SentenceInput, vocabs) -> tuple[list[int],
                                                                list[list[int]]]:
    prefix_ids = _encode_with_warning(chunk.target_prefix, vocabs.trg_vocab,
                                      "target prefix")
    factor_ids = [_encode_with_warning(stream, vocab, f"target prefix factor {i}")
                  for i, (stream, vocab) in enumerate(
                      zip(chunk.target_prefix_factors, vocabs.trg_factor_vocabs))]
    return prefix_ids, factor_ids


# ------------------------------------------------------------------ search

def _max_output_len(src_len: int) -> int:
    return 2 * src_len + 10


def _start_state(model: Model, src_ids, src_factor_ids, lengths, prefix_ids,
                 restriction):
    state = model.decode_init(src_ids, src_factor_ids, lengths)
    if restriction is not None:
        extra = np.array([PAD_ID, UNK_ID, EOS_ID] + list(prefix_ids), dtype=np.int64)
        ids = restriction.resolve(model, state, src_ids[0], lengths, extra)
        state.active_ids = validate_active_ids(model.config, ids)
    return state


def _column_of(active_ids: np.ndarray | None, token: int) -> int:
    if active_ids is None:
        return token
    col = int(np.searchsorted(active_ids, token))
    if col >= active_ids.size or active_ids[col] != token:
        raise ConfigError(f"token id {token} missing from the restricted vocabulary")
    return col


def _check_prefix_budget(prefix_ids: list[int], max_len: int) -> None:
    if len(prefix_ids) > max_len - 1:
        raise InputError(
            f"target prefix ({len(prefix_ids)} tokens) does not fit the "
            f"output budget of {max_len}")


def _factor_choices(step_factors, row: int, t: int,
                    prefix_factor_ids: list[list[int]], n_factors: int) -> list[int]:
    """Greedy factor per stream, overridden by prefix factors. Override
    index is t - 1: the attribute of output token j is emitted at step
    j + 1."""
    choices = []
    for k in range(n_factors):
        if t >= 1 and k < len(prefix_factor_ids) and t - 1 < len(prefix_factor_ids[k]):
            choices.append(int(prefix_factor_ids[k][t - 1]))
        else:
            choices.append(int(np.argmax(step_factors[k].data[row])))
    return choices


def greedy_search(model: Model, vocabs, chunk: SentenceInput,
                  restriction=None, length_alpha: float = 1.0) -> Hypothesis:
    """Argmax decoding with no hypothesis sorting and no state reordering."""
    src_ids, src_factor_ids, lengths = encode_chunk(chunk, vocabs)
    prefix_ids, prefix_factor_ids = encode_target_prefix(chunk, vocabs)
    max_len = _max_output_len(int(lengths[0]))
    _check_prefix_budget(prefix_ids, max_len)
    state = _start_state(model, src_ids, src_factor_ids, lengths, prefix_ids,
                         restriction)
    n_factors = len(model.config.target_factor_specs)

    prev = np.array([BOS_ID])
    prev_factors = [np.array([SHIFT_ID]) for _ in range(n_factors)]
    tokens: list[int] = []
    factors: list[list[int]] = [[] for _ in range(n_factors)]
    logprob = 0.0
    forced_eos = False
    for t in range(max_len):
        out = model.decode_step(state, prev, prev_factors)
        lp = K.log_softmax(out.surface).data[0]
        if t < len(prefix_ids):
            col = _column_of(out.active_ids, prefix_ids[t])
        else:
            col = int(np.argmax(lp))
            if t == max_len - 1:
                eos_col = _column_of(out.active_ids, EOS_ID)
                forced_eos = col != eos_col
                col = eos_col
        token = int(out.active_ids[col]) if out.active_ids is not None else col
        logprob += float(lp[col])
        choices = _factor_choices(out.factors, 0, t, prefix_factor_ids, n_factors)
        for k, c in enumerate(choices):
            factors[k].append(c)
        if token == EOS_ID:
            return Hypothesis(tokens, factors, logprob, t + 1, forced_eos)
        tokens.append(token)
        prev = np.array([token])
        prev_factors = [np.array([c]) for c in choices]
    raise AssertionError("unreachable: the final step always emits EOS")


class _BeamHyp:
    __slots__ = ("tokens", "factors", "logprob")

    def __init__(self, tokens, factors, logprob):
        self.tokens = tokens
        self.factors = factors
        self.logprob = logprob


def beam_search(model: Model, vocabs, chunk: SentenceInput, beam: int,
                restriction=None, length_alpha: float = 1.0) -> Hypothesis:
    """Beam over surface tokens. The beam starts from a single hypothesis
    and widens as candidates diverge, so forced prefix steps never clone
    identical rows. Finished hypotheses compete on logprob / steps^alpha;
    the best finished one wins, earliest first on exact ties."""
    if beam < 1:
        raise ConfigError(f"beam size must be at least 1, got {beam}")
    src_ids, src_factor_ids, lengths = encode_chunk(chunk, vocabs)
    prefix_ids, prefix_factor_ids = encode_target_prefix(chunk, vocabs)
    max_len = _max_output_len(int(lengths[0]))
    _check_prefix_budget(prefix_ids, max_len)
    state = _start_state(model, src_ids, src_factor_ids, lengths, prefix_ids,
                         restriction)
    n_factors = len(model.config.target_factor_specs)

    alive = [_BeamHyp([], [[] for _ in range(n_factors)], 0.0)]
    finished: list[Hypothesis] = []
    prev = np.array([BOS_ID])
    prev_factors = [np.array([SHIFT_ID]) for _ in range(n_factors)]
    for t in range(max_len):
        out = model.decode_step(state, prev, prev_factors)
        lp = K.log_softmax(out.surface).data  # (B, A)
        active = out.active_ids
        n_rows, n_cols = lp.shape
        final_force = t == max_len - 1 and t >= len(prefix_ids)
        if t < len(prefix_ids) or final_force:
            col = _column_of(active, prefix_ids[t] if not final_force else EOS_ID)
            cand_scores = np.array([alive[b].logprob + lp[b, col]
                                    for b in range(n_rows)])
            cand_parents = np.arange(n_rows)
            cand_cols = np.full(n_rows, col)
        else:
            scores = np.array([h.logprob for h in alive])[:, None] + lp
            cand_scores = scores.ravel()
            cand_parents = np.repeat(np.arange(n_rows), n_cols)
            cand_cols = np.tile(np.arange(n_cols), n_rows)
        token_ids = active[cand_cols] if active is not None else cand_cols
        order = np.lexsort((cand_parents, token_ids, -cand_scores))

        new_alive: list[_BeamHyp] = []
        parents: list[int] = []
        next_tokens: list[int] = []
        next_factors: list[list[int]] = []
        for cand in order[:beam]:
            parent = int(cand_parents[cand])
            col = int(cand_cols[cand])
            token = int(active[col]) if active is not None else col
            score = alive[parent].logprob + float(lp[parent, col])
            choices = _factor_choices(out.factors, parent, t, prefix_factor_ids,
                                      n_factors)
            src = alive[parent]
            factors = [src.factors[k] + [choices[k]] for k in range(n_factors)]
            if token == EOS_ID:
                forced = final_force and int(np.argmax(lp[parent])) != col
                finished.append(Hypothesis(list(src.tokens), factors, score,
                                           t + 1, forced))
            else:
                new_alive.append(_BeamHyp(src.tokens + [token], factors, score))
                parents.append(parent)
                next_tokens.append(token)
                next_factors.append(choices)
        if not new_alive:
            break
        state.select_rows(parents)
        alive = new_alive
        prev = np.array(next_tokens)
        prev_factors = [np.array([f[k] for f in next_factors])
                        for k in range(n_factors)]
    return max(finished, key=lambda h: h.normalized(length_alpha))


# --------------------------------------------------------------- pipeline

def _run_chunk(model, vocabs, chunk, settings) -> Hypothesis:
    greedy = settings.use_greedy
    if greedy is None:
        greedy = settings.beam == 1
    if greedy:
        if settings.beam != 1:
            raise ConfigError("greedy decoding is incompatible with beam > 1")
        return greedy_search(model, vocabs, chunk, settings.restriction,
                             settings.length_alpha)
    return beam_search(model, vocabs, chunk, settings.beam, settings.restriction,
                       settings.length_alpha)


def _translate_one(model, vocabs, inp: SentenceInput,
                   settings: SearchSettings) -> TranslationRecord:
    inp.validate()
    cfg = model.config
    if len(inp.source_factors) != len(cfg.source_factor_specs):
        raise InputError(
            f"model expects {len(cfg.source_factor_specs)} source factor "
            f"streams, input has {len(inp.source_factors)}")
    if len(inp.target_prefix_factors) > len(cfg.target_factor_specs):
        raise InputError(
            f"model has {len(cfg.target_factor_specs)} target factor "
            f"streams, prefix factors name {len(inp.target_prefix_factors)}")
    chunks = chunk_input(inp, cfg.max_seq_len)
    n_factors = len(cfg.target_factor_specs)
    out_tokens: list[str] = []
    out_factors: list[list[str]] = [[] for _ in range(n_factors)]
    total_logprob = 0.0
    total_steps = 0
    forced = False
    for chunk in chunks:
        hyp = _run_chunk(model, vocabs, chunk, settings)
        tokens = vocabs.trg_vocab.decode(hyp.tokens)
        # entry t of a factor stream is the attribute of token t - 1
        aligned = [vocabs.trg_factor_vocabs[k].decode(hyp.factors[k][1:])
                   for k in range(n_factors)]
        if inp.strip_prefix and chunk.target_prefix:
            drop = min(len(chunk.target_prefix), len(tokens))
            tokens = tokens[drop:]
            aligned = [a[drop:] for a in aligned]
        out_tokens.extend(tokens)
        for k in range(n_factors):
            out_factors[k].extend(aligned[k])
        total_logprob += hyp.logprob
        total_steps += hyp.steps
        forced = forced or hyp.forced_eos
    score = total_logprob / (total_steps ** settings.length_alpha)
    return TranslationRecord(
        text=" ".join(out_tokens), score=score,
        factors=[" ".join(f) for f in out_factors],
        chunks=len(chunks), forced_eos=forced)


def translate(model: Model, vocabs, inputs,
              settings: SearchSettings | None = None) -> list[TranslationRecord]:
    """Translate each input independently; a malformed record yields an
    error record and leaves the rest of the batch untouched."""
    settings = settings or SearchSettings()
    records = []
    for inp in inputs:
        try:
            records.append(_translate_one(model, vocabs, inp, settings))
        except InputError as e:
            logger.warning("input skipped: %s", e)
            records.append(TranslationRecord(text="", score=0.0, factors=[],
                                             chunks=0, forced_eos=False,
                                             error=str(e)))
    return records
