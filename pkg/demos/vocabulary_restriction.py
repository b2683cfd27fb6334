"""Two ways to shrink the output softmax before decoding.

A lexical shortlist comes from word-alignment statistics learned with
expectation maximization; neural vocabulary selection is a head on the
encoder scored per sentence. Both restrict which target ids the decoder
may emit.

    python3 demos/vocabulary_restriction.py
"""

import numpy as np

from skiff.model import Model, ModelConfig
from skiff.shortlist import extract_shortlist, train_model1
from skiff.vocab import EOS_ID, PAD_ID, SPECIALS, UNK_ID, Vocabulary

# a tiny dictionary-style corpus: each "sentence" pairs a word with its
# translation, plus two noise pairs
PAIRS = [
    ("hund", "dog"), ("katze", "cat"), ("haus", "house"),
    ("hund katze", "dog cat"), ("katze haus", "cat house"),
    ("haus hund", "house dog"), ("hund hund", "dog dog"),
]


def main() -> None:
    src_vocab = Vocabulary(SPECIALS + ["hund", "katze", "haus"])
    trg_vocab = Vocabulary(SPECIALS + ["dog", "cat", "house"])
    pairs = [(src_vocab.encode(s.split()), trg_vocab.encode(t.split()))
             for s, t in PAIRS]

    print("== expectation maximization on a 7-pair corpus ==")
    table = train_model1(pairs, iterations=6)
    for it, ll in enumerate(table.log_likelihoods, 1):
        print(f"iteration {it}: log-likelihood {ll:.4f}")

    print("\nlexical table after training (p > 0.01):")
    for word in ["hund", "katze", "haus"]:
        sid = src_vocab.to_id(word)
        row = {trg_vocab.to_token(t): p for t, p in table.row(sid).items()
               if p > 0.01}
        ranked = sorted(row.items(), key=lambda kv: -kv[1])
        print(f"  {word:6s} -> " + ", ".join(f"{w} {p:.2f}" for w, p in ranked))

    shortlist = extract_shortlist(table, k=1)
    print("\nk=1 shortlist keeps only the dominant translation:")
    for word in ["hund", "katze", "haus"]:
        ids = shortlist[src_vocab.to_id(word)]
        print(f"  {word} -> {[trg_vocab.to_token(i) for i in ids]}")

    print("\n== neural vocabulary selection thresholds ==")
    config = ModelConfig(len(src_vocab), len(trg_vocab), d_model=16, heads=2,
                         ff_dim=32, encoder_layers=1, decoder_layers=1,
                         nvs_enabled=True, max_seq_len=8)
    model = Model(config, seed=3)
    src = np.array([src_vocab.encode(["hund", "katze"])], dtype=np.int32)
    lengths = np.array([2])
    enc, _ = model.encode(src, [], lengths)
    specials = [PAD_ID, UNK_ID, EOS_ID]
    for threshold in (0.0, 0.5, 1.0):
        (ids,) = model.nvs_select(enc, lengths, threshold, specials)
        names = [trg_vocab.to_token(int(i)) for i in ids]
        print(f"threshold {threshold:.1f}: {len(ids)} ids  {names}")
    print("\nThreshold 0 keeps the whole vocabulary, threshold 1 keeps only")
    print("the forced specials; a trained head lands in between, keeping the")
    print("ids the sentence actually needs (this one is untrained, so its")
    print("mid-threshold pick is arbitrary but still includes the specials).")


if __name__ == "__main__":
    main()
