#!/usr/bin/env python3
"""Regenerate the bundled toy corpus (src/ncelab/data/tiny_corpus.txt).

The corpus is synthetic: a seeded Markov bigram chain over a small
English vocabulary with Zipf-weighted unigrams, sized to roughly 100KB.
Committed output is deterministic for a fixed seed.
"""

import pathlib

import numpy as np

WORDS = """
the of and to in a is that for it as was with be by on not he this are at
from his they which or had we all their been one but there when who will
more no if out so said what up its about into than them can only other new
some could time these two may then do first any my now such like our over
man me even most made after also did many before must through back years
where much your way well down should because each just those people how too
little state good very make world still own see men work long get here
between both life being under never day same another know while last might
us great old year off come since against go came right used take three
states himself few house use during without again place around however home
small found mrs thought went say part once general high upon school every
don't does got united left number course war until always away something
fact though water less public put think almost hand enough far took head
yet government system better set told nothing night end why called didn't
eyes find going look asked later knew point next city business case change
air toward four move words early young days given order face possible among
side seemed need large light often best white children along turned rather
away program present mind country problem keep power group quite room
members perhaps million real others social done court become felt open
service kind necessary whole others themselves began second interest area
""".split()


def main() -> None:
    rng = np.random.default_rng(20240817)
    vocab = sorted(set(WORDS))
    v = len(vocab)
    # Zipfian unigram weights over a shuffled rank order
    ranks = rng.permutation(v) + 1
    unigram = 1.0 / ranks**1.05
    unigram /= unigram.sum()
    # sparse successor sets: 6..24 candidates per word, Dirichlet weights
    successors = []
    for _ in range(v):
        fanout = int(rng.integers(6, 25))
        cand = rng.choice(v, size=fanout, replace=False, p=unigram)
        weights = rng.dirichlet(np.full(fanout, 0.4))
        successors.append((cand, weights))
    tokens = []
    state = int(rng.integers(v))
    target_chars = 100_000
    total = 0
    while total < target_chars:
        # occasional restart from the unigram keeps the chain mixing
        if rng.random() < 0.02:
            state = int(rng.choice(v, p=unigram))
        cand, weights = successors[state]
        state = int(rng.choice(cand, p=weights))
        word = vocab[state]
        tokens.append(word)
        total += len(word) + 1
    lines = []
    i = 0
    while i < len(tokens):
        width = int(rng.integers(9, 15))
        lines.append(" ".join(tokens[i : i + width]))
        i += width
    out = pathlib.Path(__file__).resolve().parents[1] / "src/ncelab/data/tiny_corpus.txt"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size} bytes, {len(tokens)} tokens, {v} types)")


if __name__ == "__main__":
    main()
