"""Synthetic token tasks with known relevant tokens.

Token ids 0 and 1 are the classification and mask tokens throughout.
"""

from __future__ import annotations

import numpy as np

PLANTED_TOKENS = (2, 3)
CONCEPT_TOKENS = {"C": (2, 3), "D": (4, 5), "E": (6, 7)}
FIRST_FILLER = 8


def planted_token_task(n, length=10, vocab_size=16, seed=0):
    """Binary task where a single planted token decides the label.

    Each sequence holds ``length`` content tokens: fillers plus one planted
    token (id 2 for class 0, id 3 for class 1) at a uniform position.

    Returns
    -------
    X : list of int arrays
    y : ndarray of int
    planted : ndarray of int
        Content position (0-based, CLS excluded) of the planted token.
    """
    rng = np.random.default_rng(seed)
    fillers = np.arange(4, vocab_size)
    y = rng.integers(0, 2, size=n)
    planted = rng.integers(0, length, size=n)
    X = []
    for label, pos in zip(y, planted):
        seq = rng.choice(fillers, size=length)
        seq[pos] = PLANTED_TOKENS[label]
        X.append(seq)
    return X, y.astype(np.int64), planted.astype(np.int64)


def concept_task(n, length=10, vocab_size=16, seed=0, distractor_rate=0.3):
    """Binary task: class 1 exactly when a token of concept C is present.

    Distractor concepts D and E appear at random in both classes.
    """
    rng = np.random.default_rng(seed)
    fillers = np.arange(FIRST_FILLER, vocab_size)
    distract = np.array(CONCEPT_TOKENS["D"] + CONCEPT_TOKENS["E"])
    y = rng.integers(0, 2, size=n)
    X = []
    for label in y:
        seq = rng.choice(fillers, size=length)
        hit = rng.random(length) < distractor_rate
        seq[hit] = rng.choice(distract, size=int(hit.sum()))
        if label:
            k = rng.integers(1, 3)
            pos = rng.choice(length, size=k, replace=False)
            seq[pos] = rng.choice(CONCEPT_TOKENS["C"], size=k)
        X.append(seq)
    return X, y.astype(np.int64)


def concept_examples(concept, n, length=10, vocab_size=16, seed=0, density=0.5):
    """Sequences rich in one concept's tokens (the rest are fillers).

    ``concept=None`` gives filler-only sequences, used as random
    concepts.
    """
    rng = np.random.default_rng(seed)
    fillers = np.arange(FIRST_FILLER, vocab_size)
    X = []
    for _ in range(n):
        seq = rng.choice(fillers, size=length)
        if concept is not None:
            toks = np.array(CONCEPT_TOKENS[concept])
            hit = rng.random(length) < density
            hit[rng.integers(length)] = True
            seq[hit] = rng.choice(toks, size=int(hit.sum()))
        X.append(seq)
    return X
