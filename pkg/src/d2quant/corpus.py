"""Seeded English-like text for fixtures and demos.

Sentences come from a tiny phrase grammar, so the byte stream has real
word- and letter-level regularities for a readout to learn.
"""

from __future__ import annotations

import numpy as np

_DET = ["the", "a", "every", "some", "this", "that", "no", "one"]
_ADJ = ["small", "quiet", "bright", "heavy", "early", "green", "narrow", "simple",
        "round", "cold", "old", "careful", "distant", "sharp", "gentle", "plain"]
_NOUN = ["river", "engine", "garden", "letter", "window", "teacher", "village", "signal",
         "market", "bridge", "winter", "doctor", "number", "forest", "table", "station",
         "model", "weight", "sample", "layer", "matrix", "column", "value", "token"]
_VERB = ["carries", "follows", "opens", "finds", "moves", "keeps", "builds", "checks",
         "holds", "measures", "turns", "reads", "covers", "shifts", "scales", "rounds"]
_ADV = ["slowly", "again", "quickly", "often", "rarely", "together", "today", "twice"]
_PREP = ["near", "under", "behind", "across", "beside", "after", "before", "inside"]
_CONJ = ["and", "but", "so", "while", "because"]


def _phrase(rng: np.random.Generator) -> str:
    words = [_DET[rng.integers(len(_DET))]]
    if rng.random() < 0.5:
        words.append(_ADJ[rng.integers(len(_ADJ))])
    words.append(_NOUN[rng.integers(len(_NOUN))])
    return " ".join(words)


def _clause(rng: np.random.Generator) -> str:
    parts = [_phrase(rng), _VERB[rng.integers(len(_VERB))], _phrase(rng)]
    if rng.random() < 0.4:
        parts += [_PREP[rng.integers(len(_PREP))], _phrase(rng)]
    if rng.random() < 0.3:
        parts.append(_ADV[rng.integers(len(_ADV))])
    return " ".join(parts)


def sentence(rng: np.random.Generator) -> str:
    text = _clause(rng)
    if rng.random() < 0.35:
        text += ", " + _CONJ[rng.integers(len(_CONJ))] + " " + _clause(rng)
    end = "." if rng.random() < 0.85 else ("?" if rng.random() < 0.5 else "!")
    return text[0].upper() + text[1:] + end


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """At least ``n_bytes`` of text, truncated to exactly ``n_bytes``."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        para = " ".join(sentence(rng) for _ in range(int(rng.integers(3, 7)))) + "\n"
        out.append(para)
        size += len(para)
    return "".join(out).encode("ascii")[:n_bytes]
