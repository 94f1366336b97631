"""Synthetic financial sentences whose label is fixed by a keyword rule."""
from __future__ import annotations

import numpy as np

from .data import RawRecord, TaskSpec, sentiment3

KEYWORDS = {
    "Neutral": ("flat",),
    "Positive": ("gains",),
    "Negative": ("losses",),
}

_COMPANIES = ("Acme", "Globex", "Initech", "Hooli", "Stark", "Wayne")
_VERBS = ("posts", "reports", "sees")


def keyword_label(text: str) -> str | None:
    """The oracle: the unique label owning a keyword in ``text``, else None."""
    words = set(text.rstrip(".").split())
    hits = [label for label, kws in KEYWORDS.items() if words.intersection(kws)]
    return hits[0] if len(hits) == 1 else None


def make_records(n: int, seed: int = 0, task: TaskSpec | None = None) -> list[RawRecord]:
    """``n`` shuffled records, labels balanced by cycling, wording drawn from ``seed``.

    Labels are assigned by :func:`keyword_label`, never copied from the generator.
    """
    task = task or sentiment3()
    missing = set(task.labels) - set(KEYWORDS)
    if missing:
        raise ValueError(f"no keywords for labels {sorted(missing)}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        target = task.labels[i % len(task.labels)]
        company = _COMPANIES[rng.integers(len(_COMPANIES))]
        verb = _VERBS[rng.integers(len(_VERBS))]
        word = KEYWORDS[target][rng.integers(len(KEYWORDS[target]))]
        text = f"{company} {verb} {word}."
        out.append(RawRecord(text=text, label=keyword_label(text)))
    order = rng.permutation(n)
    return [out[i] for i in order]
