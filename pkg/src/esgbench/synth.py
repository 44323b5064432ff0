"""Synthetic keyword-labelled corpora for desk-scale runs and tests.

A text is positive for its domain exactly when it contains at least one of
the domain's keywords, so the bag-of-words representation is linearly
separable by construction and a small LM can learn the rule from examples.
"""

from __future__ import annotations

import numpy as np

from .corpus import Domain, LabeledExample

DOMAIN_KEYWORDS: dict[Domain, tuple[str, ...]] = {
    Domain.ENVIRONMENTAL: (
        "emissions", "solar", "climate", "recycling", "carbon", "renewable",
        "pollution", "biodiversity", "wind", "wastewater", "deforestation",
        "habitat",
    ),
    Domain.SOCIAL: (
        "diversity", "employees", "community", "safety", "wellbeing",
        "inclusion", "volunteering", "donation", "equality", "healthcare",
        "apprenticeship", "accessibility",
    ),
    Domain.GOVERNANCE: (
        "board", "audit", "compliance", "ethics", "disclosure", "shareholder",
        "oversight", "bribery", "remuneration", "whistleblower", "lobbying",
        "quorum",
    ),
}

FILLER_WORDS: tuple[str, ...] = (
    "company", "quarter", "report", "growth", "market", "product", "revenue",
    "customer", "service", "strategy", "annual", "global", "digital", "supply",
    "chain", "brand", "launch", "price", "sales", "forecast", "profit",
    "margin", "cost", "investment", "portfolio", "segment", "region", "office",
    "team", "project", "platform", "technology", "update", "statement",
    "capital", "asset", "contract", "partner", "agreement", "expansion",
    "demand", "production", "facility", "network", "operation", "performance",
    "outlook", "guidance", "target", "plan",
)


def make_examples(
    n: int,
    domain: Domain,
    seed: int = 0,
    positive_fraction: float = 0.5,
    words_per_text: tuple[int, int] = (6, 12),
) -> list[LabeledExample]:
    """Balanced keyword-labelled examples, deterministic for a seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    keywords = DOMAIN_KEYWORDS[domain]
    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    lo, hi = words_per_text
    examples = []
    for label in labels:
        length = int(rng.integers(lo, hi + 1))
        words = [FILLER_WORDS[int(i)] for i in rng.integers(0, len(FILLER_WORDS), length)]
        if label == 1:
            n_kw = int(rng.integers(1, 4))
            for _ in range(n_kw):
                kw = keywords[int(rng.integers(0, len(keywords)))]
                pos = int(rng.integers(0, len(words) + 1))
                words.insert(pos, kw)
        examples.append(
            LabeledExample(text=" ".join(words) + ".", label=int(label), domain=domain)
        )
    return examples
