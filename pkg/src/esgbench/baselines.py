"""Pluggable prediction baselines for the comparison table.

A baseline is a stateless text -> {1, 0, -1} predictor. External
reference models (the financial-domain BERT variant and the full-size
un-fine-tuned LLM) are registered but unavailable until the user supplies
weights; evaluating them reports "unavailable" instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .corpus import LabeledExample


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineAdapter:
    name: str
    predict: Callable[[str], int] | None
    provenance: str
    available: bool = True


def _constant(value: int) -> Callable[[str], int]:
    def predict(text: str) -> int:
        return value

    return predict


def oracle_from(examples: Sequence[LabeledExample]) -> Callable[[str], int]:
    """Gold-label lookup; a perfect predictor for sanity checks."""
    table = {ex.text: ex.label for ex in examples}

    def predict(text: str) -> int:
        if text not in table:
            raise BaselineError(f"oracle has no gold label for {text[:40]!r}...")
        return table[text]

    return predict


def registry(split_examples: Sequence[LabeledExample] | None = None) -> dict[str, BaselineAdapter]:
    out = {
        "constant_positive": BaselineAdapter(
            name="constant_positive",
            predict=_constant(1),
            provenance="predicts 1 for every text",
        ),
        "constant_negative": BaselineAdapter(
            name="constant_negative",
            predict=_constant(0),
            provenance="predicts 0 for every text",
        ),
        "always_abstain": BaselineAdapter(
            name="always_abstain",
            predict=_constant(-1),
            provenance="abstains (-1) on every text",
        ),
        "finbert_esg": BaselineAdapter(
            name="finbert_esg",
            predict=None,
            provenance="external financial-domain BERT; requires user-supplied weights",
            available=False,
        ),
        "llama2_full": BaselineAdapter(
            name="llama2_full",
            predict=None,
            provenance="external full-size causal LM; requires user-supplied weights",
            available=False,
        ),
    }
    if split_examples is not None:
        out["perfect_oracle"] = BaselineAdapter(
            name="perfect_oracle",
            predict=oracle_from(split_examples),
            provenance="gold-label lookup over the evaluated split",
        )
    return out
