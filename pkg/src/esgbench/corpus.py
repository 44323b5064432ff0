"""Dataset ingestion, deterministic stratified splits, repetition balancing.

CSV contract: UTF-8, RFC-4180 quoting, one header row, text in the first
column and a 0/1 label in the second, whatever the header names are.

All randomness runs through numpy's PCG64 generator seeded with a single
integer, so identical inputs give byte-identical partitions on every
platform. Stratification uses largest-remainder quota allocation, which keeps
each split's label proportions within one example of the source proportions.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CorpusError(ValueError):
    pass


class MissingColumn(CorpusError):
    pass


class NonBinaryLabel(CorpusError):
    pass


class EmptyText(CorpusError):
    pass


class CorpusTooSmall(CorpusError):
    pass


class SingleClassPool(CorpusError):
    pass


class Domain(str, Enum):
    ENVIRONMENTAL = "Environmental"
    SOCIAL = "Social"
    GOVERNANCE = "Governance"

    @classmethod
    def from_alias(cls, name: str) -> "Domain":
        aliases = {
            "env": cls.ENVIRONMENTAL,
            "environmental": cls.ENVIRONMENTAL,
            "soc": cls.SOCIAL,
            "social": cls.SOCIAL,
            "gov": cls.GOVERNANCE,
            "governance": cls.GOVERNANCE,
        }
        key = name.strip().lower()
        if key not in aliases:
            raise CorpusError(f"unknown domain {name!r}; use env|soc|gov")
        return aliases[key]


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int
    domain: Domain

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyText("example text is empty")
        if self.label not in (0, 1):
            raise NonBinaryLabel(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class SplitConfig:
    train_size: int = 250
    test_size: int = 250
    seed: int = 10
    stratified: bool = True

    def __post_init__(self):
        if self.train_size <= 0 or self.test_size <= 0:
            raise CorpusError("split sizes must be positive")


@dataclass
class SplitBundle:
    train: list[LabeledExample]
    test: list[LabeledExample]
    eval_pool: list[LabeledExample]


def load_csv(path: str | Path, domain: Domain) -> list[LabeledExample]:
    """Read (text, label) rows into LabeledExamples, in file order."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: file is empty, expected a header row")
        if len(header) < 2:
            raise MissingColumn(f"{path}: header has {len(header)} column(s), need 2")
        examples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise MissingColumn(f"{path}:{lineno}: row has {len(row)} column(s)")
            text, raw_label = row[0], row[1].strip()
            if raw_label not in ("0", "1"):
                raise NonBinaryLabel(f"{path}:{lineno}: label {raw_label!r} not in {{0,1}}")
            if not text.strip():
                raise EmptyText(f"{path}:{lineno}: empty text cell")
            examples.append(LabeledExample(text=text, label=int(raw_label), domain=domain))
    return examples


def _quota_allocation(group_sizes: Sequence[int], take: int) -> list[int]:
    """Largest-remainder quotas proportional to group sizes, summing to `take`."""
    total = sum(group_sizes)
    ideal = [take * n / total for n in group_sizes]
    quotas = [int(x) for x in ideal]
    remainders = sorted(
        range(len(group_sizes)),
        key=lambda i: (-(ideal[i] - quotas[i]), i),
    )
    short = take - sum(quotas)
    for i in remainders[:short]:
        quotas[i] += 1
    # never allocate more than a group holds
    for i, n in enumerate(group_sizes):
        if quotas[i] > n:
            raise CorpusTooSmall(f"label group {i} has {n} examples, quota {quotas[i]}")
    return quotas


def stratified_split(
    examples: Sequence[LabeledExample], cfg: SplitConfig = SplitConfig()
) -> SplitBundle:
    """Deterministic stratified train/test/eval_pool partition.

    Per label, a seeded shuffle of that label's row indices feeds the train
    quota first, then the test quota; the remainder lands in eval_pool. The
    combined train list is shuffled once more so batch order is fixed ahead
    of time; test and eval_pool keep source order.
    """
    n = len(examples)
    if cfg.train_size + cfg.test_size > n:
        raise CorpusTooSmall(
            f"need {cfg.train_size + cfg.test_size} examples, corpus has {n}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    if cfg.stratified:
        by_label: dict[int, list[int]] = {}
        for i, ex in enumerate(examples):
            by_label.setdefault(ex.label, []).append(i)
        labels = sorted(by_label)
        sizes = [len(by_label[lab]) for lab in labels]
        train_quota = _quota_allocation(sizes, cfg.train_size)
        remaining = [sizes[i] - train_quota[i] for i in range(len(labels))]
        test_quota = _quota_allocation(remaining, cfg.test_size)
        train_idx: list[int] = []
        test_idx: list[int] = []
        eval_idx: list[int] = []
        for k, lab in enumerate(labels):
            perm = rng.permutation(len(by_label[lab]))
            shuffled = [by_label[lab][j] for j in perm]
            t, s = train_quota[k], test_quota[k]
            train_idx.extend(shuffled[:t])
            test_idx.extend(shuffled[t : t + s])
            eval_idx.extend(shuffled[t + s :])
    else:
        perm = rng.permutation(n)
        train_idx = list(perm[: cfg.train_size])
        test_idx = list(perm[cfg.train_size : cfg.train_size + cfg.test_size])
        eval_idx = list(perm[cfg.train_size + cfg.test_size :])

    train = [examples[i] for i in train_idx]
    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    test = [examples[i] for i in sorted(test_idx)]
    eval_pool = [examples[i] for i in sorted(eval_idx)]
    return SplitBundle(train=train, test=test, eval_pool=eval_pool)


def balance_by_repetition(
    pool: Sequence[LabeledExample], seed: int = 0
) -> list[LabeledExample]:
    """Equalize label counts by repeating minority-class examples.

    Every original example is kept in order; the repeats, drawn uniformly
    with replacement by the seeded generator, are appended at the end.
    """
    counts: dict[int, int] = {}
    for ex in pool:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    if len(counts) < 2:
        raise SingleClassPool(f"pool holds only label(s) {sorted(counts)!r}")
    target = max(counts.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    out = list(pool)
    for lab in sorted(counts):
        deficit = target - counts[lab]
        if deficit == 0:
            continue
        members = [ex for ex in pool if ex.label == lab]
        picks = rng.integers(0, len(members), size=deficit)
        out.extend(members[int(i)] for i in picks)
    return out


def relabel_to_text(label: int, domain: Domain) -> str:
    """0/1 -> domain text label, e.g. (1, Environmental) -> "Environmental"."""
    if label not in (0, 1):
        raise NonBinaryLabel(f"label must be 0 or 1, got {label!r}")
    return domain.value if label == 1 else f"Not {domain.value}"


def text_to_label(text_label: str, domain: Domain) -> int:
    """Inverse of relabel_to_text."""
    if text_label == domain.value:
        return 1
    if text_label == f"Not {domain.value}":
        return 0
    raise CorpusError(f"{text_label!r} is not a label for domain {domain.value}")


def write_csv(examples: Iterable[LabeledExample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text", "label"])
        for ex in examples:
            writer.writerow([ex.text, ex.label])


def fingerprint_examples(examples: Sequence[LabeledExample]) -> str:
    """Stable content hash of a dataset, independent of its file form."""
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.text.encode("utf-8"))
        h.update(b"\x00")
        h.update(str(ex.label).encode())
        h.update(b"\x00")
        h.update(ex.domain.value.encode())
        h.update(b"\x01")
    return h.hexdigest()


def fingerprint_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
