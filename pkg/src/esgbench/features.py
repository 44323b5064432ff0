"""Text normalization and binary bag-of-words features for the classical path.

Pipeline order is fixed: lowercase -> keep [a-z0-9] runs as tokens ->
stopword removal -> dictionary lemmatizer -> Porter stemmer. Stopwords are
matched on surface forms, and stemming happens last so it cannot break the
lemma lookups.

The stopword list and lemma dictionary are vendored as plain-text resources
and integrity-checked with SHA-256 at load time, so feature extraction is
reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STOPWORDS_SHA256 = "ca1904afa9752b85e26d5c4998bb7ed1ed30de40945bea384cdeb068c32741b2"
LEMMAS_SHA256 = "e9144bea108ca0f95373f365791e148e42d06a4e843363b3d5378fefc2d977b3"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class FeaturesError(ValueError):
    pass


class EmptyCorpus(FeaturesError):
    pass


class ResourceIntegrityError(FeaturesError):
    pass


def _load_resource(name: str, expected_sha: str) -> str:
    data = resources.files("esgbench.resources").joinpath(name).read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != expected_sha:
        raise ResourceIntegrityError(f"{name}: sha256 {digest} != expected {expected_sha}")
    return data.decode("utf-8")


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = _load_resource("stopwords.txt", STOPWORDS_SHA256)
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


@lru_cache(maxsize=1)
def lemma_table() -> dict[str, str]:
    text = _load_resource("lemmas.txt", LEMMAS_SHA256)
    table = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        form, lemma = line.split("\t")
        table[form] = lemma
    return table


def lemmatize(word: str) -> str:
    """Dictionary lookup; unknown forms pass through unchanged."""
    return lemma_table().get(word, word)


# ---------------------------------------------------------------------------
# Porter stemmer (original 1980 rule set)
# ---------------------------------------------------------------------------

_VOWELS = set("aeiou")


def _is_cons(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of vowel->consonant transitions in the [C](VC)^m[V] form."""
    m = 0
    prev_cons = None
    for i in range(len(stem)):
        cons = _is_cons(stem, i)
        if prev_cons is False and cons:
            m += 1
        prev_cons = cons
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _ends_double_cons(stem: str) -> bool:
    return (
        len(stem) >= 2
        and stem[-1] == stem[-2]
        and _is_cons(stem, len(stem) - 1)
    )


def _ends_cvc(stem: str) -> bool:
    if len(stem) < 3:
        return False
    return (
        _is_cons(stem, len(stem) - 3)
        and not _is_cons(stem, len(stem) - 2)
        and _is_cons(stem, len(stem) - 1)
        and stem[-1] not in "wxy"
    )


_STEP2 = [
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
]

_STEP3 = [
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
]

_STEP4 = [
    "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
    "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
]


def _longest_rule(word: str, rules) -> tuple[str, str] | None:
    best = None
    for suffix, repl in rules:
        if word.endswith(suffix) and (best is None or len(suffix) > len(best[0])):
            best = (suffix, repl)
    return best


def porter_stem(word: str) -> str:
    if len(word) <= 2:
        return word
    w = word

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    # step 1b
    fired = False
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    elif w.endswith("ed") and _has_vowel(w[:-2]):
        w = w[:-2]
        fired = True
    elif w.endswith("ing") and _has_vowel(w[:-3]):
        w = w[:-3]
        fired = True
    if fired:
        if w.endswith(("at", "bl", "iz")):
            w = w + "e"
        elif _ends_double_cons(w) and w[-1] not in "lsz":
            w = w[:-1]
        elif _measure(w) == 1 and _ends_cvc(w):
            w = w + "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # step 2
    rule = _longest_rule(w, _STEP2)
    if rule and _measure(w[: -len(rule[0])]) > 0:
        w = w[: -len(rule[0])] + rule[1]

    # step 3
    rule = _longest_rule(w, _STEP3)
    if rule and _measure(w[: -len(rule[0])]) > 0:
        w = w[: -len(rule[0])] + rule[1]

    # step 4
    best = None
    for suffix in _STEP4:
        if w.endswith(suffix) and (best is None or len(suffix) > len(best)):
            best = suffix
    if best is not None:
        stem = w[: -len(best)]
        if _measure(stem) > 1 and (best != "ion" or stem.endswith(("s", "t"))):
            w = stem

    # step 5a
    if w.endswith("e"):
        m = _measure(w[:-1])
        if m > 1 or (m == 1 and not _ends_cvc(w[:-1])):
            w = w[:-1]

    # step 5b
    if _measure(w) > 1 and _ends_double_cons(w) and w.endswith("l"):
        w = w[:-1]

    return w


# ---------------------------------------------------------------------------
# Normalization and vectorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    stem: bool = True
    lemmatize: bool = True
    remove_stopwords: bool = True
    keep_alnum_only: bool = True
    lowercase: bool = True


def normalize_tokens(text: str, cfg: PreprocessConfig = PreprocessConfig()) -> list[str]:
    """Lowercased [a-z0-9] tokens with stopwords removed, lemmatized, stemmed."""
    if cfg.lowercase:
        text = text.lower()
    if cfg.keep_alnum_only:
        tokens = _TOKEN_RE.findall(text)
    else:
        tokens = text.split()
    if cfg.remove_stopwords:
        sw = stopwords()
        tokens = [t for t in tokens if t not in sw]
    if cfg.lemmatize:
        tokens = [lemmatize(t) for t in tokens]
    if cfg.stem:
        tokens = [porter_stem(t) for t in tokens]
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    index: dict[str, int]
    built_from: str

    def __len__(self) -> int:
        return len(self.index)

    @property
    def tokens(self) -> list[str]:
        # indices are contiguous from 0 in lexicographic token order
        return sorted(self.index, key=self.index.get)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(f"# built_from {self.built_from}\n")
            for tok in self.tokens:
                fh.write(f"{tok}\t{self.index[tok]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        index = {}
        built_from = ""
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("# built_from "):
                    built_from = line[len("# built_from "):]
                    continue
                tok, idx = line.split("\t")
                index[tok] = int(idx)
        return cls(index=index, built_from=built_from)


def build_vocabulary(train_token_lists: Sequence[Sequence[str]]) -> Vocabulary:
    """Distinct training tokens, sorted lexicographically, indexed from 0."""
    distinct = sorted({t for tokens in train_token_lists for t in tokens})
    if not distinct:
        raise EmptyCorpus("no tokens in the training corpus")
    h = hashlib.sha256()
    for tokens in train_token_lists:
        h.update(" ".join(tokens).encode("utf-8"))
        h.update(b"\n")
    return Vocabulary(
        index={tok: i for i, tok in enumerate(distinct)},
        built_from=h.hexdigest(),
    )


def vectorize(tokens: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    """Binary presence vector over the vocabulary; OOV tokens are ignored."""
    if len(vocab) == 0:
        raise FeaturesError("vocabulary is empty")
    vec = np.zeros(len(vocab), dtype=np.uint8)
    for tok in tokens:
        idx = vocab.index.get(tok)
        if idx is not None:
            vec[idx] = 1
    return vec


def vectorize_corpus(token_lists: Sequence[Sequence[str]], vocab: Vocabulary) -> np.ndarray:
    return np.stack([vectorize(tokens, vocab) for tokens in token_lists]) if token_lists else np.zeros((0, len(vocab)), dtype=np.uint8)
