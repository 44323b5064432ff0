"""SVM and gradient-boosted-tree classifiers with seeded random-search tuning.

The SVM is scikit-learn's exact SMO solver behind this module's contract; the
boosted trees are the in-repo implementation in :mod:`esgbench.gbt`. Tuning
is black-box random search: trial t's parameters depend only on (seed, t), so
a larger budget evaluates a superset of trials and can never return a worse
best score.
"""

from __future__ import annotations

import base64
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.svm import SVC

from .gbt import GradientBoostedTrees
from .metrics import weighted_report

CLASSIFIER_FORMAT_VERSION = 1

_KERNELS = ("linear", "polynomial", "rbf")
_SKLEARN_KERNEL = {"linear": "linear", "polynomial": "poly", "rbf": "rbf"}


class ClassicalError(ValueError):
    pass


class DegenerateLabels(ClassicalError):
    pass


class ShapeMismatch(ClassicalError):
    pass


class EmptySpace(ClassicalError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    kernel: str = "linear"
    C: float = 1.0
    degree: int = 3
    gamma: float | str = "scale"

    def __post_init__(self):
        if self.kernel not in _KERNELS:
            raise ClassicalError(f"kernel must be one of {_KERNELS}, got {self.kernel!r}")
        if self.C <= 0:
            raise ClassicalError(f"C must be positive, got {self.C}")
        if self.degree < 1:
            raise ClassicalError(f"degree must be >= 1, got {self.degree}")
        if self.gamma != "scale" and (not isinstance(self.gamma, (int, float)) or self.gamma <= 0):
            raise ClassicalError(f"gamma must be positive or 'scale', got {self.gamma!r}")


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    reg_alpha: float = 0.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ClassicalError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ClassicalError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ClassicalError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.reg_lambda < 0 or self.reg_alpha < 0:
            raise ClassicalError("regularization strengths must be non-negative")


@dataclass(frozen=True)
class TrialBudget:
    n_trials: int
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ClassicalError(f"n_trials must be >= 1, got {self.n_trials}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ClassicalError("validation_fraction must be in (0, 1)")


@dataclass
class TrainedClassifier:
    kind: str
    model: object
    config: Mapping
    n_features: int
    vocab_fingerprint: str = ""
    format_version: int = CLASSIFIER_FORMAT_VERSION


def _check_training_inputs(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} rows of X vs {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise ClassicalError("need at least 2 training examples")
    return X, y


def train_svm(
    X: np.ndarray,
    y: np.ndarray,
    cfg: SvmConfig = SvmConfig(),
    vocab_fingerprint: str = "",
) -> TrainedClassifier:
    X, y = _check_training_inputs(X, y)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("training labels are all identical")
    model = SVC(
        kernel=_SKLEARN_KERNEL[cfg.kernel],
        C=cfg.C,
        degree=cfg.degree,
        gamma=cfg.gamma,
        random_state=0,
    )
    model.fit(X, y.astype(np.int64))
    return TrainedClassifier(
        kind="svm",
        model=model,
        config=vars(cfg) | {},
        n_features=X.shape[1],
        vocab_fingerprint=vocab_fingerprint,
    )


class _ConstantModel:
    def __init__(self, label: int):
        self.label = label

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.label, dtype=np.int64)


def train_gbt(
    X: np.ndarray,
    y: np.ndarray,
    cfg: GbtConfig = GbtConfig(),
    vocab_fingerprint: str = "",
    allow_constant: bool = False,
) -> TrainedClassifier:
    """Fit boosted trees; `allow_constant` relaxes the two-label precondition
    and returns a constant predictor for a single-label training set."""
    X, y = _check_training_inputs(X, y)
    uniq = np.unique(y)
    if len(uniq) < 2:
        if not allow_constant:
            raise DegenerateLabels("training labels are all identical")
        model: object = _ConstantModel(int(uniq[0]))
    else:
        model = GradientBoostedTrees(
            n_trees=cfg.n_trees,
            max_depth=cfg.max_depth,
            learning_rate=cfg.learning_rate,
            reg_lambda=cfg.reg_lambda,
            reg_alpha=cfg.reg_alpha,
        ).fit(X, y.astype(np.float64))
    return TrainedClassifier(
        kind="gbt",
        model=model,
        config=vars(cfg) | {},
        n_features=X.shape[1],
        vocab_fingerprint=vocab_fingerprint,
    )


def predict(clf: TrainedClassifier, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != clf.n_features:
        raise ShapeMismatch(
            f"expected {clf.n_features} features, got shape {X.shape}"
        )
    return np.asarray(clf.model.predict(X), dtype=np.int64)


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def sample(self, rng: np.random.Generator):
        return float(np.exp(rng.uniform(np.log(self.lo), np.log(self.hi))))


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def sample(self, rng: np.random.Generator):
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class IntUniform:
    lo: int
    hi: int

    def sample(self, rng: np.random.Generator):
        return int(rng.integers(self.lo, self.hi + 1))


@dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.integers(0, len(self.options)))]


def svm_search_space() -> dict:
    return {
        "kernel": Choice(("linear", "polynomial", "rbf")),
        "C": LogUniform(1e-3, 1e3),
        "degree": Choice((2, 3, 4)),
        "gamma": LogUniform(1e-4, 10.0),
    }


def gbt_search_space() -> dict:
    return {
        "n_trees": IntUniform(50, 500),
        "max_depth": IntUniform(2, 10),
        "learning_rate": LogUniform(1e-3, 0.5),
        "reg_lambda": Uniform(0.0, 10.0),
        "reg_alpha": Uniform(0.0, 10.0),
    }


def sample_params(space: Mapping, rng: np.random.Generator) -> dict:
    return {name: space[name].sample(rng) for name in sorted(space)}


def stratified_holdout_indices(
    y: Sequence, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified (fit, validation) index split."""
    y = np.asarray(y)
    n = len(y)
    n_val = max(1, int(round(fraction * n)))
    if n_val >= n:
        raise ClassicalError("validation fraction leaves no training data")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels, counts = np.unique(y, return_counts=True)
    ideal = n_val * counts / n
    quotas = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - quotas), kind="stable")
    for i in order[: n_val - quotas.sum()]:
        quotas[i] += 1
    val_idx = []
    for lab, quota in zip(labels, quotas):
        members = np.flatnonzero(y == lab)
        perm = rng.permutation(len(members))
        val_idx.extend(members[perm[:quota]])
    val_mask = np.zeros(n, dtype=bool)
    val_mask[val_idx] = True
    return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)


@dataclass
class Trial:
    number: int
    params: dict
    score: float


@dataclass
class TuneResult:
    best_params: dict
    best_score: float
    trials: list[Trial] = field(default_factory=list)

    def trace(self) -> list[dict]:
        return [
            {"trial": t.number, "params": t.params, "weighted_f1": t.score}
            for t in self.trials
        ]


def tune(
    train_fn: Callable[[np.ndarray, np.ndarray, dict], TrainedClassifier],
    space: Mapping,
    budget: TrialBudget,
    X: np.ndarray,
    y: np.ndarray,
) -> TuneResult:
    """Random search for the validation-weighted-F1 argmax (ties: earliest trial)."""
    if not space:
        raise EmptySpace("search space has no parameters")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    fit_idx, val_idx = stratified_holdout_indices(y, budget.validation_fraction, budget.seed)
    X_fit, y_fit = X[fit_idx], y[fit_idx]
    X_val, y_val = X[val_idx], y[val_idx]

    children = np.random.SeedSequence(budget.seed).spawn(budget.n_trials)
    best: Trial | None = None
    trials: list[Trial] = []
    for t in range(budget.n_trials):
        rng = np.random.Generator(np.random.PCG64(children[t]))
        params = sample_params(space, rng)
        try:
            clf = train_fn(X_fit, y_fit, params)
            pred = predict(clf, X_val)
            score = weighted_report(list(y_val), list(pred)).weighted_f1
        except ClassicalError:
            score = float("-inf")
        trial = Trial(number=t, params=params, score=score)
        trials.append(trial)
        if best is None or trial.score > best.score:
            best = trial
    return TuneResult(best_params=best.params, best_score=best.score, trials=trials)


# ---------------------------------------------------------------------------
# Persistence: self-describing JSON container, pickled model payload
# ---------------------------------------------------------------------------


def save_classifier(clf: TrainedClassifier, path: str | Path) -> None:
    doc = {
        "format_version": clf.format_version,
        "kind": clf.kind,
        "config": dict(clf.config),
        "n_features": clf.n_features,
        "vocab_fingerprint": clf.vocab_fingerprint,
        "payload": base64.b64encode(pickle.dumps(clf.model)).decode("ascii"),
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_classifier(path: str | Path) -> TrainedClassifier:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc["format_version"] != CLASSIFIER_FORMAT_VERSION:
        raise ClassicalError(f"unsupported classifier format {doc['format_version']}")
    return TrainedClassifier(
        kind=doc["kind"],
        model=pickle.loads(base64.b64decode(doc["payload"])),
        config=doc["config"],
        n_features=doc["n_features"],
        vocab_fingerprint=doc["vocab_fingerprint"],
        format_version=doc["format_version"],
    )
