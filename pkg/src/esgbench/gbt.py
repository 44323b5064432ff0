"""Gradient-boosted decision trees for binary classification.

Second-order boosting on logistic loss with the usual regularized objective:
leaf weight w = -T_alpha(G) / (H + lambda), split gain
0.5 * [score(L) + score(R) - score(parent)] where score(G, H) =
T_alpha(G)^2 / (H + lambda) and T_alpha soft-thresholds the gradient sum.

Split search is exact: every boundary between distinct sorted feature values
is scored, vectorized across features with one argsort per node. Zero-gain
splits are accepted while a node still mixes labels (both children must be
non-empty), which lets parity-style patterns such as XOR be learned; the
recursion still terminates because each child is strictly smaller.

Everything is plain numpy on float64, deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MIN_HESS = 1e-16


@dataclass
class _Node:
    feature: int = -1
    split_value: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


def _soft_threshold(g: float, alpha: float) -> float:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


def _leaf_score(g: float, h: float, reg_lambda: float, reg_alpha: float) -> float:
    t = _soft_threshold(g, reg_alpha)
    return t * t / (h + reg_lambda)


def _leaf_weight(g: float, h: float, reg_lambda: float, reg_alpha: float) -> float:
    return -_soft_threshold(g, reg_alpha) / (h + reg_lambda)


def _best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray,
                reg_lambda: float, reg_alpha: float):
    """Return (gain, feature, split_value) of the best boundary, or None."""
    m, d = X.shape
    if m < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    g_tot, h_tot = g.sum(), h.sum()
    gr, hr = g_tot - gl, h_tot - hl

    tl = np.sign(gl) * np.maximum(np.abs(gl) - reg_alpha, 0.0)
    tr = np.sign(gr) * np.maximum(np.abs(gr) - reg_alpha, 0.0)
    parent = _leaf_score(g_tot, h_tot, reg_lambda, reg_alpha)
    gains = 0.5 * (tl * tl / (hl + reg_lambda) + tr * tr / (hr + reg_lambda) - parent)
    gains[xs[1:] <= xs[:-1]] = -np.inf  # no boundary between equal values

    flat = int(np.argmax(gains))
    best_gain = gains.flat[flat]
    if not np.isfinite(best_gain):
        return None
    pos, feat = divmod(flat, d)
    return float(best_gain), int(feat), float(xs[pos, feat])


def _build_tree(X: np.ndarray, y: np.ndarray, g: np.ndarray, h: np.ndarray,
                depth: int, max_depth: int, reg_lambda: float, reg_alpha: float) -> _Node:
    impure = bool(y.min() != y.max())
    if depth >= max_depth or not impure:
        return _Node(weight=_leaf_weight(g.sum(), h.sum(), reg_lambda, reg_alpha))
    found = _best_split(X, g, h, reg_lambda, reg_alpha)
    if found is None:
        return _Node(weight=_leaf_weight(g.sum(), h.sum(), reg_lambda, reg_alpha))
    _, feat, split_value = found
    mask = X[:, feat] <= split_value
    left = _build_tree(X[mask], y[mask], g[mask], h[mask],
                       depth + 1, max_depth, reg_lambda, reg_alpha)
    right = _build_tree(X[~mask], y[~mask], g[~mask], h[~mask],
                        depth + 1, max_depth, reg_lambda, reg_alpha)
    return _Node(feature=feat, split_value=split_value, left=left, right=right)


def _predict_tree(node: _Node, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.weight
            continue
        mask = X[idx, nd.feature] <= nd.split_value
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -36.0, 36.0)))


@dataclass
class GradientBoostedTrees:
    n_trees: int
    max_depth: int
    learning_rate: float
    reg_lambda: float
    reg_alpha: float
    trees: list[_Node] = field(default_factory=list)
    base_score: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        raw = np.full(X.shape[0], self.base_score)
        self.trees = []
        for _ in range(self.n_trees):
            p = _sigmoid(raw)
            g = p - y
            h = np.maximum(p * (1.0 - p), _MIN_HESS)
            tree = _build_tree(X, y, g, h, 0, self.max_depth,
                               self.reg_lambda, self.reg_alpha)
            self.trees.append(tree)
            raw = raw + self.learning_rate * _predict_tree(tree, X)
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        raw = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            raw = raw + self.learning_rate * _predict_tree(tree, X)
        return raw

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)
