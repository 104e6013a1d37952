"""Plaintext second-order gradient boosting for binary logloss.

Exact greedy splits: candidate thresholds are midpoints between
consecutive distinct sorted feature values, the split score is the
usual second-order gain

    0.5 * (G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)) - gamma

and a node becomes a leaf when no candidate has strictly positive gain.
Leaf weights are the loss-minimizing -G/(H+lambda). Ties between
equal-gain splits break toward the lowest feature id, then the lowest
threshold, so fits are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import GBDT_SIGMOID, DecisionTree, TreeEnsemble, TreeNode


@dataclass(frozen=True)
class GradHess:
    """Per-sample gradient and Hessian of the logistic loss."""

    g: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class SplitCandidate:
    feature_id: int
    threshold: float
    gain: float
    left_index: np.ndarray
    right_index: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 20
    max_depth: int = 4
    reg_lambda: float = 1.0
    gamma: float = 0.0
    shrinkage: float = 0.1
    min_child_samples: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("reg_lambda and gamma must be >= 0")


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return labels.astype(np.float64)


def grad_hess_logloss(labels: np.ndarray, margins: np.ndarray) -> GradHess:
    """g_i = sigmoid(margin_i) - y_i, h_i = sigmoid * (1 - sigmoid)."""
    y = _check_binary_labels(labels)
    margins = np.asarray(margins, dtype=np.float64)
    if not np.isfinite(margins).all():
        raise ValueError("margins must be finite")
    p = expit(margins)
    return GradHess(g=p - y, h=p * (1.0 - p))


def logloss(labels: np.ndarray, margins: np.ndarray) -> float:
    y = _check_binary_labels(labels)
    margins = np.asarray(margins, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))


def split_gain(parent_index, left_index, right_index, grad_hess: GradHess,
               reg_lambda: float, gamma: float) -> float:
    """Gain of splitting the parent sample set into (left, right)."""
    parent = np.asarray(parent_index, dtype=np.intp)
    left = np.asarray(left_index, dtype=np.intp)
    right = np.asarray(right_index, dtype=np.intp)
    if parent.size == 0:
        raise ValueError("parent sample set is empty")
    if left.size == 0 or right.size == 0:
        raise ValueError("left and right sets must both be nonempty")
    if set(left) & set(right) or set(left) | set(right) != set(parent):
        raise ValueError("left and right must partition the parent set")
    g, h = grad_hess.g, grad_hess.h

    def score(idx):
        return g[idx].sum() ** 2 / (h[idx].sum() + reg_lambda)

    return 0.5 * (score(left) + score(right) - score(parent)) - gamma


def leaf_weight(index, grad_hess: GradHess, reg_lambda: float) -> float:
    """Loss-minimizing weight -G/(H+lambda) for the node's sample set."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("leaf sample set is empty")
    return float(-grad_hess.g[idx].sum() / (grad_hess.h[idx].sum() + reg_lambda))


def best_split(X: np.ndarray, grad_hess: GradHess, index: np.ndarray,
               config: TrainConfig) -> SplitCandidate | None:
    """Exact greedy scan over every (feature, midpoint threshold) pair."""
    idx = np.asarray(index, dtype=np.intp)
    n = idx.size
    if n < 2 * config.min_child_samples or n < 2:
        return None
    g_all, h_all = grad_hess.g[idx], grad_hess.h[idx]
    G, H = g_all.sum(), h_all.sum()
    parent_score = G * G / (H + config.reg_lambda)
    best: SplitCandidate | None = None
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        gl = np.cumsum(g_all[order])[:-1]
        hl = np.cumsum(h_all[order])[:-1]
        left_counts = np.arange(1, n)
        valid = (xs_sorted[:-1] < xs_sorted[1:]) \
            & (left_counts >= config.min_child_samples) \
            & (n - left_counts >= config.min_child_samples)
        if not valid.any():
            continue
        gains = 0.5 * (gl ** 2 / (hl + config.reg_lambda)
                       + (G - gl) ** 2 / (H - hl + config.reg_lambda)
                       - parent_score) - config.gamma
        gains[~valid] = -np.inf
        i = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if best is not None and gains[i] <= best.gain:
            continue
        threshold = float((xs_sorted[i] + xs_sorted[i + 1]) / 2)
        mask = xs < threshold
        best = SplitCandidate(
            feature_id=f,
            threshold=threshold,
            gain=float(gains[i]),
            left_index=idx[mask],
            right_index=idx[~mask],
        )
    return best


def _grow_tree(X: np.ndarray, grad_hess: GradHess, index: np.ndarray,
               config: TrainConfig, tree_id: int) -> DecisionTree:
    nodes: dict[int, TreeNode] = {}
    next_node = iter(range(10 ** 9))
    leaf_counter = iter(range(10 ** 9))

    def grow(idx: np.ndarray, depth: int) -> int:
        node_id = next(next_node)
        split = best_split(X, grad_hess, idx, config) if depth < config.max_depth else None
        if split is None or split.gain <= 0:
            nodes[node_id] = TreeNode.leaf(node_id, next(leaf_counter),
                                           leaf_weight(idx, grad_hess, config.reg_lambda))
            return node_id
        left_id = grow(split.left_index, depth + 1)
        right_id = grow(split.right_index, depth + 1)
        nodes[node_id] = TreeNode.split(node_id, split.feature_id, split.threshold,
                                        left_id, right_id)
        return node_id

    root_id = grow(np.asarray(index, dtype=np.intp), 0)
    return DecisionTree(tree_id, root_id, nodes)


def tree_raw_values(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    """Unscaled leaf weight reached by every row."""
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(tree.root_id, np.arange(X.shape[0]))]
    while stack:
        node_id, rows = stack.pop()
        node = tree.nodes[node_id]
        if node.is_leaf:
            out[rows] = node.weight
            continue
        mask = X[rows, node.feature_id] < node.threshold
        stack.append((node.left, rows[mask]))
        stack.append((node.right, rows[~mask]))
    return out


def fit_gbdt(X: np.ndarray, labels: np.ndarray, config: TrainConfig,
             feature_names=None) -> TreeEnsemble:
    """Boost config.n_trees depth-limited trees against logistic loss."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary_labels(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n_samples, n_features) aligned with labels")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if y.min() == y.max():
        raise ValueError("labels contain a single class; nothing to fit")
    if feature_names is None:
        feature_names = tuple(f"f{j}" for j in range(X.shape[1]))
    index = np.arange(X.shape[0])
    margins = np.zeros(X.shape[0])
    trees = []
    for k in range(config.n_trees):
        gh = grad_hess_logloss(y, margins)
        tree = _grow_tree(X, gh, index, config, tree_id=k)
        trees.append(tree)
        margins = margins + config.shrinkage * tree_raw_values(tree, X)
    ensemble = TreeEnsemble(
        trees=tuple(trees),
        strategy=GBDT_SIGMOID,
        shrinkage=(config.shrinkage,) * config.n_trees,
        base_score=0.0,
        feature_names=tuple(feature_names),
    )
    ensemble.validate()
    return ensemble
