"""
Gini decision trees stored as flat node arrays.

Splits are axis-aligned: rows with x[feature] <= threshold go left. Thresholds sit
halfway between adjacent distinct training values, a split needs at least
`min_leaf` rows on each side and a strictly positive impurity decrease.
"""
from typing import List, Optional, Tuple

import numpy as np

from src.schemas.forest import TreeArrays

LEAF = -1


def gini(positives: np.ndarray, counts: np.ndarray) -> np.ndarray:
    share = positives / counts
    return 2.0 * share * (1.0 - share)


def best_split(
    x: np.ndarray,
    y: np.ndarray,
    features: np.ndarray,
    min_leaf: int
) -> Optional[Tuple[int, float, float]]:
    """(feature, threshold, impurity decrease) of the best split among `features`, or None"""
    n = len(y)
    total_pos = y.sum()
    parent = gini(np.array([total_pos]), np.array([n]))[0]
    best = None

    left_counts = np.arange(1, n)
    right_counts = n - left_counts
    usable = (left_counts >= min_leaf) & (right_counts >= min_leaf)
    if not usable.any():
        return None

    for feature in features:
        order = np.argsort(x[:, feature], kind="stable")
        xs = x[order, feature]
        left_pos = np.cumsum(y[order])[:-1]
        valid = usable & (xs[1:] != xs[:-1])
        if not valid.any():
            continue
        children = (left_counts * gini(left_pos, left_counts)
                    + right_counts * gini(total_pos - left_pos, right_counts)) / n
        decrease = np.where(valid, parent - children, -np.inf)
        position = int(np.argmax(decrease))
        if decrease[position] <= 1e-12:
            continue
        if best is None or decrease[position] > best[2]:
            threshold = (xs[position] + xs[position + 1]) / 2.0
            if threshold >= xs[position + 1]:
                threshold = xs[position]
            best = (int(feature), float(threshold), float(decrease[position]))
    return best


def fit_tree(
    x: np.ndarray,
    y: np.ndarray,
    max_depth: int,
    min_leaf: int,
    features_per_split: int,
    rng: np.random.Generator
) -> TreeArrays:
    """Grow a tree depth-first; node order is deterministic given the generator"""
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    n_features = x.shape[1]
    per_split = min(features_per_split, n_features)

    def new_node(rows: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[rows].mean()))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        pure = value[node] in (0.0, 1.0)
        if pure or depth >= max_depth or len(rows) < 2 * min_leaf:
            continue
        candidates = rng.choice(n_features, size=per_split, replace=False)
        split = best_split(x[rows], y[rows], candidates, min_leaf)
        if split is None:
            continue
        feature[node], threshold[node], _ = split
        goes_left = x[rows, feature[node]] <= threshold[node]
        left[node] = new_node(rows[goes_left])
        right[node] = new_node(rows[~goes_left])
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], rows[~goes_left], depth + 1))
        stack.append((left[node], rows[goes_left], depth + 1))

    return TreeArrays(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64)
    )


def predict_tree(tree: TreeArrays, x: np.ndarray) -> np.ndarray:
    """Leaf value reached by every row"""
    node = np.zeros(len(x), dtype=np.int64)
    active = tree.feature[node] != LEAF
    while active.any():
        current = node[active]
        goes_left = x[active, tree.feature[current]] <= tree.threshold[current]
        node[active] = np.where(goes_left, tree.left[current], tree.right[current])
        active = tree.feature[node] != LEAF
    return tree.value[node]
