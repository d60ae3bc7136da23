"""Regression tree primitives shared by CART, random forest, and boosting.

Trees are stored as flat parallel arrays so whole matrices can be routed
through a tree without per-row Python recursion.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class Tree:
    feature: np.ndarray  # int32; -1 marks a leaf
    threshold: np.ndarray  # float64; split is x <= threshold -> left
    left: np.ndarray  # int32 child index
    right: np.ndarray  # int32 child index
    value: np.ndarray  # float64 node mean (prediction at leaves)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


def _best_split(X, y, idx, feature_ids, min_leaf):
    """Scan candidate (feature, midpoint) splits, minimizing total child SSE.

    All candidates are evaluated in one vectorized pass. Ties go to the lowest
    feature index then the lowest threshold; candidate features must be passed
    in ascending order for that to hold.
    """
    n = idx.size
    sub = X[np.ix_(idx, feature_ids)]  # [n, k] candidate columns
    order = np.argsort(sub, axis=0)
    xs = np.take_along_axis(sub, order, axis=0)
    ys = y[idx][order]  # [n, k] responses ordered per column
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    left_n = np.arange(1, n, dtype=np.float64)[:, None]
    right_n = n - left_n
    lsum = csum[:-1]
    lsq = csq[:-1]
    rsum = csum[-1] - lsum
    rsq = csq[-1] - lsq
    sse = (lsq - lsum * lsum / left_n) + (rsq - rsum * rsum / right_n)
    invalid = xs[1:] == xs[:-1]  # no boundary between equal values
    if min_leaf > 1:
        ln = np.arange(1, n)
        invalid |= ((ln < min_leaf) | (n - ln < min_leaf))[:, None]
    sse[invalid] = np.inf
    # argmin of the transpose walks feature-major, so the first minimum has the
    # lowest feature index, then the lowest threshold.
    flat = int(np.argmin(sse.T))
    col, row = divmod(flat, n - 1)
    if not np.isfinite(sse[row, col]):
        return None
    a = xs[row, col]
    b = xs[row + 1, col]
    t = (a + b) / 2.0
    if t >= b:  # midpoint rounded up to b; fall back so {x <= t} keeps a left
        t = a
    f = int(feature_ids[col])
    return (f, float(t), idx[order[: row + 1, col]], idx[order[row + 1 :, col]])


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: Optional[int],
    min_leaf: int,
    mtry: int,
    rng: Optional[np.random.Generator],
) -> Tree:
    """Grow a regression tree; leaves predict the node response mean.

    mtry < n_features samples that many split-candidate features per node,
    without replacement, from rng. With mtry == n_features the rng is never
    consumed, so the result is independent of it.
    """
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot grow a tree on zero rows")
    if min_leaf < 1:
        raise ValueError(f"min_leaf must be >= 1, got {min_leaf}")
    if min_leaf > n:
        raise ValueError(f"min_leaf {min_leaf} exceeds row count {n}")
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry {mtry} outside 1..{p}")
    if mtry < p and rng is None:
        raise ValueError("feature subsampling requires an rng")

    feature = [0]
    threshold = [0.0]
    left = [0]
    right = [0]
    value = [0.0]

    def new_node() -> int:
        feature.append(0)
        threshold.append(0.0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feature) - 1

    all_features = np.arange(p)
    stack = [(0, np.arange(n, dtype=np.intp), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        value[node] = float(ys.mean())
        feature[node] = -1
        if max_depth is not None and depth >= max_depth:
            continue
        if idx.size < 2 * min_leaf or idx.size < 2:
            continue
        if np.all(ys == ys[0]):
            continue
        if mtry < p:
            cand = np.sort(rng.choice(p, size=mtry, replace=False))
        else:
            cand = all_features
        split = _best_split(X, y, idx, cand, min_leaf)
        if split is None:
            continue
        f, t, left_idx, right_idx = split
        lid = new_node()
        rid = new_node()
        feature[node] = int(f)
        threshold[node] = t
        left[node] = lid
        right[node] = rid
        # Push right first so the left child is processed (and numbered) first.
        stack.append((rid, right_idx, depth + 1))
        stack.append((lid, left_idx, depth + 1))

    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64),
    )


def tree_predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Route every row of X to its leaf and return the leaf means."""
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int32)
    if n:
        active = np.nonzero(tree.feature[node] >= 0)[0]
        while active.size:
            nd = node[active]
            go_left = X[active, tree.feature[nd]] <= tree.threshold[nd]
            node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
            active = active[tree.feature[node[active]] >= 0]
    return tree.value[node]
