"""Regression random forest with out-of-bag prediction.

Trees are grown with CART (sum-of-squares splitting) on bootstrap samples.
The growing loop is compiled with numba; each tree draws from its own
splitmix64 stream seeded from ``(seed, tree_index)``, so a model depends only
on the seed, the data and the configuration, never on the thread schedule.

Split conventions:

* candidate thresholds are midpoints between consecutive distinct values,
  rows with ``x <= threshold`` go left;
* among equal-gain splits the lowest feature index wins, then the lowest
  threshold;
* a node is split only if it holds at least ``2 * min_leaf`` in-bag draws,
  is above the depth limit, and some split strictly reduces the sum of
  squares.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numba
import numpy as np
from numba import njit, prange

# skip the TBB probe, which warns on older TBB installs
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__all__ = [
    "ForestConfig",
    "ForestModel",
    "RegressionTree",
    "fit_forest",
    "oob_predict",
    "insample_predict",
    "predict",
    "variable_importance",
]

LEAF = -1
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ``max(1, p // 3)`` at fit time and
    ``max_depth=None`` means unlimited depth.  ``bootstrap=False`` grows every
    tree on the full sample (no row is then ever out-of-bag).
    """

    n_trees: int = 500
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if int(self.n_trees) < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.mtry is not None and int(self.mtry) < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        if int(self.min_leaf) < 1:
            raise ValueError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and int(self.max_depth) < 1:
            raise ValueError(f"max_depth must be >= 1 or None, got {self.max_depth}")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return max(1, p // 3)
        if self.mtry > p:
            raise ValueError(f"mtry={self.mtry} exceeds the number of features p={p}")
        return int(self.mtry)

    def replace(self, **changes) -> "ForestConfig":
        return ForestConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class RegressionTree:
    """Read-only view of one fitted tree.

    Internal nodes have ``feature >= 0``; leaves have ``feature == -1`` and
    carry ``value`` (mean in-bag response) and ``count`` (in-bag draws).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def apply(self, x: np.ndarray) -> int:
        """Index of the leaf reached by ``x``."""
        node = 0
        while self.feature[node] != LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return node

    def to_dict(self) -> dict:
        nodes = []
        for k in range(self.n_nodes):
            if self.feature[k] == LEAF:
                nodes.append({"id": k, "leaf_mean": float(self.value[k]),
                              "leaf_count": int(self.count[k])})
            else:
                nodes.append({"id": k, "feature": int(self.feature[k]),
                              "threshold": float(self.threshold[k]),
                              "left": int(self.left[k]), "right": int(self.right[k])})
        return {"nodes": nodes}


class ForestModel:
    """A fitted forest.

    Node arrays are stored padded, one row per tree (``node_count[t]`` valid
    entries in row ``t``).  ``inbag[t, i]`` is how many times row ``i`` was
    drawn into tree ``t``'s bootstrap sample.
    """

    def __init__(self, config, n_features, y_mean, feature, threshold, left,
                 right, value, count, node_count, inbag, importance_raw, oob_sum,
                 oob_n, insample_sum):
        self.config = config
        self.n_features = n_features
        self.y_mean = y_mean
        self._feature = feature
        self._threshold = threshold
        self._left = left
        self._right = right
        self._value = value
        self._count = count
        self.node_count = node_count
        self.inbag = inbag
        self._importance_raw = importance_raw
        self._oob_sum = oob_sum
        self._oob_n = oob_n
        self._insample_sum = insample_sum
        for arr in (feature, threshold, left, right, value, count, node_count,
                    inbag, importance_raw, oob_sum, oob_n, insample_sum):
            arr.setflags(write=False)

    @property
    def n_trees(self) -> int:
        return len(self.node_count)

    @property
    def n_train(self) -> int:
        return self.inbag.shape[1]

    @property
    def trees(self) -> list[RegressionTree]:
        return [self.tree(t) for t in range(self.n_trees)]

    def tree(self, t: int) -> RegressionTree:
        m = self.node_count[t]
        return RegressionTree(self._feature[t, :m], self._threshold[t, :m],
                              self._left[t, :m], self._right[t, :m],
                              self._value[t, :m], self._count[t, :m])

    @property
    def n_splits(self) -> int:
        return int(np.sum(self._feature >= 0))

    @property
    def never_oob(self) -> np.ndarray:
        """Boolean mask of training rows that are in-bag for every tree."""
        return self._oob_n == 0

    @property
    def oob_tree_counts(self) -> np.ndarray:
        return self._oob_n.copy()

    def dumps(self) -> str:
        """Debug dump of all trees as JSON text (format not guaranteed stable)."""
        return json.dumps({
            "config": asdict(self.config),
            "trees": [self.tree(t).to_dict() for t in range(self.n_trees)],
        })

    def equals(self, other: "ForestModel") -> bool:
        pairs = [(self._feature, other._feature), (self._threshold, other._threshold),
                 (self._left, other._left), (self._right, other._right),
                 (self._value, other._value), (self._count, other._count),
                 (self.node_count, other.node_count), (self.inbag, other.inbag)]
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


# -- random numbers -----------------------------------------------------------

@njit(inline="always", cache=True)
def _splitmix64(state):
    z = state + np.uint64(0x9E3779B97F4A7C15)
    new_state = z
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return new_state, z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _randbelow(state, n):
    state, r = _splitmix64(state)
    u = np.float64(r >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    k = np.int64(u * n)
    if k >= n:
        k = n - 1
    return state, k


@njit(cache=True)
def _tree_stream(seed, t):
    # decorrelate (seed, t) pairs before using them as a stream start
    state = np.uint64(seed)
    state, a = _splitmix64(state ^ np.uint64(0x6A09E667F3BCC909))
    state2 = a ^ (np.uint64(t) * np.uint64(0xD1B54A32D192ED03))
    state2, b = _splitmix64(state2)
    return b


# -- tree growing ---------------------------------------------------------------

@njit(cache=True)
def _grow_tree(X, y, weight, sorted_rows, mtry, min_leaf, max_depth, state,
               feature, threshold, left, right, value, count, importance):
    """Grow one tree in place; returns the number of nodes used.

    ``weight[i]`` is the number of bootstrap draws of row ``i``.
    ``sorted_rows[f, :m]`` lists the ``m`` drawn rows ordered by feature ``f``.
    Every node owns the same slice ``[start, end)`` of each list and children
    are formed by stable partitioning, so nodes never re-sort.
    """
    p, m = sorted_rows.shape[0], sorted_rows.shape[1] - 1
    feats = np.arange(p)
    goes_left = np.zeros(X.shape[0], dtype=np.bool_)
    buf = np.empty(m, dtype=np.int64)
    # draw counts are integers; a reciprocal table avoids divisions in the scan
    inv = np.empty(X.shape[0] + 1)
    inv[0] = 0.0
    for k in range(1, X.shape[0] + 1):
        inv[k] = 1.0 / k

    stack_node = np.empty(m + 1, dtype=np.int64)
    stack_start = np.empty(m + 1, dtype=np.int64)
    stack_end = np.empty(m + 1, dtype=np.int64)
    stack_depth = np.empty(m + 1, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    rows0 = sorted_rows[0]

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]

        size = 0
        total = 0.0
        for k in range(start, end):
            r = rows0[k]
            size += weight[r]
            total += weight[r] * y[r]
        parent_score = total * total / size

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        splittable = size >= 2 * min_leaf and (max_depth < 0 or depth < max_depth)
        if splittable:
            # constant response: nothing can reduce the sum of squares
            y0 = y[rows0[start]]
            constant = True
            for k in range(start + 1, end):
                if y[rows0[k]] != y0:
                    constant = False
                    break
            if constant:
                splittable = False

        if splittable:
            # partial Fisher-Yates draw of mtry distinct features
            for j in range(mtry):
                state, r = _randbelow(state, p - j)
                tmp = feats[j]
                feats[j] = feats[j + r]
                feats[j + r] = tmp
            tol = 1e-12 * max(1.0, abs(parent_score))
            for j in range(mtry):
                f = feats[j]
                rows = sorted_rows[f]
                cum = 0.0
                n_left = 0
                f_gain = tol
                f_thr = 0.0
                found = False
                for k in range(start, end - 1):
                    r = rows[k]
                    cum += weight[r] * y[r]
                    n_left += weight[r]
                    if n_left < min_leaf:
                        continue
                    if size - n_left < min_leaf:
                        break
                    rest = total - cum
                    gain = cum * cum * inv[n_left] + rest * rest * inv[size - n_left] - parent_score
                    # ascending scan: on ties the lowest threshold is kept
                    if gain > f_gain + tol:
                        lo = X[r, f]
                        hi = X[rows[k + 1], f]
                        if lo < hi:
                            f_gain = gain
                            thr = 0.5 * (lo + hi)
                            f_thr = thr if thr < hi else lo
                            found = True
                if not found:
                    continue
                if best_f < 0 or f_gain > best_gain + tol:
                    best_gain = f_gain
                    best_f = f
                    best_thr = f_thr
                elif f_gain >= best_gain - tol and f < best_f:
                    best_gain = f_gain
                    best_f = f
                    best_thr = f_thr

        if best_f < 0:
            feature[node] = LEAF
            value[node] = total / size
            count[node] = size
            continue

        n_left_rows = 0
        left_draws = 0
        for k in range(start, end):
            r = rows0[k]
            gl = X[r, best_f] <= best_thr
            goes_left[r] = gl
            if gl:
                n_left_rows += 1
                left_draws += weight[r]
        # children that can never split only need the row set, not the orders
        child_splittable = ((left_draws >= 2 * min_leaf or size - left_draws >= 2 * min_leaf)
                            and (max_depth < 0 or depth + 1 < max_depth))
        n_partition = p if child_splittable else 1
        # stable partition keeps every feature's slice sorted
        for g in range(n_partition):
            rows = sorted_rows[g]
            a = start
            b = 0
            for k in range(start, end):
                r = rows[k]
                # branchless: the direction is unpredictable
                gl = np.int64(goes_left[r])
                rows[a] = r
                buf[b] = r
                a += gl
                b += 1 - gl
            for k in range(b):
                rows[a + k] = buf[k]
        mid = start + n_left_rows

        importance[best_f] += best_gain
        feature[node] = best_f
        threshold[node] = best_thr
        value[node] = total / size
        count[node] = size
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        # push right first so the left subtree is numbered first
        stack_node[top] = rchild
        stack_start[top] = mid
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lchild
        stack_start[top] = start
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes


@njit(cache=True)
def _route(feature, threshold, left, right, x):
    node = 0
    while feature[node] != LEAF:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(parallel=True, cache=True)
def _fit_forest(X, y, order, n_trees, mtry, min_leaf, max_depth, seed, bootstrap):
    n, p = X.shape
    max_nodes = 2 * n
    feature = np.full((n_trees, max_nodes), LEAF, dtype=np.int32)
    threshold = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    right = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    value = np.zeros((n_trees, max_nodes))
    count = np.zeros((n_trees, max_nodes), dtype=np.int32)
    node_count = np.zeros(n_trees, dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.int32)
    importance = np.zeros((n_trees, p))
    oob_pred = np.zeros((n_trees, n))
    all_pred = np.zeros((n_trees, n))

    for t in prange(n_trees):
        state = _tree_stream(seed, t)
        if bootstrap:
            for k in range(n):
                state, r = _randbelow(state, n)
                inbag[t, r] += 1
        else:
            for k in range(n):
                inbag[t, k] = 1
        m = 0
        for i in range(n):
            if inbag[t, i] > 0:
                m += 1
        # one spare column absorbs the branchless writes of skipped rows
        sorted_rows = np.empty((p, m + 1), dtype=np.int64)
        for f in range(p):
            k = 0
            for i in range(n):
                r = order[f, i]
                sorted_rows[f, k] = r
                k += np.int64(inbag[t, r] > 0)
        node_count[t] = _grow_tree(X, y, inbag[t], sorted_rows, mtry, min_leaf,
                                   max_depth, state, feature[t], threshold[t],
                                   left[t], right[t], value[t], count[t],
                                   importance[t])
        for i in range(n):
            leaf = _route(feature[t], threshold[t], left[t], right[t], X[i])
            all_pred[t, i] = value[t, leaf]
            if inbag[t, i] == 0:
                oob_pred[t, i] = value[t, leaf]

    # fixed-order reductions keep the result independent of the schedule
    oob_sum = np.zeros(n)
    oob_n = np.zeros(n, dtype=np.int64)
    insample_sum = np.zeros(n)
    importance_raw = np.zeros(p)
    for t in range(n_trees):
        for i in range(n):
            insample_sum[i] += all_pred[t, i]
            if inbag[t, i] == 0:
                oob_sum[i] += oob_pred[t, i]
                oob_n[i] += 1
        for f in range(p):
            importance_raw[f] += importance[t, f]
    return (feature, threshold, left, right, value, count, node_count, inbag,
            importance_raw, oob_sum, oob_n, insample_sum)


@njit(cache=True)
def _predict_rows(feature, threshold, left, right, value, X):
    n_trees = feature.shape[0]
    out = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            leaf = _route(feature[t], threshold[t], left[t], right[t], X[i])
            acc += value[t, leaf]
        out[i] = acc / n_trees
    return out


# -- public API -------------------------------------------------------------------

def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-dimensional, got shape {X.shape}")
    return X


def fit_forest(X, Y, config: ForestConfig | None = None) -> ForestModel:
    """Fit a regression forest on ``(X, Y)``.

    Training-set OOB and in-sample predictions are computed during the fit
    and cached on the model, so :func:`oob_predict` on the training matrix is
    free.
    """
    config = config or ForestConfig()
    X = _as_matrix(X)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows to fit a forest, got {n}")
    if Y.shape != (n,):
        raise ValueError(f"Y has shape {Y.shape}, expected ({n},)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must be finite")
    mtry = config.resolve_mtry(p)
    max_depth = -1 if config.max_depth is None else int(config.max_depth)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    arrays = _fit_forest(X, Y, order, int(config.n_trees), mtry, int(config.min_leaf),
                         max_depth, np.uint64(config.seed), bool(config.bootstrap))
    return ForestModel(config, p, float(np.mean(Y)), *arrays)


def oob_predict(model: ForestModel, X) -> np.ndarray:
    """Out-of-bag predictions for the training rows.

    Row ``i`` gets the mean prediction of the trees that did not draw it.
    Rows drawn by every tree get the training mean of ``Y``; they are listed
    by ``model.never_oob``.
    """
    X = _as_matrix(X)
    if X.shape[0] != model.n_train:
        raise ValueError(
            f"oob_predict needs the training matrix: got {X.shape[0]} rows, "
            f"model was trained on {model.n_train}")
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} columns, got {X.shape[1]}")
    n_oob = model._oob_n
    out = np.full(model.n_train, model.y_mean)
    seen = n_oob > 0
    out[seen] = model._oob_sum[seen] / n_oob[seen]
    return out


def insample_predict(model: ForestModel) -> np.ndarray:
    """Predictions for the training rows using all trees (self included)."""
    return model._insample_sum / model.n_trees


def predict(model: ForestModel, x) -> np.ndarray | float:
    """Mean leaf value over all trees.

    Accepts a single feature vector (returns a float) or a matrix (returns
    one prediction per row).
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = np.ascontiguousarray(arr.reshape(1, -1) if single else arr)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected feature vectors of length {model.n_features}, "
                         f"got shape {arr.shape}")
    out = _predict_rows(model._feature, model._threshold, model._left, model._right,
                        model._value, X)
    return float(out[0]) if single else out


def variable_importance(model: ForestModel) -> np.ndarray:
    """Total sum-of-squares reduction per feature, normalized to sum to 1.

    Returns zeros when the forest contains no splits.
    """
    raw = np.asarray(model._importance_raw, dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        return np.zeros_like(raw)
    return raw / total


def set_threads(n: int) -> None:
    """Cap the numba thread pool used for concurrent tree growing."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
