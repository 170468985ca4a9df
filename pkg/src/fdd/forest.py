"""Bagged CART trees with the out-of-bag bookkeeping needed for exact proximity computation.

Each tree keeps its full bootstrap count vector and every sample's terminal
node, so the proximity of sample i to sample j can be evaluated exactly:
average, over the trees where i is out-of-bag, of j's in-bag multiplicity in
i's terminal node divided by that node's total in-bag mass. Rows of the
resulting affinity matrix therefore sum to one, and proximity-weighted
prediction reproduces the forest's own out-of-bag prediction.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass

import numpy as np

_TIE_EPS = 1e-9  # score gap below which an OOB vote counts as tied


@dataclass
class ForestConfig:
    n_trees: int = 500
    max_depth: int | None = None
    min_leaf: int = 1
    mtry: int | None = None  # default ceil(sqrt(p))
    task: str = "classification"
    seed: int = 0


class _Tree:
    """CART tree stored as parallel node arrays; feature == -1 marks a leaf."""

    def __init__(self, task: str, n_classes: int):
        self.task = task
        self.n_classes = n_classes
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[np.ndarray | float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def finalize(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.int32)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int32)
        self.right = np.asarray(self.right, dtype=np.int32)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Terminal-node index for every row of X (vectorized level walk)."""
        node = np.zeros(len(X), dtype=np.int32)
        while True:
            feat = self.feature[node]
            active = np.where(feat >= 0)[0]
            if active.size == 0:
                return node
            cur = node[active]
            go_left = X[active, feat[active]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def leaf_distribution(self, node: int) -> np.ndarray:
        counts = self.value[node]
        return counts / counts.sum()


def _class_impurity(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - float(p @ p)


def _best_split(xcol, y, w, n_classes, parent_imp, min_leaf, task):
    """Best (threshold, impurity decrease) for one feature, or None.

    Thresholds are midpoints between consecutive distinct values; within the
    feature the lowest qualifying threshold wins on exact score ties.
    """
    order = np.argsort(xcol, kind="stable")
    sv, sw, sy = xcol[order], w[order], y[order]
    total_w = sw.sum()
    boundaries = np.where(sv[:-1] < sv[1:])[0]
    if boundaries.size == 0:
        return None
    wl = np.cumsum(sw)[boundaries]
    wr = total_w - wl
    ok = (wl >= min_leaf) & (wr >= min_leaf)
    if not ok.any():
        return None
    if task == "classification":
        left_counts = np.empty((boundaries.size, n_classes))
        for c in range(n_classes):
            left_counts[:, c] = np.cumsum(sw * (sy == c))[boundaries]
        totals = np.array([np.sum(sw * (sy == c)) for c in range(n_classes)])
        right_counts = totals[None, :] - left_counts
        gl = 1.0 - np.sum((left_counts / wl[:, None]) ** 2, axis=1)
        gr = 1.0 - np.sum((right_counts / wr[:, None]) ** 2, axis=1)
    else:
        s1 = np.cumsum(sw * sy)[boundaries]
        s2 = np.cumsum(sw * sy * sy)[boundaries]
        t1 = np.sum(sw * sy)
        t2 = np.sum(sw * sy * sy)
        gl = s2 / wl - (s1 / wl) ** 2
        gr = (t2 - s2) / wr - ((t1 - s1) / wr) ** 2
    decrease = parent_imp - (wl / total_w) * gl - (wr / total_w) * gr
    decrease[~ok] = -np.inf
    best = int(np.argmax(decrease))  # argmax keeps the lowest boundary on ties
    if decrease[best] <= 1e-12:
        return None
    thr = 0.5 * (sv[boundaries[best]] + sv[boundaries[best] + 1])
    return thr, float(decrease[best])


def _grow(tree, X, y, w, idx, depth, cfg, n_classes, rng):
    node = tree._new_node()
    wsub = w[idx]
    ysub = y[idx]
    if cfg.task == "classification":
        counts = np.zeros(n_classes)
        np.add.at(counts, ysub.astype(int), wsub)
        tree.value[node] = counts
        parent_imp = _class_impurity(counts)
    else:
        tree.value[node] = float(np.average(ysub, weights=wsub))
        mean = np.average(ysub, weights=wsub)
        parent_imp = float(np.average((ysub - mean) ** 2, weights=wsub))
    if (
        parent_imp <= 1e-12
        or wsub.sum() < 2 * cfg.min_leaf
        or (cfg.max_depth is not None and depth >= cfg.max_depth)
    ):
        return node
    p = X.shape[1]
    mtry = cfg.mtry if cfg.mtry is not None else math.ceil(math.sqrt(p))
    feats = np.sort(rng.choice(p, size=min(mtry, p), replace=False))
    best = None  # (decrease, feature, threshold); lowest feature index wins ties
    for f in feats:
        found = _best_split(X[idx, f], ysub, wsub, n_classes, parent_imp, cfg.min_leaf, cfg.task)
        if found is not None:
            thr, dec = found
            if best is None or dec > best[0] + 1e-15:
                best = (dec, f, thr)
    if best is None:
        return node
    _, f, thr = best
    go_left = X[idx, f] <= thr
    tree.feature[node] = int(f)
    tree.threshold[node] = float(thr)
    tree.left[node] = _grow(tree, X, y, w, idx[go_left], depth + 1, cfg, n_classes, rng)
    tree.right[node] = _grow(tree, X, y, w, idx[~go_left], depth + 1, cfg, n_classes, rng)
    return node


class Forest:
    """Fitted bagged trees plus per-tree bootstrap counts and terminal-node table."""

    def __init__(self, trees, inbag_counts, leaf_ids, task, n_classes, config):
        self.trees = trees
        self.inbag_counts = inbag_counts  # (n_trees, n) bootstrap multiplicities
        self.leaf_ids = leaf_ids  # (n_trees, n) terminal node of every training row
        self.task = task
        self.n_classes = n_classes
        self.config = config
        self.n = inbag_counts.shape[1]

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def oob_tree_sets(self) -> list[np.ndarray]:
        """S_i: the trees for which sample i is out-of-bag (bootstrap count zero)."""
        return [np.where(self.inbag_counts[:, i] == 0)[0] for i in range(self.n)]

    def oob_scores(self) -> np.ndarray:
        """Per-sample OOB prediction scores.

        Classification: mean over OOB trees of the terminal node's in-bag class
        distribution (n, n_classes). Regression: mean of terminal-node means (n,).
        Samples that are never OOB raise.
        """
        n_oob = (self.inbag_counts == 0).sum(axis=0)
        if (n_oob == 0).any():
            bad = int(np.argmin(n_oob))
            raise ValueError(
                f"sample {bad} is in-bag in every tree; fit more trees to get OOB estimates"
            )
        if self.task == "classification":
            scores = np.zeros((self.n, self.n_classes))
        else:
            scores = np.zeros(self.n)
        for t, tree in enumerate(self.trees):
            oob = self.inbag_counts[t] == 0
            leaves = self.leaf_ids[t, oob]
            if self.task == "classification":
                dist = np.array([tree.leaf_distribution(l) for l in leaves])
                scores[oob] += dist
            else:
                scores[oob] += np.array([tree.value[l] for l in leaves])
        if self.task == "classification":
            return scores / n_oob[:, None]
        return scores / n_oob

    def oob_predictions(self):
        """(predictions, untied mask) from oob_scores; ties use a 1e-9 score gap."""
        scores = self.oob_scores()
        if self.task == "regression":
            return scores, np.ones(self.n, dtype=bool)
        order = np.sort(scores, axis=1)
        untied = (order[:, -1] - order[:, -2]) > _TIE_EPS
        return np.argmax(scores, axis=1), untied

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        """Out-of-training prediction: average over all trees."""
        X = np.asarray(X, dtype=float)
        if self.task == "classification":
            scores = np.zeros((len(X), self.n_classes))
        else:
            scores = np.zeros(len(X))
        for tree in self.trees:
            leaves = tree.apply(X)
            if self.task == "classification":
                scores += np.array([tree.leaf_distribution(l) for l in leaves])
            else:
                scores += np.array([tree.value[l] for l in leaves])
        return scores / self.n_trees


def fit_forest(X: np.ndarray, y: np.ndarray, config: ForestConfig | None = None) -> Forest:
    """Fit bagged CART trees on bootstrap resamples, recording OOB bookkeeping.

    Deterministic for a given seed: per-tree RNG streams are spawned from the
    config seed, splits use midpoint thresholds, and ties go to the lowest
    feature index.
    """
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = len(X)
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if len(y) != n:
        raise ValueError(f"y length {len(y)} != n samples {n}")
    if config.n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {config.n_trees}")
    if config.task not in ("classification", "regression"):
        raise ValueError(f"unknown task {config.task!r}")
    if config.task == "classification":
        y = y.astype(int)
        n_classes = int(y.max()) + 1 if len(np.unique(y)) > 1 else 1
        if len(np.unique(y)) < 2:
            raise ValueError("y is constant; classification needs at least two classes")
    else:
        y = y.astype(float)
        n_classes = 0

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    trees = []
    inbag = np.zeros((config.n_trees, n), dtype=np.int32)
    leaf_ids = np.zeros((config.n_trees, n), dtype=np.int32)
    for t in range(config.n_trees):
        rng = np.random.default_rng(seeds[t])
        boot = rng.integers(0, n, size=n)
        counts = np.bincount(boot, minlength=n).astype(np.int32)
        inbag[t] = counts
        tree = _Tree(config.task, n_classes)
        idx = np.where(counts > 0)[0]
        _grow(tree, X, y, counts.astype(float), idx, 0, config, n_classes, rng)
        tree.finalize()
        trees.append(tree)
        leaf_ids[t] = tree.apply(X)
    return Forest(trees, inbag, leaf_ids, config.task, n_classes, config)


# ---------------------------------------------------------------------------
# Proximities
# ---------------------------------------------------------------------------


def rf_gap(forest: Forest, i: int, j: int) -> float:
    """Proximity of i to j: mean over i's OOB trees of j's in-bag multiplicity in
    i's terminal node, normalized by that node's total in-bag mass."""
    oob_trees = np.where(forest.inbag_counts[:, i] == 0)[0]
    if oob_trees.size == 0:
        raise ValueError(
            f"sample {i} is never out-of-bag; fit more trees (n_trees={forest.n_trees})"
        )
    total = 0.0
    for t in oob_trees:
        li = forest.leaf_ids[t, i]
        if forest.leaf_ids[t, j] != li:
            continue
        c = forest.inbag_counts[t]
        same_leaf = forest.leaf_ids[t] == li
        leaf_mass = float(c[same_leaf].sum())
        total += c[j] / leaf_mass
    return total / oob_trees.size


class ProximityMatrix:
    """Dense n x n nonnegative affinities; rows are generally asymmetric."""

    def __init__(self, K: np.ndarray):
        K = np.asarray(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"proximity matrix must be square, got {K.shape}")
        if not np.isfinite(K).all():
            raise ValueError("proximity matrix contains NaN or Inf")
        if (K < 0).any():
            raise ValueError("proximity matrix has negative entries")
        self.K = K
        self.n = K.shape[0]


def proximity_matrix(forest: Forest, zero_diagonal: bool = True) -> ProximityMatrix:
    """All pairwise proximities; row i is averaged over the trees where i is OOB.

    The diagonal is zero by construction (an OOB sample has bootstrap count
    zero), and is re-zeroed explicitly before diffusion use.
    """
    n = forest.n
    prox = np.zeros((n, n))
    n_oob = np.zeros(n)
    for t in range(forest.n_trees):
        c = forest.inbag_counts[t].astype(float)
        L = forest.leaf_ids[t]
        leaf_mass = np.bincount(L, weights=c)
        oob = c == 0
        if not oob.any():
            continue
        same = L[oob, None] == L[None, :]
        prox[oob] += same * (c[None, :] / leaf_mass[L[oob], None])
        n_oob += oob
    if (n_oob == 0).any():
        bad = int(np.argmin(n_oob))
        raise ValueError(
            f"sample {bad} is never out-of-bag across {forest.n_trees} trees; fit more trees"
        )
    prox /= n_oob[:, None]
    if zero_diagonal:
        np.fill_diagonal(prox, 0.0)
    return ProximityMatrix(prox)


def oos_proximity(forest: Forest, X_new: np.ndarray) -> np.ndarray:
    """Proximity rows of new samples against the training set.

    A new sample is out-of-bag for every tree, so each tree contributes the
    in-bag distribution of the terminal node the sample lands in.
    """
    X_new = np.asarray(X_new, dtype=float)
    m = len(X_new)
    prox = np.zeros((m, forest.n))
    for t, tree in enumerate(forest.trees):
        c = forest.inbag_counts[t].astype(float)
        L_train = forest.leaf_ids[t]
        leaf_mass = np.bincount(L_train, weights=c)
        L_new = tree.apply(X_new)
        same = L_new[:, None] == L_train[None, :]
        prox += same * (c[None, :] / leaf_mass[L_new, None])
    return prox / forest.n_trees


def proximity_predict(K: ProximityMatrix, y: np.ndarray, task: str = "classification"):
    """Proximity-weighted prediction from training labels.

    Classification: argmax of per-class proximity mass. Regression: the
    proximity-weighted mean. Rows with zero total proximity abstain (error).
    """
    M = K.K
    row_mass = M.sum(axis=1)
    if (row_mass <= 0).any():
        bad = int(np.argmin(row_mass))
        raise ValueError(f"row {bad} of the proximity matrix is all zero; cannot predict")
    if task == "regression":
        return (M @ np.asarray(y, dtype=float)) / row_mass
    y = np.asarray(y, dtype=int)
    n_classes = int(y.max()) + 1
    onehot = np.eye(n_classes)[y]
    return np.argmax(M @ onehot, axis=1)


def proximity_scores(K: ProximityMatrix, y: np.ndarray) -> np.ndarray:
    """Per-class proximity mass (the argmax input of proximity_predict)."""
    y = np.asarray(y, dtype=int)
    onehot = np.eye(int(y.max()) + 1)[y]
    return K.K @ onehot


def export_proximity_csv(K: ProximityMatrix, path) -> None:
    """Sparse triplet export: one `i,j,value` line per nonzero entry."""
    with open(path, "w") as fh:
        fh.write("i,j,value\n")
        rows, cols = np.nonzero(K.K)
        for i, j in zip(rows, cols):
            fh.write(f"{i},{j},{float(K.K[i, j])!r}\n")


def save_forest(forest: Forest, path) -> None:
    """Checkpoint: tree structures plus bootstrap count vectors (versioned)."""
    blob = {
        "version": 1,
        "task": forest.task,
        "n_classes": forest.n_classes,
        "config": forest.config,
        "inbag_counts": forest.inbag_counts,
        "leaf_ids": forest.leaf_ids,
        "trees": [
            {
                "feature": t.feature,
                "threshold": t.threshold,
                "left": t.left,
                "right": t.right,
                "value": t.value,
            }
            for t in forest.trees
        ],
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def load_forest(path) -> Forest:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("version") != 1:
        raise ValueError(f"{path}: unsupported forest checkpoint version")
    trees = []
    for td in blob["trees"]:
        tree = _Tree(blob["task"], blob["n_classes"])
        tree.feature = td["feature"]
        tree.threshold = td["threshold"]
        tree.left = td["left"]
        tree.right = td["right"]
        tree.value = td["value"]
        trees.append(tree)
    return Forest(
        trees, blob["inbag_counts"], blob["leaf_ids"], blob["task"], blob["n_classes"], blob["config"]
    )
