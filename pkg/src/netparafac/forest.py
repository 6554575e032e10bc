"""CART trees and a bagged random forest with Gini splits.

Splits are exact: for every candidate feature the node's samples are
sorted and every midpoint between consecutive distinct values is scored,
so a handful of rare-class samples can always be isolated.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ForestConfig:
    n_trees: int = 50
    min_samples_leaf: int = 5
    max_depth: Optional[int] = None
    max_features: object = "sqrt"  # "sqrt", "all" or an int
    bootstrap: bool = True
    seed: int = 0


@dataclass
class Tree:
    """Flat array representation; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) class distribution
    importance: np.ndarray  # unnormalized impurity decrease per feature

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for n in range(len(self.feature)):
            if self.feature[n] >= 0:
                depth[self.left[n]] = depth[self.right[n]] = depth[n] + 1
        return int(depth.max())

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, x) -> np.ndarray:
        return self.value[self.apply(np.asarray(x, dtype=float))]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "importance")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=float), np.array(d["importance"], dtype=float))


def _gini_counts(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(-1)
    safe = np.where(n > 0, n, 1)
    return 1.0 - ((counts / safe[..., None]) ** 2).sum(-1)


def _best_split(vs, wy, counts, msl):
    """Lowest weighted child Gini over thresholds of one feature.

    ``vs`` are the node's values in ascending order and ``wy`` the matching
    weighted one-hot labels. Returns ``(child_impurity, threshold)`` or
    ``None`` when no threshold leaves ``msl`` samples on both sides.
    """
    n = counts.sum()
    cum = np.cumsum(wy, axis=0)[:-1]  # left counts for a cut after position i
    nl = cum.sum(1)
    ok = (vs[1:] > vs[:-1]) & (nl >= msl) & (n - nl >= msl)
    if not ok.any():
        return None
    cand = np.flatnonzero(ok)
    left = cum[cand]
    right = counts - left
    nlc = nl[cand]
    # n * weighted child Gini = n - sum(l^2)/n_l - sum(r^2)/n_r
    score = (left * left).sum(1) / nlc + (right * right).sum(1) / (n - nlc)
    b = int(np.argmax(score))
    i = cand[b]
    child = 1.0 - score[b] / n
    return float(child), float((vs[i] + vs[i + 1]) / 2)


def grow_tree(x, order, y, n_classes, sample, rng, cfg: ForestConfig, n_try: int) -> Tree:
    """Grow one CART tree on ``x`` (features x samples) over the rows in ``sample``.

    ``order[f]`` is the ascending argsort of feature ``f`` over all rows.
    Repeated rows in ``sample`` (bootstrap draws) become integer weights.
    Large nodes take their sort order from ``order``; small ones sort locally.
    """
    n_feat, n_rows = x.shape
    feature, threshold, left, right, value = [], [], [], [], []
    importance = np.zeros(n_feat)
    w = np.bincount(sample, minlength=n_rows).astype(float)
    n_total = w.sum()
    eye = np.eye(n_classes)
    in_node = np.zeros(n_rows, dtype=bool)

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.flatnonzero(w > 0), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], weights=w[idx], minlength=n_classes)
        value[node] = counts / counts.sum()
        n = counts.sum()
        if (counts > 0).sum() <= 1 or n < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        parent_imp = float(_gini_counts(counts))
        large = 8 * len(idx) > n_rows
        if large:
            in_node[idx] = True
        best = None
        for f in rng.permutation(n_feat)[:n_try]:
            if large:
                rows = order[f][in_node[order[f]]]
            else:
                rows = idx[np.argsort(x[f, idx], kind="stable")]
            wy = eye[y[rows]] * w[rows, None]
            found = _best_split(x[f, rows], wy, counts, cfg.min_samples_leaf)
            if found is None:
                continue
            gain = parent_imp - found[0]
            # zero-gain splits are kept: XOR-like data has no informative first cut
            if best is None or gain > best[0] + 1e-15:
                best = (gain, f, found[1])
        if large:
            in_node[idx] = False
        if best is None or best[0] < -1e-12:
            continue
        gain, f, thr = best
        go_left = x[f, idx] <= thr
        li, ri = idx[go_left], idx[~go_left]
        importance[f] += max(gain, 0.0) * n / n_total
        feature[node] = int(f)
        threshold[node] = thr
        ln, rn = new_node(), new_node()
        left[node], right[node] = ln, rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value), importance)


@dataclass
class ForestModel:
    """Bagged CART ensemble over the features in ``used_features``.

    Features that were constant on the training data cannot split and are
    excluded before any randomness is drawn, so adding such a column leaves
    every prediction unchanged.
    """

    trees: list
    n_features: int
    used_features: np.ndarray
    classes: np.ndarray
    config: ForestConfig
    meta: dict = field(default_factory=dict)

    def predict_proba(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected an (n, {self.n_features}) feature matrix")
        xu = x[:, self.used_features]
        out = np.zeros((len(x), len(self.classes)))
        for t in self.trees:
            out += t.predict_proba(xu)
        return out / len(self.trees)

    def predict(self, x) -> np.ndarray:
        return self.classes[self.predict_proba(x).argmax(1)]

    def to_dict(self):
        return {"n_features": self.n_features, "used_features": self.used_features.tolist(),
                "classes": self.classes.tolist(), "config": vars(self.config),
                "meta": self.meta, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        return cls([Tree.from_dict(t) for t in d["trees"]], d["n_features"],
                    np.array(d["used_features"], dtype=np.int64), np.array(d["classes"]),
                    ForestConfig(**d["config"]), d.get("meta", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _n_try(cfg: ForestConfig, n_feat: int) -> int:
    if cfg.max_features == "sqrt":
        return max(1, int(round(math.sqrt(n_feat))))
    if cfg.max_features == "all":
        return n_feat
    return max(1, min(n_feat, int(cfg.max_features)))


def train_forest(features, labels, cfg: Optional[ForestConfig] = None) -> ForestModel:
    """Bootstrap-bagged Gini CART trees with ``sqrt(n_features)`` candidates per split."""
    cfg = cfg or ForestConfig()
    x = np.asarray(features, dtype=float)
    y_raw = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y_raw) or len(x) == 0:
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    classes, y = np.unique(y_raw, return_inverse=True)
    n_feat = x.shape[1]
    if len(classes) < 2:
        log.warning("single-class training data; the forest predicts %r everywhere", classes[0])

    used = np.array([f for f in range(n_feat) if np.ptp(x[:, f]) > 0], dtype=np.int64)
    xt = np.ascontiguousarray(x[:, used].T)
    order = np.argsort(xt, axis=1, kind="stable")
    n_try = _n_try(cfg, max(len(used), 1))

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        if cfg.bootstrap:
            sample = rng.integers(0, len(x), len(x))
        else:
            sample = np.arange(len(x))
        trees.append(grow_tree(xt, order, y, len(classes), sample, rng, cfg, n_try))
    return ForestModel(trees, n_feat, used, classes, cfg)


def gini_importance(m: ForestModel) -> np.ndarray:
    """Mean (per-tree normalized) Gini impurity decrease, summing to one."""
    imp = np.zeros(m.n_features)
    n = 0
    for t in m.trees:
        total = t.importance.sum()
        if total > 0:
            imp[m.used_features] += t.importance / total
            n += 1
    if n == 0:
        return imp
    imp /= n
    return imp / imp.sum()
