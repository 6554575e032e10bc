"""Traffic scaling, residual features and the two-component GMM.

Residual feature order (columns of :func:`feature_matrix`)::

    0 down_bytes   1 up_bytes   2 down_pkts   3 up_pkts
    4 diff_bytes  (up_bytes - down_bytes)
    5 diff_pkts   (up_pkts - down_pkts)
    6 gmm_ll_0    7 gmm_ll_1   (optional per-component log densities)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .kmeans import lloyd

BASE_FEATURES = ("down_bytes", "up_bytes", "down_pkts", "up_pkts", "diff_bytes", "diff_pkts")
GMM_FEATURES = ("gmm_ll_0", "gmm_ll_1")
FEATURE_NAMES = BASE_FEATURES + GMM_FEATURES


@dataclass
class ScalingParams:
    """Per-metric min and max of ``log(1 + v)`` over the training split."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi < self.lo):
            raise ValueError("scaling max below min")

    def to_dict(self):
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])


def _check_raw(raw):
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise ValueError("traffic rates must be non-negative")
    return raw


def fit_scaling(raw, metric_axis: int = 1) -> ScalingParams:
    """Min/max of ``log1p`` per metric; ``raw`` has metrics along ``metric_axis``."""
    lg = np.log1p(_check_raw(raw))
    axes = tuple(a for a in range(lg.ndim) if a != metric_axis % lg.ndim)
    return ScalingParams(lg.min(axis=axes), lg.max(axis=axes))


def preprocess(raw, params: Optional[ScalingParams] = None, metric_axis: int = 1):
    """``(log(1 + v) - min) / (max - min)`` per metric.

    Without ``params`` the scaling is fitted on ``raw`` itself. A metric
    with ``max == min`` maps to zero. Returns ``(scaled, params)``.
    """
    raw = _check_raw(raw)
    if params is None:
        params = fit_scaling(raw, metric_axis)
    lg = np.log1p(raw)
    shape = [1] * lg.ndim
    shape[metric_axis] = -1
    lo = params.lo.reshape(shape)
    span = (params.hi - params.lo).reshape(shape)
    scaled = np.where(span > 0, (lg - lo) / np.where(span > 0, span, 1.0), 0.0)
    return scaled, params


@dataclass
class ResidualFeatures:
    entity: str
    minute: int
    values: np.ndarray
    gmm: Optional[np.ndarray] = None

    @property
    def vector(self) -> np.ndarray:
        return self.values if self.gmm is None else np.concatenate([self.values, self.gmm])


def _base(res):
    res = np.asarray(res, dtype=float)
    if res.shape[-2] != 4:
        raise ValueError("residuals must carry the four traffic metrics")
    d_b, u_b, d_p, u_p = (res[..., j, :] for j in range(4))
    return np.stack([d_b, u_b, d_p, u_p, u_b - d_b, u_p - d_p], axis=-1)


def extract_features(residual_slice, entity, minute: int) -> ResidualFeatures:
    """Six features of one minute; ``residual_slice`` is ``4 x K`` (or ``4``)."""
    r = np.asarray(residual_slice, dtype=float)
    if r.ndim == 1:
        if r.shape[0] != 4:
            raise ValueError("need the four traffic metrics")
        col = r[:, None]
    else:
        if r.shape[0] != 4:
            raise ValueError("need the four traffic metrics")
        col = r[:, minute:minute + 1]
    return ResidualFeatures(entity, minute, _base(col)[0])


def feature_matrix(residuals) -> np.ndarray:
    """Features for an ``n x 4 x K`` residual array, shape ``(n, K, 6)``."""
    return _base(residuals)


@dataclass
class Gmm2:
    """Two diagonal-covariance Gaussians; component 0 is the heavier one."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    meta: dict = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    def component_logpdf(self, x) -> np.ndarray:
        """``(n, 2)`` log densities of each component (weights excluded)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], len(self.weights)))
        for c in range(len(self.weights)):
            v = self.variances[c]
            z = (x - self.means[c]) ** 2 / v
            out[:, c] = -0.5 * (z.sum(1) + np.log(2 * np.pi * v).sum())
        return out

    def log_likelihood(self, x) -> float:
        lp = self.component_logpdf(x) + np.log(self.weights)
        m = lp.max(1, keepdims=True)
        return float((m[:, 0] + np.log(np.exp(lp - m).sum(1))).sum())

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "meta": self.meta or {}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["variances"], d.get("meta"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_gmm2(features, seed: int = 0, max_iters: int = 200, tol: float = 1e-6,
             var_floor: float = 1e-9, max_points: Optional[int] = None) -> Gmm2:
    """EM for a two-component diagonal GMM, initialized by 2-means.

    ``meta["history"]`` records the training log-likelihood after every
    EM iteration. ``max_points`` fits on a seeded random subsample.
    """
    x = np.asarray(features, dtype=float)
    x = x.reshape(-1, x.shape[-1])
    rng = np.random.default_rng(seed)
    if max_points is not None and len(x) > max_points:
        x = x[rng.choice(len(x), max_points, replace=False)]
    if len(x) < 2 or len(np.unique(x, axis=0)) < 2:
        raise ValueError("fit_gmm2 needs at least two distinct points")

    km = lloyd(x, 2, seed=seed)
    resp = np.zeros((len(x), 2))
    resp[np.arange(len(x)), km.labels] = 1.0
    history = []
    ll_prev = None
    g = None
    for it in range(max_iters):
        nk = resp.sum(0) + 1e-300
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ (x * x)) / nk[:, None] - means ** 2
        variances = np.maximum(variances, var_floor)
        weights = np.clip(weights, 1e-12, None)
        weights /= weights.sum()
        g = Gmm2(weights, means, variances)
        lp = g.component_logpdf(x) + np.log(weights)
        m = lp.max(1, keepdims=True)
        lse = m + np.log(np.exp(lp - m).sum(1, keepdims=True))
        ll = float(lse.sum())
        history.append(ll)
        resp = np.exp(lp - lse)
        if ll_prev is not None and abs(ll - ll_prev) <= tol * abs(ll_prev):
            break
        ll_prev = ll
    order = np.argsort(-g.weights, kind="stable")
    return Gmm2(g.weights[order], g.means[order], g.variances[order],
                {"history": history, "iterations": len(history), "seed": seed})


def gmm_likelihood_features(f, g: Gmm2) -> np.ndarray:
    """Per-component log densities, appended as features 7 and 8.

    ``f`` is a :class:`ResidualFeatures` or an array whose last axis holds
    the six base features.
    """
    if isinstance(f, ResidualFeatures):
        return g.component_logpdf(f.values)[0]
    arr = np.asarray(f, dtype=float)
    flat = g.component_logpdf(arr.reshape(-1, arr.shape[-1]))
    return flat.reshape(*arr.shape[:-1], 2)


def write_feature_csv(path, feats: np.ndarray, entities, minutes, labels=None) -> None:
    """Rows of ``entity,minute,<features...>[,label]`` with a named header."""
    names = FEATURE_NAMES[: feats.shape[1]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "minute", *names] + (["label"] if labels is not None else []))
        for n in range(feats.shape[0]):
            row = [entities[n], int(minutes[n]), *(repr(float(v)) for v in feats[n])]
            if labels is not None:
                row.append(int(labels[n]))
            w.writerow(row)
