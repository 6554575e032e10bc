"""Attack classification metrics and synchronized-attack aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .forest import ForestConfig, ForestModel, gini_importance, train_forest  # noqa: F401


@dataclass
class EvalReport:
    precision: float
    detection_accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_attacks: int
    n_detected: int
    delays: list = field(default_factory=list)
    precision_defined: bool = True

    def delay_fraction(self, within: int) -> float:
        """Fraction of detected attacks flagged no later than ``within`` minutes."""
        if not self.delays:
            return float("nan")
        return float(np.mean(np.asarray(self.delays) <= within))

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        rows = [("Precision", f"{self.precision:.4f}" + ("" if self.precision_defined else " (no positives)")),
                ("Detection Accuracy", f"{self.detection_accuracy:.4f}"),
                ("Attacks detected", f"{self.n_detected}/{self.n_attacks}"),
                ("TP / FP / FN / TN (minutes)", f"{self.tp} / {self.fp} / {self.fn} / {self.tn}")]
        if self.delays:
            rows.append(("Detected within 1 min", f"{self.delay_fraction(1):.4f}"))
            rows.append(("Detected within 2 min", f"{self.delay_fraction(2):.4f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(predictions, ground_truth, episodes: Optional[Sequence] = None) -> EvalReport:
    """Minute-level precision and episode-level detection accuracy.

    ``predictions`` and ``ground_truth`` are boolean arrays of shape
    ``(n_rows, n_minutes)`` (one row per entity or entity-day). ``episodes``
    lists ``(row, start, stop)`` attack spans; by default every maximal run
    of true labels in a row is one episode. An episode is detected when at
    least one of its minutes is flagged; its delay is the first flagged
    minute minus the start plus one.
    """
    pred = np.asarray(predictions, dtype=bool)
    truth = np.asarray(ground_truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"predictions {pred.shape} and labels {truth.shape} are misaligned")
    if pred.ndim == 1:
        pred, truth = pred[None], truth[None]
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    tn = int((~pred & ~truth).sum())
    if episodes is None:
        episodes = label_runs(truth)
    delays = []
    for row, start, stop in episodes:
        hits = np.flatnonzero(pred[row, start:stop])
        if hits.size:
            delays.append(int(hits[0]) + 1)
    n = len(episodes)
    defined = tp + fp > 0
    return EvalReport(
        precision=tp / (tp + fp) if defined else 1.0,
        detection_accuracy=len(delays) / n if n else float("nan"),
        tp=tp, fp=fp, fn=fn, tn=tn, n_attacks=n, n_detected=len(delays),
        delays=delays, precision_defined=defined,
    )


def label_runs(labels) -> list:
    """Maximal runs of ``True`` per row as ``(row, start, stop)``."""
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    out = []
    for r, row in enumerate(labels):
        d = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
        for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            out.append((r, int(s), int(e)))
    return out


@dataclass
class MapAggregatorParams:
    n_homes: int = 812
    prior_attack: float = 0.0014
    p_fp: float = 2.64e-6
    p_rc: float = 0.8266
    q: float = 0.05

    def __post_init__(self):
        for name in ("prior_attack", "p_fp", "p_rc", "q"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.q * self.n_homes < 1:
            raise ValueError("q * n_homes must be >= 1")


@dataclass
class MapThreshold:
    m0: float
    threshold: int
    type1: float
    type2: float
    h1_model: str


def map_threshold(p: MapAggregatorParams, h1_model: str = "mixture") -> MapThreshold:
    """MAP count threshold for declaring a synchronized attack.

    Under H0 the number of reporting homes is ``Binomial(n, p_fp)``. Under
    H1 with ``h1_model="mixture"`` every home is independently infected
    with probability ``q``, so reports are ``Binomial(n, q p_rc + (1 - q)
    p_fp)`` and the log posterior odds are linear in the count; ``m0`` is
    their root. With ``h1_model="split"`` exactly ``ceil(q n)`` homes are
    infected and H1 is the convolution of two binomials; ``m0`` then
    interpolates the log odds linearly between integer counts.
    The decision threshold is ``ceil(m0)``; ``type1`` and ``type2`` are
    the false-alarm and miss probabilities at that threshold.
    """
    n, pd, p0 = p.n_homes, p.prior_attack, p.p_fp
    if pd in (0.0, 1.0) or p0 in (0.0, 1.0) or p.p_rc in (0.0, 1.0):
        raise ValueError("degenerate probabilities: posterior odds undefined")
    if p.p_rc == p0:
        raise ValueError("p_rc == p_fp: hypotheses are indistinguishable")
    prior_log_odds = math.log(pd / (1 - pd))
    if h1_model == "mixture":
        p1 = p.q * p.p_rc + (1 - p.q) * p0
        slope = math.log(p1 / p0) - math.log((1 - p1) / (1 - p0))
        intercept = n * math.log((1 - p1) / (1 - p0)) + prior_log_odds
        if slope <= 0:
            raise ValueError("reports are not more likely under attack; no threshold")
        m0 = -intercept / slope
        thr = max(0, math.ceil(m0))
        type2 = float(stats.binom.cdf(thr - 1, n, p1)) if thr > 0 else 0.0
    elif h1_model == "split":
        n_inf = math.ceil(p.q * n - 1e-9)
        pmf1 = np.convolve(stats.binom.pmf(np.arange(n_inf + 1), n_inf, p.p_rc),
                           stats.binom.pmf(np.arange(n - n_inf + 1), n - n_inf, p0))
        k = np.arange(n + 1)
        with np.errstate(divide="ignore"):
            lo = np.log(pmf1) - stats.binom.logpmf(k, n, p0) + prior_log_odds
        pos = np.flatnonzero(lo > 0)
        if pos.size == 0:
            raise ValueError("posterior never favours an attack")
        thr = int(pos[0])
        if thr == 0:
            m0 = 0.0
        else:
            a, b = lo[thr - 1], lo[thr]
            m0 = thr - 1 + (-a / (b - a) if np.isfinite(a) else 1.0)
        type2 = float(pmf1[:thr].sum())
    else:
        raise ValueError(f"unknown h1_model {h1_model!r}")
    type1 = float(stats.binom.sf(thr - 1, n, p0)) if thr > 0 else 1.0
    return MapThreshold(float(m0), int(thr), type1, type2, h1_model)


def aggregate_sync(per_home_flags, threshold: int) -> np.ndarray:
    """Synchronized-attack verdict per minute: at least ``threshold`` homes flagged.

    ``per_home_flags`` is ``(n_homes, n_minutes)``.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    flags = np.atleast_2d(np.asarray(per_home_flags, dtype=bool))
    return flags.sum(0) >= threshold


@dataclass
class LogisticModel:
    """L2-regularized logistic regression on standardized features."""

    coef: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray

    def decision_function(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.scale
        return z @ self.coef + self.intercept

    def predict_proba(self, x):
        p = 1 / (1 + np.exp(-self.decision_function(x)))
        return np.column_stack([1 - p, p])

    def predict(self, x):
        return self.decision_function(x) > 0


def train_logistic(features, labels, l2: float = 1e-3, class_weight=None) -> LogisticModel:
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    mean = x.mean(0)
    scale = x.std(0)
    scale = np.where(scale > 0, scale, 1.0)
    z = (x - mean) / scale
    w = np.ones(len(y))
    if class_weight == "balanced":
        pos = y.mean()
        if 0 < pos < 1:
            w = np.where(y > 0, 0.5 / pos, 0.5 / (1 - pos))
    w = w / w.sum()

    def loss(theta):
        coef, b = theta[:-1], theta[-1]
        s = z @ coef + b
        # log(1 + exp(s)) - y s, computed stably
        ll = np.logaddexp(0, s) - y * s
        g = 1 / (1 + np.exp(-s)) - y
        val = (w * ll).sum() + 0.5 * l2 * coef @ coef
        grad = np.append(z.T @ (w * g) + l2 * coef, (w * g).sum())
        return val, grad

    res = optimize.minimize(loss, np.zeros(z.shape[1] + 1), jac=True, method="L-BFGS-B")
    return LogisticModel(res.x[:-1], float(res.x[-1]), mean, scale)
