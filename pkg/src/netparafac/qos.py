"""QoS residual clustering: preprocessing, residual statistics, k-means and regions.

Preprocessing rules for one entity-day:

* a minute with no client measurement is unavailable; its loss is encoded
  as 1 and its latency is masked,
* a minute where the measurement server was offline is masked in both
  series,
* a minute with cross-traffic above ``theta`` is masked in both series,
  after the loss encoding, so encoded minutes are also filtered,
* a day whose loss series keeps fewer than ``eta`` observed minutes is
  dropped,
* latency becomes ``log(latency)`` and loss becomes ``log(loss + eps)``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cp import AlsConfig, als_fit, residual
from .datagen import MINUTES, QosDay, Topology
from .kmeans import lloyd
from .tensor import Tensor3

log = logging.getLogger(__name__)

QOS_FEATURES = tuple(f"{s}_{stat}" for s in ("latency", "loss_excl", "loss_all")
                     for stat in ("mean", "std", "p95"))
CLUSTER_NAMES = {
    "C1": "good",
    "C2": "moderate loss",
    "C3": "high latency",
    "C4": "high unavailability",
    "C5": "unavailability and loss",
}


@dataclass
class QosTensor:
    """Preprocessed entity-day tensor, modes ``(entity-day, {latency, loss}, minute)``."""

    tensor: Tensor3
    ids: list  # (entity, day) per first-mode row
    loss_is_one: np.ndarray  # (n, 1440) minutes whose encoded loss is exactly 1
    dropped: list = field(default_factory=list)
    theta: float = 2.5
    eta: int = 1000
    eps: float = 0.01


def qos_preprocess(days: Sequence[QosDay], theta: float = 2.5, eta: int = 1000,
                   eps: float = 0.01) -> QosTensor:
    if theta <= 0:
        raise ValueError("theta must be positive")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    vals, masks, ones, ids, dropped = [], [], [], [], []
    for d in days:
        lat = np.asarray(d.latency, dtype=float).copy()
        loss = np.asarray(d.loss, dtype=float).copy()
        missing = np.asarray(d.missing, dtype=bool)
        offline = np.asarray(d.server_offline, dtype=bool)
        if lat.shape != (MINUTES,) or loss.shape != (MINUTES,):
            raise ValueError(f"{d.entity_id} day {d.day}: expected {MINUTES} minutes")
        loss[missing & ~offline] = 1.0
        lat_ok = np.isfinite(lat) & ~missing & ~offline
        loss_ok = np.isfinite(loss) & ~offline
        busy = np.asarray(d.cross_traffic, dtype=float) > theta
        lat_ok &= ~busy
        loss_ok &= ~busy
        if loss_ok.sum() < eta:
            dropped.append((d.entity_id, d.day))
            continue
        if np.any(lat[lat_ok] <= 0):
            raise ValueError(f"{d.entity_id} day {d.day}: non-positive latency")
        v = np.zeros((2, MINUTES))
        v[0, lat_ok] = np.log(lat[lat_ok])
        v[1, loss_ok] = np.log(np.clip(loss[loss_ok], 0, 1) + eps)
        vals.append(v)
        masks.append(np.stack([lat_ok, loss_ok]))
        ones.append(loss_ok & (loss == 1.0))
        ids.append((d.entity_id, d.day))
    if not ids:
        raise ValueError("every entity-day was dropped by the sample-count filter")
    if dropped:
        log.info("dropped %d of %d entity-days with fewer than %d samples",
                 len(dropped), len(days), eta)
    t = Tensor3(np.array(vals), np.array(masks))
    return QosTensor(t, ids, np.array(ones), dropped, theta, eta, eps)


def fit_qos_model(q: QosTensor, rank: int = 4, cfg: Optional[AlsConfig] = None):
    """PARAFAC normal subspace of the QoS tensor; returns ``(model, residual)``."""
    model = als_fit(q.tensor, rank, cfg or AlsConfig())
    return model, residual(q.tensor, model)


def _stats(x: np.ndarray) -> tuple:
    # p95 is the nearest-rank percentile
    return float(x.mean()), float(x.std()), float(np.percentile(x, 95, method="inverted_cdf"))


@dataclass
class QosFeatures:
    ids: list
    values: np.ndarray  # (n, 9) in QOS_FEATURES order
    excl_absent: np.ndarray  # (n,) no samples left after excluding loss == 1


def qos_residual_stats(res: Tensor3, loss_is_one, ids=None) -> QosFeatures:
    """Nine residual statistics per entity-day.

    ``res`` holds ``(n, 2, 1440)`` residuals with the preprocessing mask.
    When every observed loss minute of a day is an encoded 1 the
    "excluding" statistics are set to zero and flagged in ``excl_absent``.
    """
    r = res.values
    obs = res.observed
    ones = np.asarray(loss_is_one, dtype=bool)
    n = r.shape[0]
    out = np.zeros((n, 9))
    absent = np.zeros(n, dtype=bool)
    for i in range(n):
        lat = r[i, 0, obs[i, 0]]
        loss_all = r[i, 1, obs[i, 1]]
        loss_ex = r[i, 1, obs[i, 1] & ~ones[i]]
        if lat.size:
            out[i, 0:3] = _stats(lat)
        if loss_ex.size:
            out[i, 3:6] = _stats(loss_ex)
        else:
            absent[i] = True
        if loss_all.size:
            out[i, 6:9] = _stats(loss_all)
    return QosFeatures(list(ids) if ids is not None else list(range(n)), out, absent)


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, d) in z-scored space
    mean: np.ndarray
    std: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list

    @property
    def k(self) -> int:
        return len(self.centroids)

    def zscore(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.mean) / self.std

    def assign(self, points) -> np.ndarray:
        z = self.zscore(points)
        d = ((z[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(1)


def zscore_params(points):
    x = np.asarray(points, dtype=float)
    mean = x.mean(0)
    std = x.std(0)
    return mean, np.where(std > 0, std, 1.0)


def kmeans(points, k: int, seed=0, n_init: int = 10, max_iter: int = 300) -> ClusterModel:
    """z-score the points, then k-means++ seeded Lloyd iterations."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    mean, std = zscore_params(x)
    z = (x - mean) / std
    r = lloyd(z, k, seed=seed, max_iter=max_iter, n_init=n_init)
    return ClusterModel(r.centroids, mean, std, r.labels, r.inertia, r.history)


@dataclass
class ElbowResult:
    k: int
    ks: list
    inertia: list
    knee_distance: float  # normalized distance of the knee to the chord
    low_confidence: bool


def elbow_select(points, k_range=range(1, 11), seed=0, n_init: int = 10,
                 min_knee: float = 0.3) -> ElbowResult:
    """Knee of the inertia curve by maximum distance to the endpoint chord.

    Both axes are rescaled to ``[0, 1]`` before measuring distances. A knee
    closer than ``min_knee`` to the chord is flagged as low confidence.
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("empty k range")
    x = np.asarray(points, dtype=float)
    mean, std = zscore_params(x)
    z = (x - mean) / std
    inertia = [lloyd(z, k, seed=seed, n_init=n_init).inertia for k in ks]
    if len(ks) < 3:
        return ElbowResult(ks[0], ks, inertia, 0.0, True)
    kk = np.asarray(ks, dtype=float)
    w = np.asarray(inertia)
    span = w[0] - w[-1]
    if span <= 0:
        return ElbowResult(ks[0], ks, inertia, 0.0, True)
    u = (kk - kk[0]) / (kk[-1] - kk[0])
    v = (w - w[-1]) / span
    # chord from (0, 1) to (1, 0): distance of (u, v) is |u + v - 1| / sqrt(2)
    dist = (1 - u - v) / np.sqrt(2)
    best = int(np.argmax(dist))
    knee = float(dist[best])
    return ElbowResult(ks[best], ks, inertia, knee, knee < min_knee)


# ------------------------------------------------------------- summaries


@dataclass
class ClusterSummary:
    cluster: int
    size: int
    latency: np.ndarray  # median over members, per-day minimum subtracted
    loss: np.ndarray  # median over members, unavailable minutes as 1
    missing: np.ndarray  # fraction of members unavailable per minute
    missing_fraction: float
    mean_loss: float
    latency_peak: float
    name: str = ""


def _raw_series(d: QosDay):
    lat = np.where(d.missing | d.server_offline, np.nan, d.latency)
    lat = lat - np.nanmin(lat) if np.isfinite(lat).any() else lat
    loss = np.where(d.missing & ~d.server_offline, 1.0, d.loss)
    return lat, loss, np.asarray(d.missing, dtype=float)


def name_clusters(summaries, miss_thr: float = 0.02, loss_thr: float = 0.01,
                  latency_thr: float = 20.0) -> list:
    """Map clusters to C1..C5 by thresholding their summary statistics.

    ``miss_thr`` applies to the mean unavailable fraction, ``loss_thr`` to
    the mean loss over available minutes and ``latency_thr`` (ms) to the
    95th percentile of the normalized median latency curve.
    """
    names = []
    for s in summaries:
        if s.size == 0:
            names.append("empty")
        elif s.missing_fraction > miss_thr:
            names.append("C5" if s.mean_loss > loss_thr else "C4")
        elif s.latency_peak > latency_thr:
            names.append("C3")
        elif s.mean_loss > loss_thr:
            names.append("C2")
        else:
            names.append("C1")
    return names


def summarize_clusters(labels, ids, days: Sequence[QosDay], k: Optional[int] = None,
                       **name_kw) -> list:
    """Per-cluster median curves behind the cluster characterization plots."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    by_id = {(d.entity_id, d.day): d for d in days}
    out = []
    for c in range(k):
        members = [by_id[ids[i]] for i in np.flatnonzero(labels == c)]
        if not members:
            nan = np.full(MINUTES, np.nan)
            out.append(ClusterSummary(c, 0, nan, nan, nan, float("nan"), float("nan"), float("nan")))
            continue
        lat, loss, miss = map(np.array, zip(*(_raw_series(d) for d in members)))
        with warnings.catch_warnings():
            # all-NaN minutes (every member unavailable) give NaN medians
            warnings.simplefilter("ignore", RuntimeWarning)
            lat_med = np.nanmedian(lat, axis=0)
            loss_med = np.nanmedian(loss, axis=0)
            avail_loss = np.where(miss > 0, np.nan, loss)
            mean_loss = float(np.nanmean(avail_loss)) if np.isfinite(avail_loss).any() else 0.0
        peak = float(np.nanpercentile(lat_med, 95)) if np.isfinite(lat_med).any() else 0.0
        out.append(ClusterSummary(c, len(members), lat_med, loss_med, miss.mean(0),
                                  float(miss.mean()), mean_loss, peak))
    for s, n in zip(out, name_clusters(out, **name_kw)):
        s.name = n
    return out


@dataclass
class RegionSummary:
    node: str
    days: list
    fractions: np.ndarray  # (n_days, k), rows sum to 1 where counts > 0
    counts: np.ndarray  # entity-days per day

    def cluster_series(self, cluster: int) -> np.ndarray:
        return self.fractions[:, cluster]


def spatial_correlate(labels, ids, topology: Topology, k: Optional[int] = None) -> list:
    """Daily fraction of each node's descendant entity-days per cluster."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    leaves = set(topology.leaves)
    for ent, _ in ids:
        if ent not in leaves:
            raise KeyError(f"entity {ent!r} is not a leaf of the topology")
    days = sorted({d for _, d in ids})
    day_pos = {d: n for n, d in enumerate(days)}
    ent_counts = {}
    for (ent, day), lab in zip(ids, labels):
        arr = ent_counts.setdefault(ent, np.zeros((len(days), k)))
        arr[day_pos[day], lab] += 1
    out = []
    for node in topology.parent:
        if node in leaves:
            continue
        tot = np.zeros((len(days), k))
        for ent in topology.leaves_under(node):
            if ent in ent_counts:
                tot += ent_counts[ent]
        counts = tot.sum(1)
        frac = np.divide(tot, counts[:, None], out=np.zeros_like(tot), where=counts[:, None] > 0)
        out.append(RegionSummary(node, days, frac, counts))
    return out


# ------------------------------------------------------------------ CSV


def write_qos_features_csv(path, feats: QosFeatures, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "day", *QOS_FEATURES, "excl_absent"]
                   + (["cluster"] if labels is not None else []))
        for n, (ent, day) in enumerate(feats.ids):
            row = [ent, day, *(repr(float(v)) for v in feats.values[n]), int(feats.excl_absent[n])]
            if labels is not None:
                row.append(int(labels[n]))
            w.writerow(row)


def write_inertia_csv(path, e: ElbowResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "inertia", "chosen"])
        for k, v in zip(e.ks, e.inertia):
            w.writerow([k, repr(float(v)), int(k == e.k)])


def write_cluster_summary_csv(path, summaries) -> None:
    """Long format ``cluster,name,minute,latency,loss,missing``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "name", "minute", "latency", "loss", "missing"])
        for s in summaries:
            if s.size == 0:
                continue
            for m in range(MINUTES):
                w.writerow([s.cluster, s.name, m, repr(float(s.latency[m])),
                            repr(float(s.loss[m])), repr(float(s.missing[m]))])


def write_region_csv(path, regions, names=None) -> None:
    """Long format ``node,day,cluster,name,fraction,count``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "day", "cluster", "name", "fraction", "count"])
        for r in regions:
            for i, day in enumerate(r.days):
                for c in range(r.fractions.shape[1]):
                    w.writerow([r.node, day, c, names[c] if names else f"k{c}",
                                repr(float(r.fractions[i, c])), int(r.counts[i])])
