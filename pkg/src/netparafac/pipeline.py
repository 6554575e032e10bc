"""End-to-end runs on synthetic data: DDoS detection, online streaming and QoS clustering."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import datagen, qos
from .cp import AlsConfig, CpModel, als_fit
from .detect import EvalReport, evaluate, train_forest, gini_importance
from .features import (FEATURE_NAMES, Gmm2, ScalingParams, feature_matrix, fit_gmm2,
                       fit_scaling, gmm_likelihood_features, preprocess)
from .forest import ForestConfig, ForestModel
from .stream import TensorWindow, project_slices
from .tensor import Tensor3

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ DDoS


@dataclass
class DdosConfig:
    n_users: int = 100
    n_days: int = 14
    q: float = 0.05
    mean_duration: float = 2.0
    attacks_per_day: float = 1.0
    split: tuple = (3, 7, 4)  # Tr1 / Tr2 / Te days
    rank: int = 2
    gmm_max_points: int = 50_000
    seed: int = 0
    forest: ForestConfig = field(default_factory=ForestConfig)

    def __post_init__(self):
        if isinstance(self.forest, dict):
            self.forest = ForestConfig(**self.forest)
        self.split = tuple(int(s) for s in self.split)
        if len(self.split) != 3 or min(self.split) < 1:
            raise ValueError("split needs three positive day counts")
        if sum(self.split) != self.n_days:
            raise ValueError(f"split {self.split} does not add up to n_days={self.n_days}")


@dataclass
class DdosData:
    days: list
    episodes: list
    attacks: list


@dataclass
class DdosResult:
    scaling: ScalingParams
    model: CpModel
    gmm: Gmm2
    forest6: ForestModel
    forest8: ForestModel
    report6: EvalReport
    report8: EvalReport
    importance6: np.ndarray
    importance8: np.ndarray
    test_ids: list
    pred8: np.ndarray
    timings: dict

    def importance_table(self, n: int = 6):
        imp = self.importance6 if n == 6 else self.importance8
        return sorted(zip(FEATURE_NAMES[:n], imp.tolist()), key=lambda kv: -kv[1])


def ddos_data(cfg: DdosConfig) -> DdosData:
    days = datagen.gen_traffic(cfg.n_users, cfg.n_days, seed=cfg.seed)
    days, episodes, attacks = datagen.inject_attacks(
        days, q=cfg.q, mean_duration=cfg.mean_duration,
        attacks_per_day=cfg.attacks_per_day, seed=cfg.seed + 1)
    return DdosData(days, episodes, attacks)


def _split(days, cfg: DdosConfig):
    a, b, _ = cfg.split
    tr1 = [d for d in days if d.day < a]
    tr2 = [d for d in days if a <= d.day < a + b]
    te = [d for d in days if d.day >= a + b]
    return tr1, tr2, te


def ud_residuals(train_days, other_days, rank: int, seed: int = 0, scaling=None):
    """Fit the normal subspace on ``train_days`` and project ``other_days``.

    Returns ``(model, scaling, residuals)`` with residuals ``(n, 4, 1440)``
    in the order of ``other_days``.
    """
    raw_tr = datagen.traffic_tensor(train_days)
    scaling = scaling or fit_scaling(raw_tr, metric_axis=1)
    x_tr, _ = preprocess(raw_tr, scaling, metric_axis=1)
    model = als_fit(Tensor3(x_tr), rank, AlsConfig(seed=seed))
    x, _ = preprocess(datagen.traffic_tensor(other_days), scaling, metric_axis=1)
    _, res = project_slices(Tensor3(x), model)
    return model, scaling, res.values


def run_ddos(cfg: Optional[DdosConfig] = None, data: Optional[DdosData] = None) -> DdosResult:
    """Offline pipeline: scaling and subspace on Tr1, forest on Tr2, evaluation on Te."""
    cfg = cfg or DdosConfig()
    data = data or ddos_data(cfg)
    timings = {}
    t0 = time.perf_counter()
    tr1, tr2, te = _split(data.days, cfg)
    model, scaling, res = ud_residuals(tr1, tr2 + te, cfg.rank, cfg.seed)
    timings["subspace"] = time.perf_counter() - t0

    f = feature_matrix(res)  # (n_ud, 1440, 6)
    labels = np.stack([d.attack_labels for d in tr2 + te])
    n2 = len(tr2)
    f_tr, f_te = f[:n2].reshape(-1, 6), f[n2:].reshape(-1, 6)
    y_tr = labels[:n2].reshape(-1)

    t0 = time.perf_counter()
    gmm = fit_gmm2(f_tr, seed=cfg.seed, max_points=cfg.gmm_max_points)
    g_tr = gmm_likelihood_features(f_tr, gmm)
    g_te = gmm_likelihood_features(f_te, gmm)
    timings["gmm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    forest6 = train_forest(f_tr, y_tr, cfg.forest)
    forest8 = train_forest(np.hstack([f_tr, g_tr]), y_tr, cfg.forest)
    timings["forest"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    shape = labels[n2:].shape
    pred6 = forest6.predict(f_te).reshape(shape).astype(bool)
    pred8 = forest8.predict(np.hstack([f_te, g_te])).reshape(shape).astype(bool)
    row = {(d.entity_id, d.day): n for n, d in enumerate(te)}
    episodes = [(row[(e.entity_id, e.day)], e.start_minute, e.end_minute)
                for e in data.episodes if (e.entity_id, e.day) in row]
    rep6 = evaluate(pred6, labels[n2:], episodes)
    rep8 = evaluate(pred8, labels[n2:], episodes)
    timings["evaluate"] = time.perf_counter() - t0
    log.info("DDoS: DA %.4f / precision %.4f (6 features), %.4f / %.4f (8 features)",
             rep6.detection_accuracy, rep6.precision, rep8.detection_accuracy, rep8.precision)
    return DdosResult(scaling, model, gmm, forest6, forest8, rep6, rep8,
                      gini_importance(forest6), gini_importance(forest8),
                      [(d.entity_id, d.day) for d in te], pred8, timings)


# ---------------------------------------------------------------- stream


@dataclass
class StreamBenchmark:
    rel_diff: np.ndarray  # per-step ||r_pwo - r_fwo|| / ||r_fwo||
    fwo_times: np.ndarray
    pwo_times: np.ndarray
    fwo_iters: np.ndarray
    pwo_iters: np.ndarray
    start_minute: int

    def timing_rows(self):
        rows = []
        for n in range(len(self.fwo_times)):
            t = self.start_minute + n
            rows.append((t, "fwo", int(self.fwo_iters[n]), float(self.fwo_times[n])))
            rows.append((t, "pwo", int(self.pwo_iters[n]), float(self.pwo_times[n])))
        return rows


def stream_slices(n_users: int = 30, n_days: int = 1, seed: int = 0, start_minute: int = 0):
    """Scaled per-minute ``users x 4`` slices of synthetic traffic."""
    days = datagen.gen_traffic(n_users, n_days, seed=seed)
    _, arr = datagen.user_stream(days)
    x, _ = preprocess(arr, metric_axis=1)
    return x[:, :, start_minute:]


def stream_benchmark(n_users: int = 30, W: int = 120, steps: int = 240, rank: int = 2,
                     seed: int = 0, source: str = "activity", start_minute: int = 480,
                     cfg: Optional[AlsConfig] = None) -> StreamBenchmark:
    """Run FWO and PWO side by side over the same stream.

    ``source="activity"`` uses :func:`datagen.gen_activity_stream`;
    ``source="diurnal"`` uses scaled :func:`datagen.gen_traffic` users
    starting at ``start_minute``.
    """
    if source == "activity":
        x = datagen.gen_activity_stream(n_users, W + steps, seed=seed)
        start_minute = 0
    elif source == "diurnal":
        n_days = 1 + (start_minute + W + steps) // datagen.MINUTES
        x = stream_slices(n_users, n_days, seed, start_minute)
    else:
        raise ValueError(f"unknown stream source {source!r}")
    if x.shape[2] < W + steps:
        raise ValueError("stream too short for the requested window and steps")
    cfg = cfg or AlsConfig(seed=seed)
    wins = {s: TensorWindow(W, rank, cfg) for s in ("fwo", "pwo")}
    for k in range(W):
        for w in wins.values():
            w.push_warmup(x[:, :, k])
    diff, times, iters = [], {"fwo": [], "pwo": []}, {"fwo": [], "pwo": []}
    for k in range(W, W + steps):
        out = {}
        for s, w in wins.items():
            r = w.step(x[:, :, k], s)
            out[s] = r.residual_slice
            times[s].append(r.wall_time)
            iters[s].append(r.iterations)
        nf = np.linalg.norm(out["fwo"])
        diff.append(np.linalg.norm(out["pwo"] - out["fwo"]) / nf if nf > 0 else 0.0)
    return StreamBenchmark(np.array(diff), np.array(times["fwo"]), np.array(times["pwo"]),
                           np.array(iters["fwo"]), np.array(iters["pwo"]), start_minute + W)


# ------------------------------------------------------------------- QoS


@dataclass
class QosResult:
    prepared: qos.QosTensor
    model: CpModel
    features: qos.QosFeatures
    clusters: qos.ClusterModel
    summaries: list
    regions: list

    @property
    def names(self) -> list:
        return [s.name for s in self.summaries]


def run_qos(days, topology, k: int = 5, rank: int = 4, theta: float = 2.5, eta: int = 1000,
            seed: int = 0, cfg: Optional[AlsConfig] = None) -> QosResult:
    prepared = qos.qos_preprocess(days, theta, eta)
    model, res = qos.fit_qos_model(prepared, rank, cfg or AlsConfig(seed=seed))
    feats = qos.qos_residual_stats(res, prepared.loss_is_one, prepared.ids)
    cm = qos.kmeans(feats.values, k, seed=seed)
    summaries = qos.summarize_clusters(cm.labels, prepared.ids, days, k)
    regions = qos.spatial_correlate(cm.labels, prepared.ids, topology, k)
    return QosResult(prepared, model, feats, cm, summaries, regions)
