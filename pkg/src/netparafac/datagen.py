"""Synthetic home-router telemetry.

Stands in for ISP measurement data: per-minute traffic counters with
diurnal structure, injected synchronized DDoS floods, latency/loss series
with degradation events and a tree topology.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

MINUTES = 1440
TRAFFIC_METRICS = ("down_bytes", "up_bytes", "down_pkts", "up_pkts")
QOS_METRICS = ("latency", "loss")

# (malware, flood, payload bytes, header bytes on the wire)
ATTACK_VECTORS = (
    ("mirai", "udp", 1400, 42),
    ("mirai", "tcp_syn", 0, 40),
    ("mirai", "tcp_ack", 0, 40),
    ("mirai", "udp_plain", 1400, 42),
    ("bashlite", "udp", 1400, 42),
    ("bashlite", "tcp_syn", 0, 40),
    ("bashlite", "tcp_ack", 0, 40),
)


def attack_name(vector: int) -> str:
    malware, flood, payload, _ = ATTACK_VECTORS[vector]
    return f"{malware}_{flood}_{payload}B"


@dataclass
class TrafficDay:
    """One user-day (UD pair): four per-minute rate series, shape ``(4, 1440)``.

    Rows follow :data:`TRAFFIC_METRICS`: download bytes/s, upload bytes/s,
    download packets/s, upload packets/s.
    """

    entity_id: str
    day: int
    series: np.ndarray
    attack_labels: np.ndarray = None

    def __post_init__(self):
        if self.attack_labels is None:
            self.attack_labels = np.zeros(self.series.shape[1], dtype=bool)


@dataclass
class AttackSpec:
    vector: int
    pkt_rate: float
    duration_minutes: int
    start_minute: int
    day: int

    def __post_init__(self):
        if self.duration_minutes < 1:
            raise ValueError("attack duration must be >= 1 minute")
        if not 0 <= self.vector < len(ATTACK_VECTORS):
            raise ValueError(f"unknown attack vector {self.vector}")

    @property
    def payload(self) -> int:
        return ATTACK_VECTORS[self.vector][2]

    @property
    def byte_rate(self) -> float:
        _, _, payload, header = ATTACK_VECTORS[self.vector]
        return self.pkt_rate * (payload + header)


@dataclass
class AttackEpisode:
    """One infected entity taking part in one synchronized attack."""

    entity_id: str
    day: int
    start_minute: int
    end_minute: int  # exclusive
    attack_type: str
    attack_id: int


@dataclass
class TrafficConfig:
    """Knobs of the diurnal traffic model (rates in bytes/s and packets/s)."""

    level_log_mean: float = math.log(40e3)
    level_log_sd: float = 0.8
    up_byte_ratio: tuple = (0.06, 0.15)
    pkt_size: tuple = (900.0, 1300.0)
    ack_ratio: tuple = (0.6, 0.9)
    floor: tuple = (0.15, 0.4)
    day_sd: float = 0.25
    activity_sd: float = 0.35
    metric_sd: float = 0.08
    # day-part centres in hours and bump width in hours
    day_parts: tuple = (8.0, 13.0, 20.5)
    bump_width: float = 1.6
    centre_jitter: float = 0.5  # per-user sd of the day-part centres, hours
    # bulk uploads (backups, video calls): full-size upload packets acknowledged
    # by small download packets, so both packet counters rise together
    upload_sessions_per_day: float = 4.0
    upload_rate_log_mean: float = math.log(80e3)
    upload_rate_log_sd: float = 1.0
    upload_mean_minutes: float = 5.0
    upload_pkt_size: float = 1400.0
    upload_ack_ratio: float = 0.5
    ack_size: float = 60.0


def _diurnal(rng, cfg: TrafficConfig) -> np.ndarray:
    t = np.arange(MINUTES) / 60.0
    floor = rng.uniform(*cfg.floor)
    prof = np.full(MINUTES, floor)
    for centre in cfg.day_parts:
        w = rng.uniform(0.0, 1.0)
        c = centre + rng.normal(0, cfg.centre_jitter)
        d = np.minimum(np.abs(t - c), 24 - np.abs(t - c))
        prof += w * np.exp(-0.5 * (d / cfg.bump_width) ** 2)
    return prof / prof.mean()


def gen_traffic(n_users: int, n_days: int, seed: int = 0,
                cfg: Optional[TrafficConfig] = None) -> list[TrafficDay]:
    """Normal (attack-free) traffic for ``n_users`` over ``n_days``."""
    if n_users < 1 or n_days < 1:
        raise ValueError("n_users and n_days must be >= 1")
    cfg = cfg or TrafficConfig()
    rng = np.random.default_rng(seed)
    days = []
    for u in range(n_users):
        level = math.exp(rng.normal(cfg.level_log_mean, cfg.level_log_sd))
        up_ratio = rng.uniform(*cfg.up_byte_ratio)
        pkt_size = rng.uniform(*cfg.pkt_size)
        ack = rng.uniform(*cfg.ack_ratio)
        profile = _diurnal(rng, cfg)
        for d in range(n_days):
            day_mult = math.exp(rng.normal(0, cfg.day_sd))
            # minute-level activity shared by all four counters
            act = np.exp(rng.normal(0, cfg.activity_sd, MINUTES))
            noise = np.exp(rng.normal(0, cfg.metric_sd, (4, MINUTES)))
            down_b = level * day_mult * profile * act
            up_b = down_b * up_ratio
            down_p = down_b / pkt_size
            up_p = down_p * ack
            series = np.vstack([down_b, up_b, down_p, up_p]) * noise
            _add_uploads(series, rng, profile, cfg)
            days.append(TrafficDay(f"u{u:04d}", d, series))
    return days


def _add_uploads(series, rng, profile, cfg: TrafficConfig) -> None:
    n = rng.poisson(cfg.upload_sessions_per_day)
    if n == 0:
        return
    starts = rng.choice(MINUTES, size=n, p=profile / profile.sum())
    for s in starts:
        dur = 1 + int(rng.exponential(cfg.upload_mean_minutes - 1))
        rate = math.exp(rng.normal(cfg.upload_rate_log_mean, cfg.upload_rate_log_sd))
        sl = slice(int(s), min(MINUTES, int(s) + dur))
        up_p = rate / cfg.upload_pkt_size
        ack_p = up_p * cfg.upload_ack_ratio
        series[0, sl] += ack_p * cfg.ack_size
        series[1, sl] += rate
        series[2, sl] += ack_p
        series[3, sl] += up_p


def inject_attacks(days: list[TrafficDay], q: float = 0.05, mean_duration: float = 2.0,
                   attacks_per_day: float = 1.0, seed: int = 0, duration_sd: float = 0.5,
                   pkt_rate: float = 2000.0, rate_spread: float = 0.3):
    """Add synchronized floods from a random ``ceil(q * n_users)`` subset.

    Attack starts are uniform over the day with a Poisson number of
    attacks per day; durations are Gaussian (truncated at one minute) and
    the vector is uniform over :data:`ATTACK_VECTORS`. Returns
    ``(new_days, episodes, attacks)``; input days are not modified.
    """
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if mean_duration < 1:
        raise ValueError("mean_duration must be >= 1 minute")
    users = sorted({d.entity_id for d in days})
    if q * len(users) < 1 - 1e-9:
        raise ValueError("q * n_users < 1: no infectable user")
    n_inf = math.ceil(q * len(users) - 1e-9)
    n_days = 1 + max(d.day for d in days)
    rng = np.random.default_rng(seed)
    infected = sorted(rng.choice(users, size=n_inf, replace=False).tolist())
    # per-user uplink scaling of the flood rate
    scale = {u: float(np.exp(rng.normal(0, rate_spread))) for u in infected}

    attacks: list[AttackSpec] = []
    for day in range(n_days):
        for _ in range(rng.poisson(attacks_per_day)):
            dur = max(1, int(round(rng.normal(mean_duration, duration_sd))))
            start = int(rng.integers(0, MINUTES))
            dur = min(dur, MINUTES - start)
            attacks.append(AttackSpec(int(rng.integers(len(ATTACK_VECTORS))), pkt_rate,
                                      dur, start, day))

    out = {(d.entity_id, d.day): TrafficDay(d.entity_id, d.day, d.series.copy(),
                                            d.attack_labels.copy()) for d in days}
    episodes = []
    for aid, atk in enumerate(attacks):
        sl = slice(atk.start_minute, atk.start_minute + atk.duration_minutes)
        for u in infected:
            td = out.get((u, atk.day))
            if td is None:
                continue
            td.series[1, sl] += atk.byte_rate * scale[u]
            td.series[3, sl] += atk.pkt_rate * scale[u]
            td.attack_labels[sl] = True
            episodes.append(AttackEpisode(u, atk.day, sl.start, sl.stop,
                                          attack_name(atk.vector), aid))
    new_days = [out[(d.entity_id, d.day)] for d in days]
    return new_days, episodes, attacks


# metric signatures (down_bytes, up_bytes, down_pkts, up_pkts) of two activity
# types: download-heavy streaming and upload-heavy sessions
ACTIVITY_SIGNATURES = np.array([[1.0, 0.1, 0.8, 0.6],
                                [0.15, 1.0, 0.3, 0.9]])


def gen_activity_stream(n_users: int = 30, n_minutes: int = 360, seed: int = 0,
                        noise: float = 0.01, period_range=(40.0, 120.0)) -> np.ndarray:
    """Normalized ``n_users x 4 x n_minutes`` stream of two slowly varying activities.

    Each user mixes the two activity types with log-normal intensities; the
    type intensities oscillate with periods drawn from ``period_range``
    minutes, and every sample carries multiplicative Gaussian noise. Values
    are divided by the global maximum.
    """
    rng = np.random.default_rng(seed)
    a = rng.lognormal(0.0, 0.5, (n_users, 2))
    t = np.arange(n_minutes)
    periods = rng.uniform(*period_range, 2)
    phases = rng.uniform(0, 2 * np.pi, 2)
    c = 1 + 0.6 * np.sin(2 * np.pi * t[:, None] / periods + phases)
    x = np.einsum("ir,jr,kr->ijk", a, ACTIVITY_SIGNATURES.T, c)
    x = x * (1 + noise * rng.normal(size=x.shape))
    return np.maximum(x, 0.0) / x.max()


def traffic_tensor(days: list[TrafficDay]) -> np.ndarray:
    """Stack UD pairs into an ``n_ud x 4 x 1440`` array (input order)."""
    return np.stack([d.series for d in days])


def user_stream(days: list[TrafficDay]) -> tuple[list[str], np.ndarray]:
    """Concatenate days per user into an ``n_users x 4 x (n_days*1440)`` array."""
    users = sorted({d.entity_id for d in days})
    n_days = 1 + max(d.day for d in days)
    ui = {u: n for n, u in enumerate(users)}
    arr = np.zeros((len(users), len(TRAFFIC_METRICS), n_days * MINUTES))
    for d in days:
        arr[ui[d.entity_id], :, d.day * MINUTES:(d.day + 1) * MINUTES] = d.series
    return users, arr


def write_traffic_csv(path, days: list[TrafficDay]) -> int:
    """Long-format ``entity,day,metric,minute,value`` CSV. Returns row count."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "day", "metric", "minute", "value"])
        for d in days:
            for j, met in enumerate(TRAFFIC_METRICS):
                for k in range(d.series.shape[1]):
                    w.writerow([d.entity_id, d.day, met, k, f"{d.series[j, k]:.6f}"])
                    n += 1
    return n


def read_traffic_csv(path) -> list[TrafficDay]:
    mi = {m: j for j, m in enumerate(TRAFFIC_METRICS)}
    data: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"entity", "day", "metric", "minute", "value"}
        if not need <= set(reader.fieldnames or ()):
            raise ValueError(f"{path}: expected columns {sorted(need)}")
        for rec in reader:
            key = (rec["entity"], int(rec["day"]))
            arr = data.setdefault(key, np.full((4, MINUTES), np.nan))
            arr[mi[rec["metric"]], int(rec["minute"])] = float(rec["value"])
    out = []
    for (ent, day), arr in sorted(data.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if np.isnan(arr).any():
            raise ValueError(f"{path}: incomplete series for {ent} day {day}")
        out.append(TrafficDay(ent, day, arr))
    return out


def write_ground_truth_csv(path, episodes: list[AttackEpisode]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "day", "minute", "attack_type", "attack_id"])
        for e in episodes:
            for k in range(e.start_minute, e.end_minute):
                w.writerow([e.entity_id, e.day, k, e.attack_type, e.attack_id])


def read_ground_truth_csv(path) -> list[AttackEpisode]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["entity"], int(rec["day"]), int(rec["attack_id"]), rec["attack_type"])
            groups.setdefault(key, []).append(int(rec["minute"]))
    eps = []
    for (ent, day, aid, kind), mins in groups.items():
        eps.append(AttackEpisode(ent, day, min(mins), max(mins) + 1, kind, aid))
    return sorted(eps, key=lambda e: (e.day, e.start_minute, e.entity_id))


def apply_labels(days: list[TrafficDay], episodes: list[AttackEpisode]) -> None:
    index = {(d.entity_id, d.day): d for d in days}
    for e in episodes:
        index[(e.entity_id, e.day)].attack_labels[e.start_minute:e.end_minute] = True


# ---------------------------------------------------------------- topology


@dataclass
class Topology:
    """Rooted tree; ``parent[root] is None``. Leaves are entities."""

    parent: dict

    def __post_init__(self):
        roots = [n for n, p in self.parent.items() if p is None]
        if len(roots) != 1:
            raise ValueError("topology must have exactly one root")
        for n, p in self.parent.items():
            if p is not None and p not in self.parent:
                raise ValueError(f"node {n!r} has unknown parent {p!r}")
        self.root = roots[0]
        self.children: dict = {n: [] for n in self.parent}
        for n, p in self.parent.items():
            if p is not None:
                self.children[p].append(n)
        for n in self.parent:  # cycle check
            seen, cur = set(), n
            while cur is not None:
                if cur in seen:
                    raise ValueError("topology contains a cycle")
                seen.add(cur)
                cur = self.parent[cur]

    @property
    def leaves(self) -> list:
        return sorted(n for n, ch in self.children.items() if not ch)

    @property
    def internal_nodes(self) -> list:
        return [n for n, ch in self.children.items() if ch]

    def leaves_under(self, node) -> list:
        if node not in self.parent:
            raise KeyError(f"unknown node {node!r}")
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            if self.children[n]:
                stack.extend(self.children[n])
            else:
                out.append(n)
        return sorted(out)

    def to_json(self) -> str:
        return json.dumps({"root": self.root,
                           "children": {k: sorted(v) for k, v in self.children.items()}},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        doc = json.loads(text)
        parent = {doc["root"]: None}
        for p, chs in doc["children"].items():
            for c in chs:
                parent[c] = p
        return cls(parent)


def make_topology(branching=(3, 2), users_per_leaf_node: int = 10) -> Topology:
    """Balanced tree ``server -> r0 -> r0.1 -> users``."""
    parent = {"server": None}
    level = ["server"]
    names = {}
    for depth, b in enumerate(branching):
        nxt = []
        for p in level:
            for c in range(b):
                name = f"r{c}" if p == "server" else f"{p}.{c}"
                parent[name] = p
                nxt.append(name)
        level = nxt
    u = 0
    for p in level:
        for _ in range(users_per_leaf_node):
            names[f"h{u:04d}"] = p
            u += 1
    parent.update(names)
    return Topology(parent)


# ------------------------------------------------------------------- QoS


@dataclass
class QosDay:
    """Per-minute latency (ms), loss fraction and cross-traffic (Mbps).

    ``missing`` marks minutes with no measurement from the client (network
    unavailability); ``server_offline`` marks minutes where the measurement
    server was down. Missing minutes hold NaN latency and loss.
    """

    entity_id: str
    day: int
    latency: np.ndarray
    loss: np.ndarray
    cross_traffic: np.ndarray
    missing: np.ndarray
    server_offline: np.ndarray = None

    def __post_init__(self):
        if self.server_offline is None:
            self.server_offline = np.zeros(len(self.latency), dtype=bool)


@dataclass
class QosEvent:
    """Degradation attached to a topology node.

    ``kind`` is ``"outage"`` (missing samples), ``"loss"`` (elevated loss
    fraction ``magnitude``) or ``"congestion"`` (latency inflation of
    ``magnitude`` ms). ``day=None`` repeats the event every day.
    """

    node: str
    kind: str
    start_minute: int
    end_minute: int
    day: Optional[int] = None
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("outage", "loss", "congestion"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not 0 <= self.start_minute < self.end_minute <= MINUTES:
            raise ValueError("event span must lie within the day")


@dataclass
class QosConfig:
    base_latency: tuple = (8.0, 30.0)
    jitter_sd: float = 0.08
    base_loss_p: float = 0.001
    probes: int = 100
    cross_log_mean: float = math.log(0.3)
    cross_log_sd: float = 0.8
    burst_prob: float = 0.03
    sample_drop_prob: float = 0.002


def gen_qos(n_days: int, topology: Topology, event_plan=(), seed: int = 0,
            cfg: Optional[QosConfig] = None, server_offline=()) -> list[QosDay]:
    """Latency/loss days for every leaf of ``topology``.

    ``server_offline`` is a list of ``(day, start_minute, end_minute)``
    spans during which the server is down for everybody.
    """
    cfg = cfg or QosConfig()
    for ev in event_plan:
        if ev.node not in topology.parent:
            raise ValueError(f"event references unknown node {ev.node!r}")
    rng = np.random.default_rng(seed)
    affected = {id(ev): set(topology.leaves_under(ev.node)) for ev in event_plan}
    t = np.arange(MINUTES) / 60.0
    evening = np.exp(-0.5 * ((t - 20.5) / 1.5) ** 2)
    out = []
    for ent in topology.leaves:
        base = rng.uniform(*cfg.base_latency)
        for d in range(n_days):
            lat = base * (1 + 0.1 * evening) * np.exp(rng.normal(0, cfg.jitter_sd, MINUTES))
            p_loss = np.full(MINUTES, cfg.base_loss_p)
            missing = rng.random(MINUTES) < cfg.sample_drop_prob
            for ev in event_plan:
                if ent not in affected[id(ev)] or (ev.day is not None and ev.day != d):
                    continue
                sl = slice(ev.start_minute, ev.end_minute)
                if ev.kind == "outage":
                    missing[sl] = True
                elif ev.kind == "loss":
                    p_loss[sl] = np.maximum(p_loss[sl], ev.magnitude)
                else:
                    span = ev.end_minute - ev.start_minute
                    shape = np.sin(np.linspace(0, np.pi, span))
                    lat[sl] += ev.magnitude * shape * np.exp(rng.normal(0, 0.2, span))
            loss = rng.binomial(cfg.probes, np.clip(p_loss, 0, 1)) / cfg.probes
            cross = np.exp(rng.normal(cfg.cross_log_mean, cfg.cross_log_sd, MINUTES))
            burst = rng.random(MINUTES) < cfg.burst_prob
            cross[burst] += rng.uniform(3.0, 20.0, burst.sum())
            offline = np.zeros(MINUTES, dtype=bool)
            for (od, s, e) in server_offline:
                if od == d:
                    offline[s:e] = True
            lat = np.where(missing | offline, np.nan, lat)
            loss = np.where(missing | offline, np.nan, loss)
            out.append(QosDay(ent, d, lat, loss, cross, missing & ~offline, offline))
    return out


def write_qos_csv(path, days: list[QosDay]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "day", "minute", "latency", "loss", "cross_traffic",
                    "missing", "server_offline"])
        for q in days:
            for k in range(len(q.latency)):
                lat = "" if np.isnan(q.latency[k]) else f"{q.latency[k]:.4f}"
                loss = "" if np.isnan(q.loss[k]) else f"{q.loss[k]:.4f}"
                w.writerow([q.entity_id, q.day, k, lat, loss, f"{q.cross_traffic[k]:.4f}",
                            int(q.missing[k]), int(q.server_offline[k])])


def read_qos_csv(path) -> list[QosDay]:
    cols: dict = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["entity"], int(rec["day"]))
            c = cols.setdefault(key, {n: np.full(MINUTES, np.nan) for n in
                                      ("latency", "loss", "cross", "missing", "offline")})
            k = int(rec["minute"])
            c["latency"][k] = float(rec["latency"]) if rec["latency"] else np.nan
            c["loss"][k] = float(rec["loss"]) if rec["loss"] else np.nan
            c["cross"][k] = float(rec["cross_traffic"])
            c["missing"][k] = float(rec["missing"])
            c["offline"][k] = float(rec["server_offline"])
    out = []
    for (ent, day), c in sorted(cols.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        out.append(QosDay(ent, day, c["latency"], c["loss"], c["cross"],
                          c["missing"] > 0, c["offline"] > 0))
    return out


def default_event_plan(outage_day: int = 10, loss_day: int = 17) -> list[QosEvent]:
    """Planted scenario on the default ``make_topology()`` tree.

    Region ``r2`` is chronically congested in the evening and ``r1.0``
    has chronic moderate loss. Subtree ``r0.0`` loses connectivity from
    13:00 to 17:00 on ``outage_day``; subtree ``r1.1`` is unreachable from
    06:00 to 08:00 and lossy from 19:00 to 21:00 on ``loss_day``.
    """
    return [
        QosEvent("r2", "congestion", 18 * 60, 23 * 60, None, 60.0),
        QosEvent("r1.0", "loss", 0, MINUTES, None, 0.03),
        QosEvent("r0.0", "outage", 13 * 60, 17 * 60, outage_day),
        QosEvent("r1.1", "outage", 6 * 60, 8 * 60, loss_day),
        QosEvent("r1.1", "loss", 19 * 60, 21 * 60, loss_day, 0.3),
    ]


def event_plan_to_json(plan) -> str:
    return json.dumps([vars(e) for e in plan], indent=1)


def event_plan_from_json(text: str) -> list[QosEvent]:
    return [QosEvent(**d) for d in json.loads(text)]
