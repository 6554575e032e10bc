"""Command-line interface.

Every subcommand writes its outputs plus ``run.json`` (resolved
configuration, library versions and SHA-256 digests of the inputs) into
``--out``. Exit codes: 0 success, 1 usage or configuration error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import datagen, detect, pipeline, qos
from .cp import AlsConfig, als_fit, split_half_validate
from .features import FEATURE_NAMES, fit_scaling, preprocess
from .forest import ForestConfig
from .stream import TensorWindow, write_residual_csv, write_timing_csv
from .tensor import Tensor3

log = logging.getLogger("netparafac")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------- validation


def _positive(name):
    def check(v):
        if v is not None and v <= 0:
            raise UsageError(f"{name} must be positive, got {v}")
    return check


def _probability(name):
    def check(v):
        if not 0 < v <= 1:
            raise UsageError(f"{name} must be in (0, 1], got {v}")
    return check


VALIDATORS = {
    "users": _positive("users"), "days": _positive("days"), "rank": _positive("rank"),
    "window": _positive("window"), "trees": _positive("trees"), "k": _positive("k"),
    "theta": _positive("theta"), "eta": _positive("eta"), "repetitions": _positive("repetitions"),
    "mean_duration": _positive("mean_duration"), "min_samples_leaf": _positive("min_samples_leaf"),
    "q": _probability("q"),
}


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# --------------------------------------------------------------- helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


INPUT_FLAGS = ("traffic", "ground_truth", "qos", "topology", "model")


def _write_run(out: Path, args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    inputs = {k: {"path": str(cfg[k]), "sha256": _digest(cfg[k])}
              for k in INPUT_FLAGS if cfg.get(k)}
    doc = {"command": args.command, "config": cfg, "inputs": inputs,
           "versions": {"artifact": _version(), "python": platform.python_version(),
                        "numpy": np.__version__, "scipy": scipy.__version__}}
    (out / "run.json").write_text(json.dumps(doc, indent=1, default=str) + "\n")


def _require(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _traffic_stream(path):
    days = datagen.read_traffic_csv(_require(path, "traffic"))
    users, arr = datagen.user_stream(days)
    return days, users, arr


# --------------------------------------------------------------- commands


def cmd_generate(args, out: Path) -> None:
    if args.kind in ("traffic", "both"):
        days = datagen.gen_traffic(args.users, args.days, seed=args.seed)
        days, episodes, attacks = datagen.inject_attacks(
            days, q=args.q, mean_duration=args.mean_duration,
            attacks_per_day=args.attacks_per_day, seed=args.seed + 1)
        n = datagen.write_traffic_csv(out / "traffic.csv", days)
        datagen.write_ground_truth_csv(out / "ground_truth.csv", episodes)
        log.info("wrote %d traffic rows and %d attack episodes", n, len(episodes))
    if args.kind in ("qos", "both"):
        topo = datagen.make_topology(tuple(args.branching), args.users_per_leaf_node)
        plan = datagen.default_event_plan(args.outage_day, args.loss_day)
        kept = [e for e in plan if e.node in topo.parent]
        if len(kept) < len(plan):
            log.warning("skipping events on nodes absent from the topology: %s",
                        sorted({e.node for e in plan} - {e.node for e in kept}))
        plan = kept
        qdays = datagen.gen_qos(args.days, topo, plan, seed=args.seed)
        datagen.write_qos_csv(out / "qos.csv", qdays)
        (out / "topology.json").write_text(topo.to_json() + "\n")
        (out / "event_plan.json").write_text(datagen.event_plan_to_json(plan) + "\n")


def cmd_fit(args, out: Path) -> None:
    days = datagen.read_traffic_csv(_require(args.traffic, "traffic"))
    train = [d for d in days if d.day < args.train_days] if args.train_days else days
    if not train:
        raise ValueError("no user-days in the training range")
    raw = datagen.traffic_tensor(train)
    scaling = fit_scaling(raw, metric_axis=1)
    x, _ = preprocess(raw, scaling, metric_axis=1)
    model = als_fit(Tensor3(x), args.rank, AlsConfig(seed=args.seed, max_iters=args.max_iters))
    model.save(out / "model.json")
    (out / "scaling.json").write_text(json.dumps(scaling.to_dict(), indent=1) + "\n")
    with open(out / "factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "index", "component", "loading"])
        for mode, f in zip(("A", "B", "C"), model.normalized().factors):
            for i in range(f.shape[0]):
                for r in range(f.shape[1]):
                    w.writerow([mode, i, r, repr(float(f[i, r]))])
    log.info("rank-%d fit after %d sweeps, relative error %.4g", args.rank,
             model.meta["iterations"], model.meta["rel_error"])


def cmd_validate_rank(args, out: Path) -> None:
    days = datagen.read_traffic_csv(_require(args.traffic, "traffic"))
    x, _ = preprocess(datagen.traffic_tensor(days), metric_axis=1)
    rep = split_half_validate(Tensor3(x), args.ranks, AlsConfig(seed=args.seed),
                              threshold=args.threshold, repetitions=args.repetitions,
                              seed=args.seed)
    (out / "rank_report.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    log.info("chosen rank: %s", rep.chosen_R)


def cmd_stream(args, out: Path) -> None:
    _, users, arr = _traffic_stream(args.traffic)
    # scaling comes from the warm-up window only, as later data is unseen
    scaling = fit_scaling(arr[:, :, :args.window], metric_axis=1)
    x, _ = preprocess(arr, scaling, metric_axis=1)
    n_steps = x.shape[2] - args.window
    if args.max_steps is not None:
        n_steps = min(n_steps, args.max_steps)
    if n_steps < 1:
        raise ValueError(f"stream has {x.shape[2]} minutes, needs more than window={args.window}")
    win = TensorWindow(args.window, args.rank, AlsConfig(seed=args.seed))
    for k in range(args.window):
        win.push_warmup(x[:, :, k])
    results, timing = [], []
    for k in range(args.window, args.window + n_steps):
        r = win.step(x[:, :, k], args.scheme)
        results.append(r)
        timing.append((r.t, args.scheme, r.iterations, r.wall_time))
    write_residual_csv(out / "residuals.csv", results, users, datagen.TRAFFIC_METRICS)
    write_timing_csv(out / "timing.csv", timing)
    win.model().save(out / "model.json")


def cmd_detect(args, out: Path) -> None:
    days = datagen.read_traffic_csv(_require(args.traffic, "traffic"))
    episodes = datagen.read_ground_truth_csv(_require(args.ground_truth, "ground truth"))
    datagen.apply_labels(days, episodes)
    n_days = 1 + max(d.day for d in days)
    users = sorted({d.entity_id for d in days})
    cfg = pipeline.DdosConfig(
        n_users=len(users), n_days=n_days, split=tuple(args.split), rank=args.rank,
        seed=args.seed, forest=ForestConfig(n_trees=args.trees, min_samples_leaf=args.min_samples_leaf,
                                            seed=args.seed))
    res = pipeline.run_ddos(cfg, pipeline.DdosData(days, episodes, []))
    reports = {"six_features": res.report6.to_dict(), "eight_features": res.report8.to_dict()}
    (out / "report.json").write_text(json.dumps(reports, indent=1) + "\n")
    (out / "report.txt").write_text("six features\n" + res.report6.table() + "\n\neight features\n"
                                    + res.report8.table() + "\n")
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "feature", "gini_importance"])
        for n, imp in ((6, res.importance6), (8, res.importance8)):
            for name, v in zip(FEATURE_NAMES[:n], imp):
                w.writerow([n, name, repr(float(v))])
    res.forest8.save(out / "forest.json")
    res.gmm.save(out / "gmm.json")
    # per-minute synchronized verdicts on the test days
    params = detect.MapAggregatorParams(n_homes=args.n_homes or len(users), prior_attack=args.prior_attack,
                                        p_fp=args.p_fp, p_rc=args.p_rc, q=args.q)
    thr = detect.map_threshold(params, args.h1_model)
    by_day = {}
    for (ent, day), row in zip(res.test_ids, res.pred8):
        by_day.setdefault(day, []).append(row)
    with open(out / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "minute", "flagged_homes", "threshold", "synchronized_attack"])
        for day in sorted(by_day):
            flags = np.array(by_day[day])
            verdict = detect.aggregate_sync(flags, thr.threshold)
            counts = flags.sum(0)
            for m in range(flags.shape[1]):
                w.writerow([day, m, int(counts[m]), thr.threshold, int(verdict[m])])
    (out / "map_threshold.json").write_text(json.dumps(vars(thr), indent=1) + "\n")


def cmd_cluster(args, out: Path) -> None:
    qdays = datagen.read_qos_csv(_require(args.qos, "qos"))
    topo = datagen.Topology.from_json(_require(args.topology, "topology").read_text())
    prepared = qos.qos_preprocess(qdays, args.theta, args.eta)
    model, res = qos.fit_qos_model(prepared, args.rank, AlsConfig(seed=args.seed, max_iters=args.max_iters))
    feats = qos.qos_residual_stats(res, prepared.loss_is_one, prepared.ids)
    k = args.k
    if args.k_range:
        elbow = qos.elbow_select(feats.values, range(args.k_range[0], args.k_range[1] + 1), args.seed)
        qos.write_inertia_csv(out / "inertia.csv", elbow)
        if k is None:
            k = elbow.k
            if elbow.low_confidence:
                log.warning("elbow has no clear knee; using k=%d", k)
    if k is None:
        raise UsageError("k: give --k or --k-range")
    cm = qos.kmeans(feats.values, k, seed=args.seed)
    summaries = qos.summarize_clusters(cm.labels, prepared.ids, qdays, k)
    names = [s.name for s in summaries]
    regions = qos.spatial_correlate(cm.labels, prepared.ids, topo, k)
    qos.write_qos_features_csv(out / "qos_features.csv", feats, cm.labels)
    qos.write_cluster_summary_csv(out / "cluster_summary.csv", summaries)
    qos.write_region_csv(out / "regions.csv", regions, names)
    model.save(out / "model.json")
    doc = {"k": k, "names": names, "sizes": [s.size for s in summaries],
           "centroids": cm.centroids.tolist(), "zscore_mean": cm.mean.tolist(),
           "zscore_std": cm.std.tolist(), "inertia": cm.inertia,
           "dropped_entity_days": [list(d) for d in prepared.dropped]}
    (out / "clusters.json").write_text(json.dumps(doc, indent=1) + "\n")


def cmd_report(args, out: Path) -> None:
    lines = []
    if args.detect_dir:
        rep = json.loads(_require(Path(args.detect_dir) / "report.json", "detect report").read_text())
        lines += ["Detection (test split)", "",
                  f"{'model':<16}{'precision':>11}{'det. acc.':>11}{'<=1 min':>9}{'<=2 min':>9}"]
        rows = []
        for name, r in rep.items():
            d = np.asarray(r["delays"])
            f1 = float(np.mean(d <= 1)) if d.size else float("nan")
            f2 = float(np.mean(d <= 2)) if d.size else float("nan")
            lines.append(f"{name:<16}{r['precision']:>11.4f}{r['detection_accuracy']:>11.4f}"
                         f"{f1:>9.4f}{f2:>9.4f}")
            rows.append([name, r["precision"], r["detection_accuracy"], f1, f2])
        with open(out / "detection_table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "precision", "detection_accuracy", "within_1_min", "within_2_min"])
            w.writerows(rows)
        imp = Path(args.detect_dir) / "importance.csv"
        if imp.is_file():
            with open(imp, newline="") as fh:
                recs = [r for r in csv.DictReader(fh) if r["model"] == "6"]
            recs.sort(key=lambda r: -float(r["gini_importance"]))
            lines += ["", "Gini importance (six features)"]
            lines += [f"  {r['feature']:<12}{float(r['gini_importance']):.4f}" for r in recs]
        lines.append("")
    if args.cluster_dir:
        doc = json.loads(_require(Path(args.cluster_dir) / "clusters.json", "cluster summary").read_text())
        lines += ["Clusters", ""]
        for c, (name, size) in enumerate(zip(doc["names"], doc["sizes"])):
            lines.append(f"  cluster {c}: {name:<5} {qos.CLUSTER_NAMES.get(name, ''):<26} {size} entity-days")
        lines.append("")
    thr = detect.map_threshold(detect.MapAggregatorParams(
        n_homes=args.n_homes, prior_attack=args.prior_attack, p_fp=args.p_fp,
        p_rc=args.p_rc, q=args.q), args.h1_model)
    lines += ["Synchronized-attack threshold", "",
              f"  m0 = {thr.m0:.4f}, decide attack when >= {thr.threshold} homes report",
              f"  type I = {thr.type1:.3e}, type II = {thr.type2:.3e}", ""]
    text = "\n".join(lines)
    (out / "report.txt").write_text(text)
    print(text)


# ----------------------------------------------------------------- parser


def _map_flags(p):
    p.add_argument("--n-homes", type=int, default=812, help="homes in the aggregation (MAP model)")
    p.add_argument("--prior-attack", type=float, default=0.0014, help="prior probability of an attack")
    p.add_argument("--p-fp", type=float, default=2.64e-6, help="per-home false-positive probability")
    p.add_argument("--p-rc", type=float, default=0.8266, help="per-home recall")
    p.add_argument("--h1-model", choices=("mixture", "split"), default="mixture",
                   help="attack-hypothesis count model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="netparafac", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file of flag values; explicit flags override it")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        return p

    p = command("generate", cmd_generate, "generate synthetic traffic and/or QoS datasets")
    p.add_argument("--kind", choices=("traffic", "qos", "both"), default="both")
    p.add_argument("--users", type=int, default=100, help="traffic users")
    p.add_argument("--days", type=int, default=14, help="days to generate")
    p.add_argument("--q", type=float, default=0.05, help="fraction of infected users")
    p.add_argument("--mean-duration", type=float, default=2.0, help="mean attack duration (minutes)")
    p.add_argument("--attacks-per-day", type=float, default=1.0, help="synchronized attacks per day")
    p.add_argument("--branching", type=_int_list, default=[3, 2], help="topology fan-out per level")
    p.add_argument("--users-per-leaf-node", type=int, default=10, help="QoS users per access node")
    p.add_argument("--outage-day", type=int, default=10, help="day of the planted subtree outage")
    p.add_argument("--loss-day", type=int, default=17, help="day of the planted loss event")

    p = command("fit", cmd_fit, "fit the offline PARAFAC model on traffic user-days")
    p.add_argument("--traffic", required=True, help="traffic CSV")
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--train-days", type=int, default=None, help="use days [0, N) only")
    p.add_argument("--max-iters", type=int, default=200)

    p = command("validate-rank", cmd_validate_rank, "split-half rank selection")
    p.add_argument("--traffic", required=True, help="traffic CSV")
    p.add_argument("--ranks", type=_int_list, default=[1, 2, 3, 4], help="candidate ranks")
    p.add_argument("--threshold", type=float, default=0.85, help="minimum Tucker congruence")
    p.add_argument("--repetitions", type=int, default=1, help="random splits per rank")

    p = command("stream", cmd_stream, "online residuals over a sliding window (FWO or PWO)")
    p.add_argument("--traffic", required=True, help="traffic CSV")
    p.add_argument("--scheme", choices=("fwo", "pwo"), default="pwo")
    p.add_argument("--window", type=int, default=1440, help="window length W in minutes")
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many online steps")

    p = command("detect", cmd_detect, "train the forest on Tr2 residuals and evaluate on Te")
    p.add_argument("--traffic", required=True, help="traffic CSV")
    p.add_argument("--ground-truth", required=True, help="ground-truth CSV")
    p.add_argument("--split", type=_int_list, default=[3, 7, 4], help="Tr1,Tr2,Te day counts")
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--min-samples-leaf", type=int, default=5)
    p.add_argument("--q", type=float, default=0.05, help="infected fraction (MAP model)")
    _map_flags(p)
    p.set_defaults(n_homes=None)

    p = command("cluster", cmd_cluster, "cluster QoS entity-days and correlate with the topology")
    p.add_argument("--qos", required=True, help="QoS CSV")
    p.add_argument("--topology", required=True, help="topology JSON")
    p.add_argument("--theta", type=float, default=2.5, help="cross-traffic filter (Mbps)")
    p.add_argument("--eta", type=int, default=1000, help="minimum samples per entity-day")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--k", type=int, default=None, help="number of clusters")
    p.add_argument("--k-range", type=_int_list, default=None, help="LO,HI range for the elbow")

    p = command("report", cmd_report, "summary tables from detect and cluster outputs")
    p.add_argument("--detect-dir", help="output directory of a detect run")
    p.add_argument("--cluster-dir", help="output directory of a cluster run")
    p.add_argument("--q", type=float, default=0.05, help="infected fraction (MAP model)")
    _map_flags(p)
    return parser


def _apply_config(parser, argv):
    """Re-parse with values from ``--config`` as defaults, rejecting unknown fields."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(_require(args.config, "config").read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config: invalid JSON ({e})")
    if not isinstance(doc, dict):
        raise UsageError("config: expected a JSON object")
    known = set(vars(args)) - {"func", "command", "config"}
    for key in doc:
        if key.replace("-", "_") not in known:
            raise UsageError(f"config: unknown field {key!r} for '{args.command}'")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
    return parser.parse_args(argv)


def _validate(args) -> None:
    for name, check in VALIDATORS.items():
        if name in vars(args) and getattr(args, name) is not None:
            v = getattr(args, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise UsageError(f"{name} must be a number, got {v!r}")
            check(v)
    if getattr(args, "k_range", None) is not None and (
            len(args.k_range) != 2 or not 1 <= args.k_range[0] < args.k_range[1]):
        raise UsageError("k_range must be LO,HI with 1 <= LO < HI")
    if getattr(args, "split", None) is not None and (len(args.split) != 3 or min(args.split) < 1):
        raise UsageError("split must be three positive day counts")
    if getattr(args, "ranks", None) is not None and (not args.ranks or min(args.ranks) < 1):
        raise UsageError("ranks must be positive integers")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        _validate(args)
    except UsageError as e:
        print(f"netparafac: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"netparafac: error: {e}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
        _write_run(out, args)
    except UsageError as e:
        print(f"netparafac: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as e:
        print(f"netparafac: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"netparafac: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
