"""Command-line entry points: simulate, fit, recommend, predict-return, evaluate, diagnose.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from .config import RunConfig
from .errors import ColdStartError, ConfigError, DataError, NumericalError
from .events import (
    EventHistory,
    SocialNetwork,
    load_events,
    load_network,
    read_index_map,
    write_events,
    write_index_map,
    write_network,
)
from .inference import fit
from .model import ModelParams, sample_params_from_prior
from .simulate import SimulationSpec, horizon_for_events, random_network, simulate

log = logging.getLogger("rpf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------------


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _require(path, what):
    if path is None:
        raise ConfigError(f"no {what} file configured")
    if not Path(path).is_file():
        raise ConfigError(f"{what} file {path} not found")
    return path


def _load_data(cfg: RunConfig) -> tuple[EventHistory, SocialNetwork]:
    """Event log plus the trigger graph the configured variant uses."""
    user_labels = read_index_map(_require(cfg.users, "users")) if cfg.users else None
    item_labels = read_index_map(_require(cfg.items, "items")) if cfg.items else None
    history = load_events(_require(cfg.events, "events"), horizon=cfg.horizon,
                          user_labels=user_labels, item_labels=item_labels)
    network = None
    if cfg.model.social:
        _require(cfg.network, "network")
        network = load_network(cfg.network, user_labels=history.user_labels)
    return history, cfg.model.resolve_network(network, history.n_users)


def _load_params(path, n_users, n_items) -> ModelParams:
    params, _ = ModelParams.load(_require(path, "params"))
    if params.n_users != n_users or params.n_items != n_items:
        raise DataError(
            f"parameters cover {params.n_users} users x {params.n_items} items, "
            f"data has {n_users} x {n_items}"
        )
    return params


def _index(labels, raw: str, what: str) -> int:
    if labels and raw in labels:
        return labels.index(raw)
    raise ColdStartError(f"unknown {what} {raw!r}")


def _fit(cfg: RunConfig, history, network):
    result = fit(history, network, cfg.model, tol=cfg.tol, max_iter=cfg.max_iter,
                 seed=cfg.seed, truncation=cfg.truncation)
    log.info("fit: %d iterations, converged=%s, elbo=%.6g",
             result.n_iter, result.converged, result.trace[-1])
    return result


def _save_fit(out: Path, cfg: RunConfig, result):
    result.params.save(out / "params.json", cfg.model)
    result.state.save(out / "state.json")
    _write_rows(out / "trace.csv", ["iteration", "elbo"],
                [(i + 1, repr(v)) for i, v in enumerate(result.trace)])


def _write_timelines(out: Path, cfg: RunConfig, model, history, network):
    grid = np.linspace(0.0, history.horizon, cfg.timeline_points)
    for p in cfg.timeline_items:
        if not 0 <= p < history.n_items:
            raise ConfigError(f"timeline item {p} out of range")
        values = ev.item_intensity_timeline(model, cfg.model, history, network, p, grid)
        _write_rows(out / f"timeline_{p}.csv", ["t", "intensity"],
                    [(repr(float(t)), repr(float(v))) for t, v in zip(grid, values)])


def _write_qq(path, values):
    theo, emp = ev.qq_pairs(values)
    _write_rows(path, ["theoretical_quantile", "empirical_quantile"],
                [(repr(float(a)), repr(float(b))) for a, b in zip(theo, emp)])


def metric_rows(method: str, variant: str, ranks, ks) -> list:
    """``(method, variant, k, metric, value)`` rows for Recall@k and NDCG@k."""
    rows = []
    for k in ks:
        rows.append((method, variant, k, "recall", ev.recall_at_k(ranks, k)))
        rows.append((method, variant, k, "ndcg", ev.ndcg_at_k(ranks, k)))
    return rows


# -- commands --------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> dict:
    out = _output_dir(cfg)
    sim = cfg.simulation
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if cfg.network is not None:
        network = load_network(_require(cfg.network, "network"), n_users=sim.n_users)
    else:
        network = random_network(sim.n_users, min(sim.avg_degree, sim.n_users - 1), seed=seeds[0])
    network = cfg.model.resolve_network(network, sim.n_users)
    if cfg.truth is not None:
        params = _load_params(cfg.truth, sim.n_users, sim.n_items)
    else:
        params = sample_params_from_prior(cfg.model, network, sim.n_items, seed=seeds[1])
    horizon = sim.horizon
    if horizon is None:
        horizon = horizon_for_events(params, cfg.model, sim.target_events)
    result = simulate(SimulationSpec(cfg.model, params, network, horizon, seed=seeds[2],
                                     max_events=sim.max_events))
    write_events(result.history, out / "events.csv")
    write_network(network, out / "network.csv")
    write_index_map([str(u) for u in range(sim.n_users)], out / "users.csv")
    write_index_map([str(p) for p in range(sim.n_items)], out / "items.csv")
    params.save(out / "truth.json", cfg.model)
    # the persisted config points at the simulated data, ready for fit/evaluate
    cfg.override(events=str(out / "events.csv"), network=str(out / "network.csv"),
                 users=str(out / "users.csv"), items=str(out / "items.csv"),
                 truth=str(out / "truth.json"), horizon=horizon).save(out / "config.json")
    summary = {"events": len(result.history), "horizon": horizon, "truncated": result.truncated}
    print(json.dumps(summary))
    return summary


def cmd_fit(cfg: RunConfig) -> dict:
    history, network = _load_data(cfg)
    out = _output_dir(cfg)
    result = _fit(cfg, history, network)
    _save_fit(out, cfg, result)
    write_index_map(history.user_labels, out / "users.csv")
    write_index_map(history.item_labels, out / "items.csv")
    cfg.save(out / "config.json")
    summary = {"iterations": result.n_iter, "converged": result.converged,
               "elbo": result.trace[-1]}
    print(json.dumps(summary))
    return summary


def _query_context(cfg: RunConfig, args):
    history, network = _load_data(cfg)
    params = _load_params(cfg.params, history.n_users, history.n_items)
    u = _index(list(history.user_labels), args.user, "user")
    t = history.horizon if args.time is None else args.time
    return history, network, params, u, t


def cmd_recommend(cfg: RunConfig, args) -> list:
    history, network, params, u, t = _query_context(cfg, args)
    k = min(args.k, history.n_items)
    rec = ev.recommend(params, cfg.model, history, network, u, t, k)
    rows = [(r + 1, history.item_labels[p], repr(float(s)))
            for r, (p, s) in enumerate(zip(rec.items, rec.scores))]
    w = csv.writer(sys.stdout)
    w.writerow(["rank", "item_id", "score"])
    w.writerows(rows)
    return rows


def cmd_predict_return(cfg: RunConfig, args) -> float:
    history, network, params, u, t = _query_context(cfg, args)
    item = None if args.item is None else _index(list(history.item_labels), args.item, "item")
    n = args.samples or cfg.return_samples
    value = ev.predict_return_time(params, cfg.model, history, network, u, t, n, cfg.seed, item)
    print(json.dumps({"user": args.user, "t0": t, "expected_return": value}))
    return value


def cmd_evaluate(cfg: RunConfig) -> list:
    """Fit on the early part of the log and score the held-out tail."""
    history, network = _load_data(cfg)
    out = _output_dir(cfg)
    train, cutoff, test_mask = ev.temporal_split(history, cfg.split_fraction)
    if not test_mask.any():
        raise DataError("no events after the split cutoff")
    result = _fit(cfg, train, network)
    _save_fit(out, cfg, result)
    variant = cfg.model.variant
    ranks = ev.test_ranks(result.params, cfg.model, history, network, test_mask)
    rows = metric_rows("model", variant, ranks, cfg.ks)
    rand = ev.random_ranks(len(ranks), history.n_items, seed=cfg.seed)
    rows += metric_rows("random", "-", rand, cfg.ks)
    if cfg.truth is not None:
        truth = _load_params(cfg.truth, history.n_users, history.n_items)
        rows += metric_rows("truth", variant, ev.test_ranks(truth, cfg.model, history, network,
                                                            test_mask), cfg.ks)

    users, t_prev, t_next = ev.return_time_queries(history, test_mask)
    if len(users):
        rng = np.random.default_rng(cfg.seed)
        pick = np.arange(len(users))
        if cfg.return_queries is not None and len(users) > cfg.return_queries:
            pick = np.sort(rng.choice(len(users), cfg.return_queries, replace=False))
        streams = np.random.SeedSequence(cfg.seed).spawn(len(pick))
        pred = np.array([
            ev.predict_return_time(result.params, cfg.model, history, network, users[q],
                                   t_prev[q], cfg.return_samples, streams[n])
            for n, q in enumerate(pick)
        ])
        gap = ev.mean_interevent_gap(train)
        rows.append(("model", variant, "", "return_mae", ev.returning_time_mae(pred, t_next[pick])))
        rows.append(("mean_gap", "-", "", "return_mae",
                     ev.returning_time_mae(t_prev[pick] + gap, t_next[pick])))

    intervals = ev.rescale(result.params, cfg.model, train, network)
    _write_qq(out / "qq.csv", intervals.pooled)
    rows.append(("model", variant, "", "qq_slope", ev.qq_slope(intervals.pooled)))
    _write_timelines(out, cfg, result.params, history, network)
    _write_rows(out / "metrics.csv", ["method", "variant", "k", "metric", "value"],
                [(m, v, k, name, repr(float(x))) for m, v, k, name, x in rows])
    cfg.save(out / "config.json")
    for m, v, k, name, x in rows:
        print(f"{m:>9} {v:>6} {str(k):>3} {name:>10} {x:.4f}")
    return rows


def cmd_diagnose(cfg: RunConfig) -> dict:
    """Time-change and similarity diagnostics for a fitted (or true) parameter snapshot."""
    history, network = _load_data(cfg)
    params = _load_params(cfg.params, history.n_users, history.n_items)
    out = _output_dir(cfg)
    intervals = ev.rescale(params, cfg.model, history, network)
    _write_qq(out / "qq.csv", intervals.pooled)
    ks = ev.ks_exponential(intervals.pooled)
    learned, empirical = ev.similarity_matrices(params, history)
    iu = np.triu_indices(history.n_users, 1)
    rho = stats.spearmanr(learned[iu], empirical[iu]).statistic if len(iu[0]) > 1 else float("nan")
    np.savetxt(out / "similarity_learned.csv", learned, delimiter=",")
    np.savetxt(out / "similarity_empirical.csv", empirical, delimiter=",")
    _write_timelines(out, cfg, params, history, network)
    summary = {
        "intervals": len(intervals.pooled),
        "qq_slope": ev.qq_slope(intervals.pooled),
        "ks_statistic": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
        "similarity_spearman": float(rho),
    }
    (out / "diagnostics.json").write_text(json.dumps(summary, indent=2) + "\n")
    cfg.save(out / "config.json")
    print(json.dumps(summary))
    return summary


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--output", help="output directory (overrides the config)")
    common.add_argument("--events", help="event log user_id,item_id,timestamp")
    common.add_argument("--network", help="follow graph follower_id,followee_id")
    common.add_argument("--horizon", type=float, help="end of the observation window")
    common.add_argument("--params", help="parameter snapshot written by fit")
    common.add_argument("--truth", help="ground-truth parameter snapshot")
    common.add_argument("--variant", choices=("HRPF", "SRPF", "DRPF", "DSRPF"))
    common.add_argument("--components", type=int, dest="n_components")
    common.add_argument("--max-iter", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rpf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="simulate an event log from the model")
    sub.add_parser("fit", parents=[common], help="variational inference on an event log")
    for name, helptext in (("recommend", "top-k items for a user"),
                           ("predict-return", "expected returning time of a user")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--user", required=True, help="user id as it appears in the log")
        p.add_argument("--time", type=float, help="query time (default: end of the log)")
        if name == "recommend":
            p.add_argument("--k", type=int, default=10)
        else:
            p.add_argument("--item", help="restrict to one item")
            p.add_argument("--samples", type=int)
    sub.add_parser("evaluate", parents=[common], help="held-out ranking and returning-time metrics")
    sub.add_parser("diagnose", parents=[common], help="time-change and similarity diagnostics")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, output=args.output, events=args.events,
                        network=args.network, horizon=args.horizon, params=args.params, truth=args.truth, variant=args.variant,
                        n_components=args.n_components, max_iter=args.max_iter, tol=args.tol)


def run(args) -> int:
    cfg = _resolve_config(args)
    commands = {
        "simulate": lambda: cmd_simulate(cfg),
        "fit": lambda: cmd_fit(cfg),
        "recommend": lambda: cmd_recommend(cfg, args),
        "predict-return": lambda: cmd_predict_return(cfg, args),
        "evaluate": lambda: cmd_evaluate(cfg),
        "diagnose": lambda: cmd_diagnose(cfg),
    }
    with threadpool_limits(limits=args.threads):
        commands[args.command]()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ColdStartError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
