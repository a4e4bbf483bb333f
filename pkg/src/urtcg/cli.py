"""``urtcg`` command line: synth, estimate, evaluate, sensitivity.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .afc import CorruptInputError, IntervalSpec, aggregate, iter_afc, ParseReport, check_corruption, write_afc
from .completion import LAYOUTS, CompletionError, complete_table
from .estimator import EstimationDiverged, EstimationError, EstimatorConfig, load_config, r_squared
from .network import NetworkError, enumerate_paths, load_network, validate_network, write_link_table
from .pipeline import Scenario, build_problem, derive_seed, estimate, full_path_matrix, run_scenario
from .report import (IndexMismatch, RunManifest, check_same_index, class_metrics, wait_histogram,
                     wait_interval_summary, wait_rows, write_json, write_rows, write_scatter)
from .synth import NETWORKS, DemandProfile, GroundTruth, Perturbation, perturb, sample_afc, sample_ground_truth
from .vectorize import VariableIndex, VectorizeError

log = logging.getLogger("urtcg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
JOBS_ENV = "URTCG_JOBS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _fraction(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{s} is not in [0, 1]")
    return v


def _float_list(s: str) -> list[float]:
    return [_fraction(x) for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _add_interval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--interval-start", type=float, default=420.0, help="window start, minutes after midnight")
    p.add_argument("--interval-width", type=float, default=30.0, help="interval width in minutes")
    p.add_argument("--intervals", type=int, default=10, help="number of intervals")


def _spec(args) -> IntervalSpec:
    try:
        return IntervalSpec(args.interval_start, args.interval_width, args.intervals)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _network(args):
    if getattr(args, "link_table", None):
        path = Path(args.link_table)
        if not path.exists():
            raise UsageError(f"network file not found: {path}")
        return load_network(path), path
    if args.network in NETWORKS:
        return NETWORKS[args.network](), None
    path = Path(args.network)
    if not path.exists():
        raise UsageError(f"--network must be one of {sorted(NETWORKS)} or an existing file, got {args.network}")
    return load_network(path), path


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, manifest: RunManifest) -> list[str]:
    out = Path(args.out)
    spec = _spec(args)
    with manifest.stage("network"):
        net, src = _network(args)
        if src is not None:
            manifest.add_input(src)
        problems = [i for i in validate_network(net) if i.code in ("missing-board", "missing-alight")]
        if problems:
            raise DataError("; ".join(i.message for i in problems))
    with manifest.stage("paths"):
        paths = enumerate_paths(net, k=args.k, detour_factor=args.detour)
    with manifest.stage("sample"):
        truth = sample_ground_truth(net, spec, derive_seed(args.seed, "truth"), theta_true=args.theta_true)
        demand = DemandProfile(args.records_per_cell, seed=derive_seed(args.seed, "demand"))
        sampled = sample_afc(net, paths, truth, demand, spec)
        pert_cfg = Perturbation(args.noise, args.delete_od, derive_seed(args.seed, "perturb"))
        pert = perturb(sampled.records, pert_cfg)
    with manifest.stage("write"):
        write_afc(pert.records, out / "afc.csv")
        write_json(truth.to_json(truth.index.names(net)), out / "truth.json")
        write_link_table(net, out / "network.csv")
        labels = sampled.route_labels[pert.keep]
        write_json({"format": "urtcg-route-labels", "version": 1, "path_id": labels.tolist()},
                   out / "route_labels.json")
        write_json(pert.manifest(pert_cfg), out / "perturbation.json")
    return ["afc.csv", "truth.json", "network.csv", "route_labels.json", "perturbation.json"]


# ---------------------------------------------------------------------------
# estimate


def _estimator_config(args) -> EstimatorConfig:
    cfg = load_config(args.config) if args.config else EstimatorConfig()
    overrides = {"learning_rate": args.lr, "max_epochs": args.epochs, "batch_size": args.batch_size,
                 "theta_init": args.theta, "p_refresh": args.p_refresh, "init": args.init,
                 "prior_weight_links": args.prior_weight_links, "prior_weight_waits": args.prior_weight_waits}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.learn_theta:
        overrides["theta_learnable"] = True
    overrides["seed"] = args.seed
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _wait_labels(index: VariableIndex, names) -> dict:
    if not names:
        return {}
    out = {}
    for j, pair in enumerate(index.wait_pairs):
        nm = names[index.wait_column(j, 0)]
        out[pair] = nm.rsplit(":h", 1)[0]
    return out


def _evaluate_outputs(out: Path, t_hat, t_true, index: VariableIndex, names, extra: dict | None = None) -> list[str]:
    """Scatter of t, wait tables, histogram and metrics JSON; shared by estimate and evaluate."""
    metrics = class_metrics(t_hat, t_true, index)
    labels = [[i, names[i] if names else ""] for i in range(index.total_columns)]
    write_scatter(out / "scatter_t.csv", labels, ["column", "name"], t_true, t_hat)
    wl = _wait_labels(index, names)
    write_rows(out / "waits.csv", ["platform", "direction", "label", "interval", "estimated", "true"],
               wait_rows(t_hat, t_true, index, wl))
    write_rows(out / "wait_histogram.csv", ["interval", "bin_lo", "bin_hi", "count_estimated", "count_true"],
               wait_histogram(t_hat, t_true, index))
    metrics["wait_by_interval"] = wait_interval_summary(t_hat, t_true, index)
    metrics.update(extra or {})
    write_json(metrics, out / "metrics.json")
    return ["scatter_t.csv", "waits.csv", "wait_histogram.csv", "metrics.json"]


def cmd_estimate(args, manifest: RunManifest) -> list[str]:
    out = Path(args.out)
    spec = _spec(args)
    config = _estimator_config(args)
    afc_path = Path(args.afc)
    if not afc_path.exists():
        raise UsageError(f"AFC file not found: {afc_path}")
    truth = None
    if args.truth:
        if not Path(args.truth).exists():
            raise UsageError(f"truth file not found: {args.truth}")
        truth = GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
        manifest.add_input(args.truth)
    manifest.add_input(afc_path)

    with manifest.stage("network"):
        net, src = _network(args)
        if src is not None:
            manifest.add_input(src)
    with manifest.stage("ingest"):
        report = ParseReport()
        table = aggregate(iter_afc(afc_path, net.has_station, net.canonical_station, report), spec)
        check_corruption(report)
        if not table.rows:
            raise DataError("no AFC records fall inside the interval window")
    need_all = truth is not None or args.impute != "none"
    with manifest.stage("paths"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            paths = enumerate_paths(net, None if need_all else table.ods(), k=args.k, detour_factor=args.detour)
    imputed = 0
    if args.impute != "none":
        with manifest.stage("impute"):
            before = len(table)
            table, _ = complete_table(table, layout=args.impute, stations=net.station_ids(),
                                      keep=lambda o, d, h: bool(paths.get((o, d))))
            imputed = len(table) - before
    with manifest.stage("vectorize"):
        problem = build_problem(net, table, paths=paths, imputed_weight=config.imputed_weight)
        cov = problem.coverage()
        write_json(cov.to_json(problem.index.names(net)), out / "coverage.json")
        if problem.A.shape[0] == 0 or not (cov.column_counts > 0).any():
            raise DataError("no observed cell has a path; see coverage.json "
                            f"({len(cov.uncovered)} of {cov.total_columns} columns uncovered)")
    with manifest.stage("fit"):
        result = estimate(problem, config)
    names = problem.index.names(net)
    with manifest.stage("report"):
        doc = result.to_json(problem.index, names, problem.rows, problem.c_tilde)
        doc["config"] = config.to_json()
        doc["interval_spec"] = asdict(spec)
        doc["imputed_cells"] = imputed
        doc["parse_report"] = report.to_json()
        write_json(doc, out / "estimate.json")
        written = ["coverage.json", "estimate.json", "scatter_od.csv"]
        write_scatter(out / "scatter_od.csv", problem.rows.od_rows, ["origin", "destination", "interval"],
                      problem.c_tilde, result.c_hat)
        if truth is not None:
            try:
                check_same_index(problem.index, truth.index)
            except IndexMismatch as exc:
                raise DataError(str(exc)) from None
            A_eval, rows_eval = full_path_matrix(net, problem.index, paths)
            true_p, est_p = A_eval @ truth.t_true, A_eval @ result.t_hat
            write_scatter(out / "scatter_path.csv", rows_eval.path_rows,
                          ["origin", "destination", "path", "interval"], true_p, est_p)
            extra = {"r2_path": r_squared(est_p, true_p), "mae_path": float(np.mean(np.abs(est_p - true_p))),
                     "r2_od": result.r2_od}
            written += ["scatter_path.csv"] + _evaluate_outputs(out, result.t_hat, truth.t_true, problem.index,
                                                               names, extra)
    return written


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args, manifest: RunManifest) -> list[str]:
    out = Path(args.out)
    for p in (args.result, args.truth):
        if not Path(p).exists():
            raise UsageError(f"file not found: {p}")
        manifest.add_input(p)
    res = json.loads(Path(args.result).read_text())
    truth = GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
    if "index" not in res:
        raise DataError("result JSON carries no variable index")
    index = VariableIndex.from_json(res["index"])
    try:
        check_same_index(index, truth.index)
    except IndexMismatch as exc:
        raise DataError(str(exc)) from None
    t_hat = np.asarray(res["t"], dtype=float)
    if t_hat.size != index.total_columns:
        raise DataError("estimate length does not match its index")
    with manifest.stage("evaluate"):
        return _evaluate_outputs(out, t_hat, truth.t_true, index, res.get("names"))


# ---------------------------------------------------------------------------
# sensitivity

SENSITIVITY_COLUMNS = ("network", "noise", "deletion", "seed", "r2_link", "r2_wait", "r2_path", "r2_t", "r2_od",
                       "mae_link", "mae_wait", "n_records", "deleted_ods", "epochs", "converged")


def _grid_job(job: tuple) -> list:
    scn, cfg = job
    r = run_scenario(scn, cfg)
    m = r.metrics
    return [scn.network, scn.noise, scn.deletion, scn.seed, m["r2_link"], m["r2_wait"], m["r2_path"], m["r2_t"],
            m["r2_od"], m["mae_link"], m["mae_wait"], r.n_records, len(r.deleted_ods), r.result.epochs_run,
            int(r.result.converged)]


def jobs_from_env(default: int = 1) -> int:
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def sensitivity_jobs(args) -> list[tuple[Scenario, EstimatorConfig]]:
    spec = _spec(args)
    jobs = []
    for seed in args.seeds:
        for noise in args.noise:
            for deletion in args.delete_od:
                scn = Scenario(network=args.network, seed=seed, base_records_per_cell=args.records_per_cell,
                               noise=noise, deletion=deletion, k=args.k, detour_factor=args.detour,
                               complete=args.impute != "none",
                               layout=args.impute if args.impute != "none" else "od-interval", spec=spec)
                cfg = replace(_estimator_config(args), seed=derive_seed(seed, "estimator"))
                jobs.append((scn, cfg))
    return jobs


def cmd_sensitivity(args, manifest: RunManifest) -> list[str]:
    if args.network not in NETWORKS:
        raise UsageError(f"sensitivity runs on built-in networks only: {sorted(NETWORKS)}")
    jobs = sensitivity_jobs(args)
    n_jobs = jobs_from_env()
    with manifest.stage("grid"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if n_jobs > 1:
                with ProcessPoolExecutor(n_jobs) as pool:
                    rows = list(pool.map(_grid_job, jobs))
            else:
                rows = [_grid_job(j) for j in jobs]
    rows.sort(key=lambda r: (r[3], r[1], r[2]))
    write_rows(Path(args.out) / "sensitivity.csv", SENSITIVITY_COLUMNS, rows)
    return ["sensitivity.csv"]


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urtcg", description="Link travel and station waiting time estimation "
                                "from AFC data on an expanded rail network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic AFC dataset with ground truth")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--network", choices=sorted(NETWORKS), default=None)
    g.add_argument("--link-table", help="link-table CSV or network snapshot JSON")
    s.add_argument("--records-per-cell", type=int, default=200)
    s.add_argument("--noise", type=_fraction, default=0.0)
    s.add_argument("--delete-od", type=_fraction, default=0.0)
    s.add_argument("--theta-true", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--detour", type=float, default=1.5)
    _add_interval_flags(s)
    s.add_argument("--out", required=True)

    e = sub.add_parser("estimate", help="fit link and waiting times to an AFC file")
    e.add_argument("--network", required=True, help=f"link-table CSV, snapshot JSON, or one of {sorted(NETWORKS)}")
    e.add_argument("--afc", required=True)
    e.add_argument("--truth", help="ground-truth JSON; enables t and path scatter output")
    e.add_argument("--impute", choices=("none",) + LAYOUTS, default="none")
    e.add_argument("--k", type=int, default=3)
    e.add_argument("--detour", type=float, default=1.5)
    _add_interval_flags(e)
    _add_estimator_flags(e)
    e.add_argument("--out", required=True)

    v = sub.add_parser("evaluate", help="compare an estimate JSON to ground truth")
    v.add_argument("--result", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--out", required=True)

    z = sub.add_parser("sensitivity", help="noise x OD-deletion grid on a built-in network")
    z.add_argument("--network", choices=sorted(NETWORKS), default="fig3")
    z.add_argument("--noise", type=_float_list, default=[0.0, 0.1, 0.2])
    z.add_argument("--delete-od", type=_float_list, default=[0.0, 0.2, 0.5])
    z.add_argument("--seeds", type=_int_list, default=[0])
    z.add_argument("--records-per-cell", type=int, default=200)
    z.add_argument("--impute", choices=("none",) + LAYOUTS, default="od-interval")
    z.add_argument("--k", type=int, default=3)
    z.add_argument("--detour", type=float, default=1.5)
    _add_interval_flags(z)
    _add_estimator_flags(z)
    z.add_argument("--out", required=True)
    return p


def _add_estimator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="estimator config JSON; explicit flags override it")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--learn-theta", action="store_true")
    p.add_argument("--p-refresh", choices=("batch", "epoch"))
    p.add_argument("--init", choices=("prior", "random"))
    p.add_argument("--prior-weight-links", type=float)
    p.add_argument("--prior-weight-waits", type=float)
    p.add_argument("--seed", type=int, default=0)


COMMANDS = {"synth": cmd_synth, "estimate": cmd_estimate, "evaluate": cmd_evaluate, "sensitivity": cmd_sensitivity}


def _check_usage(args) -> None:
    if args.command == "synth":
        if args.network is None and args.link_table is None:
            args.network = "fig3"
        if args.records_per_cell < 1:
            raise UsageError("--records-per-cell must be at least 1")
    if getattr(args, "k", 1) < 1:
        raise UsageError("--k must be at least 1")
    if getattr(args, "detour", 1.0) < 1.0:
        raise UsageError("--detour must be at least 1")
    if args.command == "sensitivity" and not (args.noise and args.delete_od and args.seeds):
        raise UsageError("sensitivity grid is empty")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose")}
    manifest = RunManifest(["urtcg", *argv], config, getattr(args, "seed", None))
    try:
        _check_usage(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](args, manifest)
        manifest.record_outputs(out, written)
        write_json(manifest.to_json(), out / "manifest.json")
    except UsageError as exc:
        print(f"urtcg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptInputError, NetworkError, VectorizeError, CompletionError, IndexMismatch,
            KeyError, json.JSONDecodeError) as exc:
        print(f"urtcg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationDiverged, EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"urtcg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
