"""End-to-end wiring: observation table -> paths -> incidence -> fit -> metrics,
plus the synthetic scenario runner used by the sensitivity grid."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .afc import IntervalSpec, ObservationTable, aggregate
from .completion import complete_table
from .estimator import EstimationResult, EstimatorConfig, fit, r_squared
from .network import ExpandedNetwork, LinkKind, Path, enumerate_paths
from .synth import (NETWORKS, DemandProfile, GroundTruth, Perturbation, perturb, sample_afc,
                    sample_ground_truth)
from .vectorize import (CoverageReport, RowIndex, VariableIndex, build_incidence, build_row_index,
                        build_variable_index, coverage_report)


def derive_seed(seed: int, name: str) -> int:
    """Stable sub-seed for a named stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def prior_vector(net: ExpandedNetwork, index: VariableIndex) -> np.ndarray:
    """Prior link times, then each wait column's Board-link prior."""
    board = {(a.tail, a.direction): a.prior_time_min for a in net.links if a.kind is LinkKind.BOARD}
    t = np.empty(index.total_columns)
    for j, lid in enumerate(index.link_ids):
        t[j] = net.links[lid].prior_time_min
    for j, pair in enumerate(index.wait_pairs):
        t[index.wait_column(j, 0): index.wait_column(j, 0) + index.n_intervals] = board[pair]
    return t


@dataclass
class Problem:
    net: ExpandedNetwork
    spec: IntervalSpec
    table: ObservationTable
    paths: dict[tuple[int, int], list[Path]]
    index: VariableIndex
    rows: RowIndex
    A: sp.csr_matrix
    c_tilde: np.ndarray
    row_weights: np.ndarray
    prior: np.ndarray
    skipped_cells: list[tuple[int, int, int]] = field(default_factory=list)

    def coverage(self, max_rank_columns: int = 2000) -> CoverageReport:
        return coverage_report(self.A, max_rank_columns)


def build_problem(net: ExpandedNetwork, table: ObservationTable, k: int = 3, detour_factor: float = 1.5,
                  paths: Mapping[tuple[int, int], Sequence[Path]] | None = None,
                  imputed_weight: float = 0.5) -> Problem:
    spec = table.interval_spec
    if paths is None:
        paths = enumerate_paths(net, table.ods(), k=k, detour_factor=detour_factor)
    index = build_variable_index(net, spec)
    rows, skipped = build_row_index(table.rows.keys(), paths)
    A = build_incidence(net, index, rows)
    cells = [table.rows[r] for r in rows.od_rows]
    c_tilde = np.array([c.mean_travel_min for c in cells])
    weights = np.array([imputed_weight if c.imputed else 1.0 for c in cells])
    return Problem(net, spec, table, dict(paths), index, rows, A, c_tilde, weights, prior_vector(net, index), skipped)


def estimate(problem: Problem, config: EstimatorConfig) -> EstimationResult:
    return fit(problem.A, problem.rows.od_ptr, problem.c_tilde, config, problem.prior, problem.index.n_links,
               problem.row_weights)


# ---------------------------------------------------------------------------
# evaluation against ground truth


def full_path_matrix(net: ExpandedNetwork, index: VariableIndex,
                     paths: Mapping[tuple[int, int], Sequence[Path]]) -> tuple[sp.csr_matrix, RowIndex]:
    """Incidence over every enumerated path in every interval (evaluation only)."""
    cells = [(o, d, h) for (o, d), plist in paths.items() if plist for h in range(index.n_intervals)]
    rows, _ = build_row_index(cells, paths)
    return build_incidence(net, index, rows), rows


def identifiable_projection(A: sp.spmatrix) -> np.ndarray:
    """Orthogonal projector onto the row space of A (what path travel times determine)."""
    Q = scipy.linalg.orth(A.T.toarray() if sp.issparse(A) else np.asarray(A).T)
    return Q @ Q.T


def _safe_r2(pred, truth):
    try:
        return r_squared(pred, truth)
    except ValueError:
        return float("nan")


def evaluate(t_hat: np.ndarray, t_true: np.ndarray, index: VariableIndex, A_eval: sp.csr_matrix | None = None,
             with_identifiable: bool = False) -> dict:
    """R² and MAE overall, for link and wait columns separately, and per interval for waits."""
    t_hat, t_true = np.asarray(t_hat, float), np.asarray(t_true, float)
    if t_hat.shape != t_true.shape or t_hat.size != index.total_columns:
        raise ValueError("estimate and truth do not share the variable index")
    ls, ws = index.link_slice(), index.wait_slice()
    m = {
        "r2_t": _safe_r2(t_hat, t_true), "mae_t": float(np.mean(np.abs(t_hat - t_true))),
        "r2_link": _safe_r2(t_hat[ls], t_true[ls]), "mae_link": float(np.mean(np.abs(t_hat[ls] - t_true[ls]))),
        "r2_wait": _safe_r2(t_hat[ws], t_true[ws]), "mae_wait": float(np.mean(np.abs(t_hat[ws] - t_true[ws]))),
    }
    W_hat, W_true = index.wait_matrix(t_hat), index.wait_matrix(t_true)
    m["wait_by_interval"] = [
        {"interval": h, "mean_est": float(W_hat[:, h].mean()), "mean_true": float(W_true[:, h].mean()),
         "mae": float(np.mean(np.abs(W_hat[:, h] - W_true[:, h])))} for h in range(index.n_intervals)]
    if A_eval is not None:
        m["r2_path"] = _safe_r2(A_eval @ t_hat, A_eval @ t_true)
        m["mae_path"] = float(np.mean(np.abs(A_eval @ t_hat - A_eval @ t_true)))
        if with_identifiable:
            Pr = identifiable_projection(A_eval)
            m["r2_t_identifiable"] = _safe_r2(Pr @ t_hat, Pr @ t_true)
            m["null_space_dim"] = int(index.total_columns - np.linalg.matrix_rank(A_eval.toarray()))
    return m


# ---------------------------------------------------------------------------
# synthetic scenarios


@dataclass(frozen=True)
class Scenario:
    network: str = "fig3"
    seed: int = 0
    base_records_per_cell: int = 200
    noise: float = 0.0
    deletion: float = 0.0
    k: int = 3
    detour_factor: float = 1.5
    complete: bool = True
    layout: str = "od-interval"
    spec: IntervalSpec = IntervalSpec()
    theta_true: float = 0.3


@dataclass
class ScenarioResult:
    scenario: Scenario
    metrics: dict
    result: EstimationResult
    problem: Problem
    truth: GroundTruth
    deleted_ods: list
    n_records: int


def synthesize(scn: Scenario):
    """Network, ground truth, all-OD paths and (perturbed) AFC records for a scenario."""
    net = NETWORKS[scn.network]()
    truth = sample_ground_truth(net, scn.spec, derive_seed(scn.seed, "truth"), theta_true=scn.theta_true)
    paths = enumerate_paths(net, k=scn.k, detour_factor=scn.detour_factor)
    demand = DemandProfile(scn.base_records_per_cell, seed=derive_seed(scn.seed, "demand"))
    sampled = sample_afc(net, paths, truth, demand, scn.spec)
    pert = perturb(sampled.records, Perturbation(scn.noise, scn.deletion, derive_seed(scn.seed, "perturb")))
    return net, truth, paths, sampled, pert


def run_scenario(scn: Scenario, config: EstimatorConfig | None = None,
                 with_identifiable: bool = False) -> ScenarioResult:
    config = config or EstimatorConfig(seed=derive_seed(scn.seed, "estimator"))
    net, truth, paths, sampled, pert = synthesize(scn)
    table = aggregate(pert.records, scn.spec)
    if scn.complete and pert.deleted_ods:
        table, _ = complete_table(table, layout=scn.layout, stations=net.station_ids(),
                                  keep=lambda o, d, h: bool(paths.get((o, d))))
    problem = build_problem(net, table, paths=paths, imputed_weight=config.imputed_weight)
    result = estimate(problem, config)
    A_eval, _ = full_path_matrix(net, problem.index, paths)
    metrics = evaluate(result.t_hat, truth.t_true, problem.index, A_eval, with_identifiable)
    metrics["r2_od"] = result.r2_od
    metrics["final_loss"] = result.loss_history[-1] if result.loss_history else result.initial_loss
    metrics["initial_loss"] = result.initial_loss
    return ScenarioResult(scn, metrics, result, problem, truth, pert.deleted_ods, len(pert.records))
