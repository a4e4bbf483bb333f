"""SoftImpute completion of missing (od, interval) cells of an observation table."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .afc import Cell, IntervalSpec, ObservationTable

LAYOUTS = ("od-interval", "origin-destination")


class CompletionError(ValueError):
    pass


class CompletionWarning(UserWarning):
    pass


@dataclass
class ObservationMatrix:
    """Observed cells placed in a dense matrix; ``mask`` marks observed entries.

    ``layout="od-interval"``: one row per OD pair, one column per interval.
    ``layout="origin-destination"``: one row per (origin, interval), one
    column per destination, so an OD with no records at all still shares
    rows and columns with observed cells.
    """

    X: np.ndarray
    mask: np.ndarray
    row_keys: list
    col_keys: list
    layout: str = "od-interval"
    counts: np.ndarray | None = field(default=None, repr=False)

    def cell_key(self, i: int, j: int) -> tuple[int, int, int]:
        if self.layout == "od-interval":
            (o, d), h = self.row_keys[i], self.col_keys[j]
        else:
            (o, h), d = self.row_keys[i], self.col_keys[j]
        return (o, d, h)


def to_matrix(table: ObservationTable, od_order: Sequence[tuple[int, int]] | None = None,
              layout: str = "od-interval", stations: Sequence[int] | None = None) -> ObservationMatrix:
    if layout not in LAYOUTS:
        raise CompletionError(f"unknown layout {layout}")
    H = table.interval_spec.count
    if layout == "od-interval":
        row_keys = list(od_order) if od_order is not None else table.ods()
        col_keys = list(range(H))
        pos = {od: i for i, od in enumerate(row_keys)}
        place = lambda o, d, h: (pos.get((o, d)), h)
    else:
        if stations is None:
            stations = sorted({o for o, _, _ in table.rows} | {d for _, d, _ in table.rows})
        row_keys = [(o, h) for o in stations for h in range(H)]
        col_keys = list(stations)
        rpos = {k: i for i, k in enumerate(row_keys)}
        cpos = {s: j for j, s in enumerate(col_keys)}
        place = lambda o, d, h: (rpos.get((o, h)), cpos.get(d))
    X = np.full((len(row_keys), len(col_keys)), np.nan)
    counts = np.zeros(X.shape, dtype=np.int64)
    for (o, d, h), cell in table.rows.items():
        i, j = place(o, d, h)
        if i is None or j is None:
            raise CompletionError(f"cell {(o, d, h)} not covered by the matrix ordering")
        X[i, j] = cell.mean_travel_min
        counts[i, j] = cell.count
    return ObservationMatrix(X, ~np.isnan(X), row_keys, col_keys, layout, counts)


@dataclass
class CompletionResult:
    Z: np.ndarray                   # completed matrix, observed entries restored exactly
    lambdas: np.ndarray
    train_errors: list[float]       # observed-cell RMS error of the low-rank fit after each lambda
    iterations: list[int]
    converged: bool
    excluded_rows: list[int]
    excluded_cols: list[int]
    fit: np.ndarray = field(repr=False, default=None)   # low-rank iterate before restoring observed cells


def _svt(Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    return (U * s) @ Vt, s


def soft_impute(M: ObservationMatrix, lambdas: Sequence[float] | None = None, n_lambdas: int = 10,
                lambda_ratio: float = 100.0, max_iter: int = 100, tol: float = 1e-4) -> CompletionResult:
    """Iterate Z <- SVT_lambda(P_obs(X) + P_miss(Z)) down a decreasing lambda path.

    The default path is geometric from the top singular value of the
    zero-filled observed matrix down to that value / ``lambda_ratio``, with
    warm starts. Rows or columns with no observation cannot be completed;
    they are left NaN and reported.
    """
    mask = M.mask
    if not mask.any():
        raise CompletionError("no observed entries")
    rows_ok = mask.any(axis=1)
    cols_ok = mask.any(axis=0)
    sub_mask = mask[np.ix_(rows_ok, cols_ok)]
    X = np.where(mask, M.X, 0.0)[np.ix_(rows_ok, cols_ok)]

    if lambdas is None:
        lam_max = float(np.linalg.svd(X, compute_uv=False)[0])
        lambdas = np.geomspace(lam_max, lam_max / lambda_ratio, n_lambdas)
    lambdas = np.asarray(lambdas, dtype=float)

    Z = np.zeros_like(X)
    train, iters = [], []
    converged = True
    n_obs = int(sub_mask.sum())
    for lam in lambdas:
        ok = False
        for it in range(1, max_iter + 1):
            Z_new, _ = _svt(np.where(sub_mask, X, Z), lam)
            num = np.linalg.norm(Z_new - Z)
            den = max(np.linalg.norm(Z), 1e-12)
            Z = Z_new
            if num / den < tol:
                ok = True
                break
        converged &= ok
        iters.append(it)
        train.append(float(np.sqrt(np.sum(((X - Z) * sub_mask) ** 2) / n_obs)))
    if not converged:
        warnings.warn("soft_impute hit max_iter before reaching tol; returning last iterate", CompletionWarning,
                      stacklevel=2)

    fit_full = np.full(M.X.shape, np.nan)
    fit_full[np.ix_(rows_ok, cols_ok)] = Z
    out = np.where(mask, M.X, fit_full)
    return CompletionResult(out, lambdas, train, iters, converged,
                            [int(i) for i in np.flatnonzero(~rows_ok)], [int(j) for j in np.flatnonzero(~cols_ok)],
                            fit_full)


def from_matrix(M: ObservationMatrix, completed: np.ndarray, spec: IntervalSpec | None = None,
                keep=None) -> ObservationTable:
    """Table from a completed matrix; imputed cells carry ``count=0, imputed=True``.

    Observed cells keep their original count. ``keep(o, d, h)`` can veto
    imputed cells. Entries still NaN, non-positive imputations and
    origin == destination cells are dropped.
    """
    rows = {}
    n_r, n_c = completed.shape
    for i in range(n_r):
        for j in range(n_c):
            o, d, h = M.cell_key(i, j)
            if M.mask[i, j]:
                count = int(M.counts[i, j]) if M.counts is not None else 1
                rows[(o, d, h)] = Cell(float(M.X[i, j]), count)
                continue
            v = completed[i, j]
            if not np.isfinite(v) or v <= 0 or o == d:
                continue
            if keep is not None and not keep(o, d, h):
                continue
            rows[(o, d, h)] = Cell(float(v), 0, True)
    spec = spec if spec is not None else IntervalSpec(count=max((k[2] for k in rows), default=0) + 1)
    return ObservationTable(dict(sorted(rows.items())), spec)


def complete_table(table: ObservationTable, layout: str = "od-interval", stations: Sequence[int] | None = None,
                   keep=None, **kwargs) -> tuple[ObservationTable, CompletionResult]:
    M = to_matrix(table, layout=layout, stations=stations)
    res = soft_impute(M, **kwargs)
    out = from_matrix(M, res.Z, table.interval_spec, keep)
    out.out_of_window = table.out_of_window
    return out, res
