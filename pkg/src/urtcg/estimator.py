"""Forward pass, frozen-route-choice gradient and projected AdaGrad fit.

Forward:   c_path = A t,  P = blockwise softmax(-theta c_path),  c_hat = P c_path
Loss:      mean_i w_i (c_tilde_i - c_hat_i)^2 + la |t_a - prior_a|^2 + lv |t_v - prior_v|^2
Backward:  with P held at its current value,
           dL/dt = -(2/n) A^T P^T (w * (c_tilde - P A t)) + prior terms
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .vectorize import RowIndex, VariableIndex, coverage_report


class EstimationError(RuntimeError):
    pass


class EstimationDiverged(EstimationError):
    def __init__(self, message, t_last=None, theta_last=None, epoch=None):
        super().__init__(message)
        self.t_last = t_last
        self.theta_last = theta_last
        self.epoch = epoch


@dataclass
class EstimatorConfig:
    theta_init: float = 0.3
    theta_learnable: bool = False
    learning_rate: float = 0.1
    batch_size: int = 8
    max_epochs: int = 50
    adagrad_epsilon: float = 1e-8
    prior_weight_links: float = 0.0
    prior_weight_waits: float = 0.0
    tol: float = 1e-5
    patience: int = 3
    seed: int = 0
    init: str = "prior"          # "prior" or "random"
    random_init_range: tuple[float, float] = (0.5, 5.0)
    p_refresh: str = "batch"     # "batch" or "epoch"
    imputed_weight: float = 0.5
    theta_fd_step: float = 1e-4
    theta_min: float = 1e-6

    def __post_init__(self):
        for name in ("theta_init", "batch_size", "max_epochs", "adagrad_epsilon", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "prior_weight_links", "prior_weight_waits", "imputed_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.init not in ("prior", "random"):
            raise ValueError("init must be 'prior' or 'random'")
        if self.p_refresh not in ("batch", "epoch"):
            raise ValueError("p_refresh must be 'batch' or 'epoch'")

    def to_json(self) -> dict:
        d = asdict(self)
        d["random_init_range"] = list(self.random_init_range)
        return d

    @classmethod
    def from_json(cls, doc) -> "EstimatorConfig":
        doc = dict(doc)
        if "random_init_range" in doc:
            doc["random_init_range"] = tuple(doc["random_init_range"])
        return cls(**doc)


@dataclass
class ForwardResult:
    c_path: np.ndarray
    p: np.ndarray          # route probability per path row
    c_hat: np.ndarray      # per od row
    od_ptr: np.ndarray

    @property
    def P(self) -> sp.csr_matrix:
        """Route-choice matrix, od rows x path rows, block diagonal."""
        n_od, n_path = len(self.od_ptr) - 1, len(self.p)
        return sp.csr_matrix((self.p, np.arange(n_path), self.od_ptr), shape=(n_od, n_path))


def block_softmax(costs: np.ndarray, theta: float, od_ptr: np.ndarray) -> np.ndarray:
    """Softmax of ``-theta * costs`` within each block ``od_ptr[i]:od_ptr[i+1]`` (max-shifted)."""
    z = -theta * costs
    starts = od_ptr[:-1]
    owner = np.repeat(np.arange(len(starts)), np.diff(od_ptr))
    z = z - np.maximum.reduceat(z, starts)[owner]
    e = np.exp(z)
    return e / np.add.reduceat(e, starts)[owner]


def forward(t: np.ndarray, theta: float, A: sp.csr_matrix, od_ptr: np.ndarray) -> ForwardResult:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or not math.isfinite(theta):
        raise EstimationError("non-finite input to forward pass")
    if theta <= 0:
        raise EstimationError("theta must be positive")
    if A.shape[1] != t.size or A.shape[0] != od_ptr[-1]:
        raise EstimationError(f"dimension mismatch: A {A.shape}, t {t.size}, path rows {od_ptr[-1]}")
    c_path = A @ t
    p = block_softmax(c_path, theta, od_ptr)
    c_hat = np.add.reduceat(p * c_path, od_ptr[:-1]) if len(od_ptr) > 1 else np.zeros(0)
    return ForwardResult(c_path, p, c_hat, od_ptr)


@dataclass
class Priors:
    values: np.ndarray
    n_links: int
    weight_links: float = 0.0
    weight_waits: float = 0.0

    def penalty(self, t: np.ndarray) -> float:
        d = t - self.values
        return (self.weight_links * float(d[: self.n_links] @ d[: self.n_links])
                + self.weight_waits * float(d[self.n_links:] @ d[self.n_links:]))

    def gradient(self, t: np.ndarray) -> np.ndarray:
        g = 2.0 * (t - self.values)
        g[: self.n_links] *= self.weight_links
        g[self.n_links:] *= self.weight_waits
        return g


def loss(c_hat: np.ndarray, c_tilde: np.ndarray, t: np.ndarray | None = None, priors: Priors | None = None,
         weights: np.ndarray | None = None) -> float:
    r = np.asarray(c_tilde, dtype=float) - np.asarray(c_hat, dtype=float)
    if r.size == 0:
        return 0.0
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    value = float(np.sum(w * r * r) / r.size)
    if priors is not None and t is not None:
        value += priors.penalty(np.asarray(t, dtype=float))
    return value


def backward_fixed_P(t: np.ndarray, p: np.ndarray, A: sp.csr_matrix, od_ptr: np.ndarray, c_tilde: np.ndarray,
                     priors: Priors | None = None, weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the loss in ``t`` with route probabilities ``p`` treated as constants."""
    t = np.asarray(t, dtype=float)
    n_od = len(od_ptr) - 1
    if A.shape != (len(p), t.size) or len(c_tilde) != n_od or od_ptr[-1] != len(p):
        raise EstimationError(f"dimension mismatch: A {A.shape}, p {len(p)}, t {t.size}, c_tilde {len(c_tilde)}")
    c_path = A @ t
    c_hat = np.add.reduceat(p * c_path, od_ptr[:-1]) if n_od else np.zeros(0)
    r = np.asarray(c_tilde, dtype=float) - c_hat
    if weights is not None:
        r = r * weights
    owner = np.repeat(np.arange(n_od), np.diff(od_ptr))
    g_path = p * r[owner]                     # P^T r
    grad = (-2.0 / max(n_od, 1)) * (A.T @ g_path)
    if priors is not None:
        grad = grad + priors.gradient(t)
    return grad


def theta_gradient(t, theta, A, od_ptr, c_tilde, weights=None, step=1e-4) -> float:
    """Central finite difference of the full (route-choice-aware) loss in theta."""
    step = min(step, theta / 2)
    lp = loss(forward(t, theta + step, A, od_ptr).c_hat, c_tilde, weights=weights)
    lm = loss(forward(t, theta - step, A, od_ptr).c_hat, c_tilde, weights=weights)
    return (lp - lm) / (2 * step)


def r_squared(predicted, truth) -> float:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape or truth.size < 2:
        raise ValueError("r_squared needs two equal-length vectors of length >= 2")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("undefined R²: truth is constant")
    return 1.0 - float(np.sum((truth - predicted) ** 2)) / ss_tot


@dataclass
class EstimationResult:
    t_hat: np.ndarray
    theta_hat: float
    loss_history: list[float]
    initial_loss: float
    c_hat: np.ndarray
    c_path: np.ndarray
    not_updated: tuple[int, ...]
    r2_od: float | None
    epochs_run: int
    converged: bool
    t_init: np.ndarray = field(repr=False, default=None)

    def to_json(self, index: VariableIndex | None = None, names: Sequence[str] | None = None,
                rows: RowIndex | None = None, c_tilde: np.ndarray | None = None) -> dict:
        doc = {
            "format": "urtcg-estimate", "version": 1,
            "theta_hat": self.theta_hat, "loss_history": self.loss_history, "initial_loss": self.initial_loss,
            "epochs_run": self.epochs_run, "converged": self.converged, "r2_od": self.r2_od,
            "not_updated": list(self.not_updated), "t": self.t_hat.tolist(),
        }
        if index is not None:
            doc["index"] = index.to_json()
        if names is not None:
            doc["names"] = list(names)
        if rows is not None:
            doc["od_rows"] = [list(r) for r in rows.od_rows]
            doc["c_hat"] = self.c_hat.tolist()
            if c_tilde is not None:
                doc["c_tilde"] = np.asarray(c_tilde).tolist()
        return doc


def initial_vector(prior: np.ndarray, config: EstimatorConfig) -> np.ndarray:
    if config.init == "prior":
        return np.array(prior, dtype=float)
    rng = np.random.default_rng([config.seed, 1])
    lo, hi = config.random_init_range
    return rng.uniform(lo, hi, size=len(prior))


def fit(A: sp.csr_matrix, od_ptr: np.ndarray, c_tilde: np.ndarray, config: EstimatorConfig, prior: np.ndarray,
        n_link_columns: int = 0, row_weights: np.ndarray | None = None) -> EstimationResult:
    """Projected mini-batch AdaGrad on ``t`` (and optionally theta).

    Every batch recomputes route probabilities from the current ``t`` (or once
    per epoch with ``p_refresh="epoch"``), takes the frozen-P gradient, applies
    an AdaGrad step and clips ``t`` at zero. Columns no path row touches keep
    their initial value.
    """
    A = sp.csr_matrix(A)
    od_ptr = np.asarray(od_ptr, dtype=np.int64)
    c_tilde = np.asarray(c_tilde, dtype=float)
    n_od = len(od_ptr) - 1
    if n_od == 0:
        raise EstimationError("no observed rows to fit")
    if len(c_tilde) != n_od or A.shape[0] != od_ptr[-1] or A.shape[1] != len(prior):
        raise EstimationError("dimension mismatch between A, rows, observations and prior")
    weights = np.ones(n_od) if row_weights is None else np.asarray(row_weights, dtype=float)

    priors = Priors(np.asarray(prior, dtype=float), n_link_columns, config.prior_weight_links,
                    config.prior_weight_waits)
    use_priors = config.prior_weight_links > 0 or config.prior_weight_waits > 0
    cov = coverage_report(A, max_rank_columns=0)
    covered = cov.column_counts > 0

    t = initial_vector(prior, config)
    t_init = t.copy()
    theta = float(config.theta_init)
    accum = np.zeros_like(t)
    theta_accum = 0.0
    rng = np.random.default_rng([config.seed, 2])
    owner = np.repeat(np.arange(n_od), np.diff(od_ptr))

    def full_loss(t_, theta_):
        fr = forward(t_, theta_, A, od_ptr)
        return loss(fr.c_hat, c_tilde, t_, priors if use_priors else None, weights), fr

    initial, _ = full_loss(t, theta)
    history: list[float] = []
    calm = 0
    converged = False
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_od)
        p_epoch = forward(t, theta, A, od_ptr).p if config.p_refresh == "epoch" else None
        for start in range(0, n_od, config.batch_size):
            batch = np.sort(order[start:start + config.batch_size])
            lo, hi = od_ptr[batch], od_ptr[batch + 1]
            prow = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])
            A_b = A[prow]
            ptr_b = np.concatenate([[0], np.cumsum(hi - lo)])
            if p_epoch is None:
                p_b = forward(t, theta, A_b, ptr_b).p
            else:
                p_b = p_epoch[prow]
            g = backward_fixed_P(t, p_b, A_b, ptr_b, c_tilde[batch], priors if use_priors else None,
                                 weights[batch])
            g[~covered] = 0.0
            t_good, theta_good = t, theta
            accum += g * g
            t = t - config.learning_rate * g / (np.sqrt(accum) + config.adagrad_epsilon)
            np.maximum(t, 0.0, out=t)
            if config.theta_learnable:
                gth = theta_gradient(t, theta, A_b, ptr_b, c_tilde[batch], weights[batch], config.theta_fd_step)
                theta_accum += gth * gth
                theta = max(theta - config.learning_rate * gth / (math.sqrt(theta_accum) + config.adagrad_epsilon),
                            config.theta_min)
            if not np.all(np.isfinite(t)) or not math.isfinite(theta):
                raise EstimationDiverged(f"non-finite parameters in epoch {epoch}", t_last=t_good,
                                         theta_last=theta_good, epoch=epoch)
        value, _ = full_loss(t, theta)
        if not math.isfinite(value):
            raise EstimationDiverged(f"non-finite loss in epoch {epoch}", t_last=t, theta_last=theta, epoch=epoch)
        prev = history[-1] if history else initial
        history.append(value)
        rel = abs(prev - value) / max(abs(prev), 1e-300)
        calm = calm + 1 if rel < config.tol else 0
        if calm >= config.patience:
            converged = True
            break

    fr = forward(t, theta, A, od_ptr)
    try:
        r2 = r_squared(fr.c_hat, c_tilde)
    except ValueError:
        r2 = None
    return EstimationResult(t, theta, history, initial, fr.c_hat, fr.c_path,
                            tuple(int(i) for i in np.flatnonzero(~covered)), r2, epoch, converged, t_init)


def save_config(config: EstimatorConfig, path) -> None:
    FsPath(path).write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")


def load_config(path) -> EstimatorConfig:
    return EstimatorConfig.from_json(json.loads(FsPath(path).read_text()))
