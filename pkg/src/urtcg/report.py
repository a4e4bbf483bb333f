"""Plot-data emission: scatter CSVs, per-interval wait tables and histograms,
metrics JSON and the run manifest. Everything here is data only."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .estimator import r_squared
from .vectorize import VariableIndex

TOOL = "urtcg"
WAIT_BIN_WIDTH_MIN = 0.5


def _num(x: float) -> str:
    return repr(float(x))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# scatter files


def write_scatter(path, labels: Sequence[Sequence], label_header: Sequence[str], true: np.ndarray,
                  est: np.ndarray) -> None:
    rows = ([*lab, float(a), float(b)] for lab, a, b in zip(labels, true, est))
    write_rows(path, [*label_header, "true", "estimated"], rows)


def read_scatter(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["true"]) for r in rows]), np.array([float(r["estimated"]) for r in rows]))


def scatter_r2(path) -> float:
    true, est = read_scatter(path)
    return r_squared(est, true)


# ---------------------------------------------------------------------------
# metrics and wait breakdowns


class IndexMismatch(ValueError):
    pass


def check_same_index(a: VariableIndex, b: VariableIndex) -> None:
    if a.to_json() != b.to_json():
        raise IndexMismatch("estimate and truth use different variable indices")


def class_metrics(t_hat: np.ndarray, t_true: np.ndarray, index: VariableIndex) -> dict:
    """R² and MAE overall, for link columns and for wait columns."""
    out = {}
    for name, sl in (("t", slice(None)), ("link", index.link_slice()), ("wait", index.wait_slice())):
        a, b = t_hat[sl], t_true[sl]
        try:
            out[f"r2_{name}"] = r_squared(a, b)
        except ValueError:
            out[f"r2_{name}"] = None
        out[f"mae_{name}"] = float(np.mean(np.abs(a - b))) if a.size else None
    return out


def wait_rows(t_hat: np.ndarray, t_true: np.ndarray | None, index: VariableIndex,
              names: Mapping[tuple[int, int], str] | None = None) -> list[list]:
    """One row per (platform, direction, interval)."""
    W = index.wait_matrix(t_hat)
    T = index.wait_matrix(t_true) if t_true is not None else None
    rows = []
    for j, (plat, direction) in enumerate(index.wait_pairs):
        label = (names or {}).get((plat, direction), "")
        for h in range(index.n_intervals):
            row = [plat, int(direction), label, h, float(W[j, h])]
            if T is not None:
                row.append(float(T[j, h]))
            rows.append(row)
    return rows


def wait_interval_summary(t_hat: np.ndarray, t_true: np.ndarray | None, index: VariableIndex) -> list[dict]:
    W = index.wait_matrix(t_hat)
    T = index.wait_matrix(t_true) if t_true is not None else None
    out = []
    for h in range(index.n_intervals):
        d = {"interval": h, "mean_est": float(W[:, h].mean()), "std_est": float(W[:, h].std())}
        if T is not None:
            d.update(mean_true=float(T[:, h].mean()), mae=float(np.mean(np.abs(W[:, h] - T[:, h]))))
        out.append(d)
    return out


def wait_histogram(t_hat: np.ndarray, t_true: np.ndarray | None, index: VariableIndex,
                   bin_width: float = WAIT_BIN_WIDTH_MIN) -> list[list]:
    """Counts of estimated (and true) waits per interval on a shared fixed-width bin grid."""
    W = index.wait_matrix(t_hat)
    T = index.wait_matrix(t_true) if t_true is not None else None
    top = max(float(W.max(initial=0.0)), float(T.max(initial=0.0)) if T is not None else 0.0)
    edges = np.arange(0.0, top + bin_width, bin_width)
    if edges.size < 2:
        edges = np.array([0.0, bin_width])
    elif edges[-1] <= top:
        edges = np.append(edges, edges[-1] + bin_width)
    rows = []
    for h in range(index.n_intervals):
        ce, _ = np.histogram(W[:, h], edges)
        ct = np.histogram(T[:, h], edges)[0] if T is not None else None
        for b in range(len(edges) - 1):
            row = [h, float(edges[b]), float(edges[b + 1]), int(ce[b])]
            if ct is not None:
                row.append(int(ct[b]))
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    timings_s: dict[str, float] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.config).encode()).hexdigest()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings_s[name] = round(time.perf_counter() - t0, 6)

    def record_outputs(self, out_dir, names: Iterable[str]) -> None:
        for n in sorted(names):
            self.outputs[n] = sha256_file(Path(out_dir) / n)

    def to_json(self) -> dict:
        from . import __version__
        return {"tool": TOOL, "version": __version__, "command": self.command, "config": self.config,
                "config_hash": self.config_hash, "seed": self.seed, "inputs": self.inputs,
                "outputs": self.outputs, "timings_s": self.timings_s}
