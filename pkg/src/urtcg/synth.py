"""Synthetic networks, ground-truth travel/wait times, logit-sampled AFC records
and the noise / OD-deletion perturbations used for sensitivity runs."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from .afc import AfcRecord, IntervalSpec
from .network import (ENTRY_CODE_OFFSET, ENTRY_EXIT_LINE, TRANSFER_LINE, ExpandedNetwork, LinkKind, LinkRow, Path,
                      load_link_table)
from .vectorize import VariableIndex, build_variable_index, path_columns

log = logging.getLogger(__name__)


def _line_rows(line: int, codes: Sequence[int], names: Mapping[int, str], dists: Sequence[float],
               ring: bool = False) -> list[LinkRow]:
    seq = list(codes) + ([codes[0]] if ring else [])
    rows = []
    for (a, b), dist in zip(zip(seq, seq[1:]), dists):
        rows.append(LinkRow(a, b, 0, line, names[a], names[b], dist))
        rows.append(LinkRow(b, a, 1, line, names[b], names[a], dist))
    return rows


def _entry_rows(stations: Mapping[int, str], dists: Mapping[int, float]) -> list[LinkRow]:
    return [LinkRow(ENTRY_CODE_OFFSET + s, s, 2, ENTRY_EXIT_LINE, stations[s], stations[s], dists[s])
            for s in sorted(stations)]


FIG3_NAMES = {1: "S1", 2: "S2", 3: "S3", 4: "S4", 5: "S5"}


def fig3_link_rows() -> list[LinkRow]:
    rows = _line_rows(1, [1, 2, 3], FIG3_NAMES, [2000, 1500])
    rows += _line_rows(2, [4, 2, 5], FIG3_NAMES, [1800, 2200])
    rows.append(LinkRow(2, 2, 2, TRANSFER_LINE, "S2", "S2", 600))
    rows += _entry_rows(FIG3_NAMES, {1: 700, 2: 900, 3: 600, 4: 800, 5: 650})
    return rows


def build_fig3_network() -> ExpandedNetwork:
    """Five stations on two lines (1-2-3 and 4-2-5), transfer at station 2."""
    return load_link_table(fig3_link_rows())


FIG8_ALIASES = {104: 4, 102: 2, 109: 9, 103: 3, 110: 10, 106: 6}
FIG8_NAMES = {s: f"S{s}" for s in range(1, 15)}
FIG8_NAMES.update({a: FIG8_NAMES[s] for a, s in FIG8_ALIASES.items()})


def fig8_link_rows() -> list[LinkRow]:
    n = FIG8_NAMES
    rows = _line_rows(1, [1, 2, 3, 4, 5, 6, 7], n, [2100, 1700, 1900, 2400, 1600, 2800])
    rows += _line_rows(2, [8, 9, 104, 10, 102], n, [1500, 2000, 1800, 2300, 1900], ring=True)
    rows += _line_rows(3, [11, 109, 103, 110, 12, 13, 106, 14], n, [2500, 1800, 2200, 1600, 2000, 2700, 1900])
    for alias, s in sorted(FIG8_ALIASES.items(), key=lambda x: x[1]):
        rows.append(LinkRow(s, alias, 2, TRANSFER_LINE, n[s], n[s], 500 + 50 * s))
    rows += _entry_rows({s: n[s] for s in range(1, 15)}, {s: 600 + 37 * s for s in range(1, 15)})
    return rows


def build_fig8_network() -> ExpandedNetwork:
    """Fourteen stations on three lines; line 2 is the ring 8-9-104-10-102-8.

    Station numbers 102/103/104/106/109/110 are the line-2/line-3 codes of
    transfer stations 2/3/4/6/9/10.
    """
    return load_link_table(fig8_link_rows())


NETWORKS = {"fig3": build_fig3_network, "fig8": build_fig8_network}


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class TruthRanges:
    vehicle: tuple[float, float] = (1.5, 6.0)
    entry_exit: tuple[float, float] = (0.5, 2.0)
    transfer: tuple[float, float] = (1.0, 4.0)
    wait: tuple[float, float] = (0.5, 5.0)


@dataclass
class GroundTruth:
    t_true: np.ndarray
    index: VariableIndex
    theta_true: float = 0.3

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        doc = {"format": "urtcg-truth", "version": 1, "theta_true": self.theta_true,
               "index": self.index.to_json(), "t": self.t_true.tolist()}
        if names is not None:
            doc["names"] = list(names)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "GroundTruth":
        return cls(np.asarray(doc["t"], dtype=float), VariableIndex.from_json(doc["index"]), doc["theta_true"])


def _peak_profile(n: int) -> np.ndarray:
    # morning peak around the sixth half-hour slot
    if n == 1:
        return np.ones(1)
    x = np.arange(n)
    centre = 5 * (n - 1) / 9
    return np.exp(-0.5 * ((x - centre) / max(n / 4, 1.0)) ** 2)


def sample_ground_truth(net: ExpandedNetwork, spec: IntervalSpec, seed: int,
                        ranges: TruthRanges = TruthRanges(), theta_true: float = 0.3) -> GroundTruth:
    """Draw link times uniformly by link kind and waits as base + peak swing per interval."""
    rng = np.random.default_rng(seed)
    index = build_variable_index(net, spec)
    t = np.empty(index.total_columns)
    by_kind = {LinkKind.VEHICLE: ranges.vehicle, LinkKind.ENTRY: ranges.entry_exit,
               LinkKind.EXIT: ranges.entry_exit, LinkKind.TRANSFER: ranges.transfer}
    for j, lid in enumerate(index.link_ids):
        lo, hi = by_kind[net.links[lid].kind]
        t[j] = rng.uniform(lo, hi)
    lo, hi = ranges.wait
    span = hi - lo
    profile = _peak_profile(index.n_intervals)
    base = rng.uniform(lo, lo + 0.6 * span, size=index.n_wait_pairs)
    swing = rng.uniform(0.0, 0.4 * span, size=index.n_wait_pairs)
    t[index.wait_slice()] = (base[:, None] + swing[:, None] * profile[None, :]).ravel()
    return GroundTruth(t, index, theta_true)


def true_path_costs(net: ExpandedNetwork, paths: Sequence[Path], truth: GroundTruth, h: int) -> np.ndarray:
    return np.array([truth.t_true[path_columns(p, net, truth.index, h)].sum() for p in paths])


# ---------------------------------------------------------------------------
# AFC sampling


@dataclass(frozen=True)
class DemandProfile:
    base_records_per_cell: int = 200
    interval_multipliers: tuple[float, ...] | None = None
    od_multipliers: Mapping[tuple[int, int], float] = field(default_factory=dict)
    seed: int = 0

    def interval_multiplier(self, h: int, n: int) -> float:
        if self.interval_multipliers is None:
            return float(0.6 + 0.8 * _peak_profile(n)[h])
        return float(self.interval_multipliers[h])

    def cell_count(self, od: tuple[int, int], h: int, n: int) -> int:
        return int(round(self.base_records_per_cell * self.interval_multiplier(h, n)
                         * self.od_multipliers.get(od, 1.0)))


@dataclass
class SampledAfc:
    records: list[AfcRecord]
    route_labels: np.ndarray  # path_id per record; never written to the AFC file
    skipped_ods: list[tuple[int, int]]

    def labels_json(self) -> dict:
        return {"format": "urtcg-route-labels", "version": 1, "path_id": self.route_labels.tolist()}


def logit_probabilities(costs: np.ndarray, theta: float) -> np.ndarray:
    z = -theta * np.asarray(costs, dtype=float)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def sample_afc(net: ExpandedNetwork, paths: Mapping[tuple[int, int], Sequence[Path]], truth: GroundTruth,
               demand: DemandProfile, spec: IntervalSpec) -> SampledAfc:
    """Logit route draw per record; travel time is the noiseless true cost of the drawn route.

    Each (od, interval) cell uses its own RNG stream derived from the demand
    seed and the cell position, so cells are independent of evaluation order.
    """
    records: list[AfcRecord] = []
    labels: list[int] = []
    skipped = []
    card = 0
    for cell_od, od in enumerate(sorted(paths)):
        plist = paths[od]
        if not plist:
            log.warning("OD %s has no path; skipped", od)
            skipped.append(od)
            continue
        ids = np.array([p.path_id for p in plist])
        for h in range(spec.count):
            n = demand.cell_count(od, h, spec.count)
            if n <= 0:
                continue
            rng = np.random.default_rng([demand.seed, cell_od, h])
            costs = true_path_costs(net, plist, truth, h)
            probs = logit_probabilities(costs, truth.theta_true)
            route = rng.choice(len(plist), size=n, p=probs)
            lo, hi = spec.bounds(h)
            entry = rng.uniform(lo, hi, size=n)
            for e, k in zip(entry.tolist(), route.tolist()):
                records.append(AfcRecord(f"{card:09d}", od[0], od[1], e, e + float(costs[k])))
                labels.append(int(ids[k]))
                card += 1
    return SampledAfc(records, np.asarray(labels, dtype=np.int64), skipped)


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class Perturbation:
    noise_fraction: float = 0.0
    od_deletion_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_fraction", "od_deletion_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class Perturbed:
    records: list[AfcRecord]
    deleted_ods: list[tuple[int, int]]
    keep: np.ndarray  # mask over the input records

    def manifest(self, p: Perturbation) -> dict:
        return {"seed": p.seed, "noise_fraction": p.noise_fraction,
                "od_deletion_fraction": p.od_deletion_fraction,
                "deleted_ods": [list(od) for od in self.deleted_ods]}


def perturb(records: Sequence[AfcRecord], p: Perturbation) -> Perturbed:
    """Multiplicative Gaussian noise on travel times, then whole-OD deletion.

    ``x% noise`` means travel * (1 + e), e ~ N(0, x/2), redrawn until the
    noisy travel time is positive.
    """
    rng = np.random.default_rng(p.seed)
    travel = np.array([r.exit_time_min - r.entry_time_min for r in records], dtype=float)
    if p.noise_fraction > 0 and len(records):
        sigma = p.noise_fraction / 2
        eps = rng.normal(0.0, sigma, size=travel.size)
        bad = 1.0 + eps <= 0
        while bad.any():
            eps[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
            bad = 1.0 + eps <= 0
        noisy = travel * (1.0 + eps)
        out = [AfcRecord(r.card_id, r.origin, r.destination, r.entry_time_min, r.entry_time_min + float(tt))
               for r, tt in zip(records, noisy)]
    else:
        out = list(records)

    ods = sorted({r.od for r in records})
    n_del = int(round(p.od_deletion_fraction * len(ods)))
    deleted: list[tuple[int, int]] = []
    if n_del:
        pick = np.sort(rng.choice(len(ods), size=n_del, replace=False))
        deleted = [ods[i] for i in pick]
    gone = set(deleted)
    keep = np.array([r.od not in gone for r in out], dtype=bool)
    return Perturbed([r for r, k in zip(out, keep) if k], deleted, keep)


def save_truth(truth: GroundTruth, net: ExpandedNetwork, path) -> None:
    FsPath(path).write_text(json.dumps(truth.to_json(truth.index.names(net)), sort_keys=True) + "\n")


def load_truth(path) -> GroundTruth:
    return GroundTruth.from_json(json.loads(FsPath(path).read_text()))
