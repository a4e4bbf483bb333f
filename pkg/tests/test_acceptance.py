"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the
summary lines are printed at the end of the session. Criteria that the
model cannot meet are left failing on purpose, with the measured values in
the line.
"""
from __future__ import annotations

import csv
import json
import math
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

from urtcg import cli
from urtcg.afc import AFC_COLUMNS, IntervalSpec, aggregate, iter_afc
from urtcg.completion import ObservationMatrix, soft_impute
from urtcg.estimator import EstimatorConfig, Priors, backward_fixed_P, block_softmax, forward, loss
from urtcg.network import k_shortest_paths
from urtcg.pipeline import Scenario, derive_seed, run_scenario
from urtcg.synth import DemandProfile, logit_probabilities, sample_afc, sample_ground_truth, true_path_costs

from conftest import oracle_top_k, random_network

RESULTS: list[str] = []
GRID_NOISE = (0.0, 0.1, 0.2)
GRID_DELETION = (0.0, 0.2, 0.5)
GRID_SEEDS = (0, 1, 2)


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# ---------------------------------------------------------------- 1


def test_1_noiseless_recovery():
    parts, ok = [], True
    for net, thr in (("fig3", 0.99), ("fig8", 0.98)):
        t0 = time.perf_counter()
        res = run_scenario(Scenario(network=net), with_identifiable=True)
        secs = time.perf_counter() - t0
        m = res.metrics
        good = m["r2_t"] >= thr and m["r2_path"] >= thr and secs <= 60
        ok &= good
        parts.append(f"{net} R2(t)={_fmt(m['r2_t'])} R2(path)={_fmt(m['r2_path'])} need>={thr} "
                     f"time={secs:.1f}s [identifiable-part R2(t)={_fmt(m['r2_t_identifiable'])}, "
                     f"null dim {m['null_space_dim']}]")
    report(1, "noiseless recovery", ok, "; ".join(parts))


# ---------------------------------------------------------------- 2


def test_2_gradient_oracle():
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(25):
        n_od, n_cols = int(rng.integers(1, 8)), int(rng.integers(2, 12))
        sizes = rng.integers(1, 4, n_od)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        A = sp.csr_matrix((rng.random((ptr[-1], n_cols)) < 0.4).astype(float))
        t = rng.uniform(0.5, 5, n_cols)
        c = rng.uniform(1, 20, n_od)
        p = forward(t, 0.3, A, ptr).p
        pri = Priors(rng.uniform(0.5, 5, n_cols), n_cols // 2, 0.1, 0.05)

        def f(x):
            return loss(np.add.reduceat(p * (A @ x), ptr[:-1]), c, x, pri)

        g = backward_fixed_P(t, p, A, ptr, c, pri)
        eps = 1e-5
        fd = np.array([(f(t + eps * e) - f(t - eps * e)) / (2 * eps) for e in np.eye(n_cols)])
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    report(2, "gradient oracle", worst <= 1e-6, f"max relative error over 25 instances {worst:.2e} (need <= 1e-6)")


# ---------------------------------------------------------------- 3


def test_3_route_choice(fig8):
    rng = np.random.default_rng(3)
    sums_err, shift_exact = 0.0, True
    for _ in range(200):
        sizes = rng.integers(1, 6, int(rng.integers(1, 10)))
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        costs = rng.uniform(0, 300, ptr[-1])
        p = block_softmax(costs, float(rng.uniform(0.01, 3)), ptr)
        sums_err = max(sums_err, float(np.max(np.abs(np.add.reduceat(p, ptr[:-1]) - 1.0))))
        ic = rng.integers(0, 200, ptr[-1]).astype(float)
        shift = float(rng.integers(-500, 500))
        shift_exact &= np.array_equal(block_softmax(ic, 0.25, ptr), block_softmax(ic + shift, 0.25, ptr))

    spec = IntervalSpec(count=1)
    from urtcg.network import enumerate_paths
    paths = enumerate_paths(fig8)
    od = next(od for od, ps in paths.items() if len(ps) == 3)
    truth = sample_ground_truth(fig8, spec, 17)
    s = sample_afc(fig8, {od: paths[od]}, truth, DemandProfile(10_000, interval_multipliers=(1.0,), seed=5), spec)
    probs = logit_probabilities(true_path_costs(fig8, paths[od], truth, 0), truth.theta_true)
    obs = np.array([np.sum(s.route_labels == p.path_id) for p in paths[od]])
    _, pval = stats.chisquare(obs, probs * obs.sum())
    ok = sums_err <= 1e-12 and shift_exact and pval > 0.01 and obs.sum() == 10_000
    report(3, "route-choice properties", ok,
           f"max |row sum - 1| {sums_err:.1e}; shift-invariance exact={shift_exact}; "
           f"chi-square N={obs.sum()} p={pval:.3f} (need > 0.01)")


# ---------------------------------------------------------------- 4


def test_4_path_oracle():
    rng = np.random.default_rng(4)
    graphs = mismatches = 0
    biggest = 0
    while graphs < 100:
        net = random_network(rng, int(rng.integers(2, 4)), 1)
        biggest = max(biggest, len(net.nodes))
        w = rng.uniform(0.0, 3.0, len(net.links))
        for od in net.od_pairs():
            got = [p.nodes for p in k_shortest_paths(net, od, 3, w, 1.5)]
            mismatches += got != [p[1] for p in oracle_top_k(net, od, w, 3, 1.5)]
        graphs += 1
    report(4, "path oracle", mismatches == 0 and biggest <= 12,
           f"{graphs} random graphs (largest {biggest} expanded nodes), {mismatches} OD mismatches")


# ---------------------------------------------------------------- 5 and 6: sensitivity grid on the 14-station network


@pytest.fixture(scope="module")
def grid():
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in GRID_SEEDS:
            for n in GRID_NOISE:
                for d in GRID_DELETION:
                    m = run_scenario(Scenario(network="fig8", seed=seed, noise=n, deletion=d)).metrics
                    out.setdefault((n, d), []).append(m)
    return {k: {key: float(np.mean([m[key] for m in v])) for key in ("r2_link", "r2_wait", "r2_path")}
            for k, v in out.items()}


def test_5_noise_sensitivity(grid):
    a, b = grid[(0.1, 0.0)], grid[(0.2, 0.0)]
    ok = (a["r2_link"] >= 0.95 and b["r2_link"] >= 0.90 and a["r2_wait"] <= a["r2_link"]
          and b["r2_wait"] <= b["r2_link"])
    report(5, "noise sensitivity", ok,
           f"10% noise R2(link)={_fmt(a['r2_link'])} (need>=0.95) R2(wait)={_fmt(a['r2_wait'])}; "
           f"20% noise R2(link)={_fmt(b['r2_link'])} (need>=0.90) R2(wait)={_fmt(b['r2_wait'])}; "
           f"mean of seeds {list(GRID_SEEDS)}")


def test_6_deletion_sensitivity(grid):
    mid = grid[(0.2, 0.2)]
    worst_key = min(grid, key=lambda k: grid[k]["r2_wait"])
    others = [v["r2_wait"] for k, v in grid.items() if k != (0.2, 0.5)]
    strictly_lowest = grid[(0.2, 0.5)]["r2_wait"] < min(others)
    ok = mid["r2_link"] >= 0.80 and strictly_lowest
    report(6, "deletion sensitivity", ok,
           f"20%+20% R2(link)={_fmt(mid['r2_link'])} (need>=0.80); 20%+50% R2(wait)="
           f"{_fmt(grid[(0.2, 0.5)]['r2_wait'])}, next lowest {_fmt(min(others))}, "
           f"grid minimum at noise={worst_key[0]} deletion={worst_key[1]}")


# ---------------------------------------------------------------- 7


def test_7_soft_impute():
    X = np.array([[2.0, 4.0], [1.0, np.nan]])
    r1 = soft_impute(ObservationMatrix(X, ~np.isnan(X), [0, 1], [0, 1]), lambdas=np.geomspace(5.0, 1e-6, 40),
                     max_iter=2000, tol=1e-10)
    e1 = abs(r1.Z[1, 1] - 2.0)
    rng = np.random.default_rng(0)
    L = rng.normal(size=(40, 2)) @ rng.normal(size=(2, 10))
    mask = rng.random(L.shape) >= 0.1
    r2 = soft_impute(ObservationMatrix(np.where(mask, L, np.nan), mask, list(range(40)), list(range(10))),
                     n_lambdas=20, lambda_ratio=1e4, max_iter=500)
    e2 = float(np.linalg.norm((r2.Z - L)[~mask]) / np.linalg.norm(L[~mask]))
    exact = bool(np.array_equal(r2.Z[mask], L[mask]) and r1.Z[0, 0] == 2.0 and r1.Z[1, 0] == 1.0)
    report(7, "SoftImpute", e1 <= 1e-2 and e2 <= 0.05 and exact,
           f"rank-1 imputed {r1.Z[1, 1]:.4f} (|err| {e1:.1e} <= 1e-2); rank-2 40x10 relative error {e2:.4f} "
           f"(<= 0.05); observed bit-exact={exact}")


# ---------------------------------------------------------------- 8


_INGEST = """
import resource, sys
from urtcg.afc import aggregate, iter_afc
t = aggregate(iter_afc(sys.argv[1]))
print(len(t), t.total_count(), resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
"""


def _write_records(path: Path, n: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AFC_COLUMNS)
        done = 0
        while done < n:
            m = min(100_000, n - done)
            o = rng.integers(1, 15, m)
            d = (o + rng.integers(0, 13, m)) % 14 + 1
            e = rng.uniform(400.0, 740.0, m)
            tt = rng.uniform(2.0, 90.0, m)
            w.writerows(zip(range(done, done + m), o.tolist(), d.tolist(), e.tolist(), (e + tt).tolist()))
            done += m


def _two_pass_oracle(path: Path, spec: IntervalSpec) -> dict:
    """Pass one: naive means. Pass two: mean of residuals as a correction."""
    def cells():
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                t_in = float(row[3])
                h = math.floor((t_in - spec.start_min) / spec.width_min)
                if 0 <= h < spec.count:
                    yield (int(row[1]), int(row[2]), h), float(row[4]) - t_in

    sums, counts = {}, {}
    for k, v in cells():
        sums[k] = sums.get(k, 0.0) + v
        counts[k] = counts.get(k, 0) + 1
    mean0 = {k: sums[k] / counts[k] for k in sums}
    corr = dict.fromkeys(sums, 0.0)
    for k, v in cells():
        corr[k] += v - mean0[k]
    return {k: mean0[k] + corr[k] / counts[k] for k in sums}


def _peak_kb(path: Path) -> tuple[int, int, int]:
    out = subprocess.run([sys.executable, "-c", _INGEST, str(path)], check=True, capture_output=True, text=True)
    cells, total, rss = map(int, out.stdout.split())
    return cells, total, rss


def test_8_scale(tmp_path):
    big, small = tmp_path / "big.csv", tmp_path / "small.csv"
    _write_records(big, 1_000_000, 8)
    _write_records(small, 100_000, 9)
    t0 = time.perf_counter()
    table = aggregate(iter_afc(big))
    secs = time.perf_counter() - t0
    oracle = _two_pass_oracle(big, IntervalSpec())
    err = max(abs(table.rows[k].mean_travel_min - v) for k, v in oracle.items())
    same_keys = set(table.rows) == set(oracle)
    _, _, rss_small = _peak_kb(small)
    _, _, rss_big = _peak_kb(big)
    grow_mb = (rss_big - rss_small) / 1024
    ok = secs <= 300 and err <= 1e-9 and same_keys and grow_mb <= 32
    report(8, "scale", ok,
           f"1,000,000 records ingested+aggregated in {secs:.1f}s (<= 300s); max |mean - two-pass| {err:.1e}; "
           f"peak RSS 1M vs 100k records differs by {grow_mb:.1f} MB")


# ---------------------------------------------------------------- 9


def _run_twice(tmp_path: Path, name: str, argv: list[str]) -> bool:
    digests = []
    for i in range(2):
        out = tmp_path / f"{name}{i}"
        assert cli.main(argv + ["--out", str(out)]) == 0
        digests.append((json.loads((out / "manifest.json").read_text())["outputs"],
                        {p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"}))
    return digests[0] == digests[1]


def test_9_determinism(tmp_path):
    s = tmp_path / "s"
    assert cli.main(["synth", "--network", "fig3", "--noise", "0.2", "--delete-od", "0.2", "--seed", "9",
                     "--out", str(s)]) == 0
    checks = {
        "synth": _run_twice(tmp_path, "synth", ["synth", "--network", "fig8", "--noise", "0.2", "--delete-od", "0.2",
                                                "--seed", "9", "--records-per-cell", "20"]),
        "estimate": _run_twice(tmp_path, "est", ["estimate", "--network", str(s / "network.csv"), "--afc",
                                                 str(s / "afc.csv"), "--truth", str(s / "truth.json"),
                                                 "--impute", "od-interval"]),
        "sensitivity": _run_twice(tmp_path, "sens", ["sensitivity", "--network", "fig3", "--noise", "0,0.2",
                                                     "--delete-od", "0,0.5", "--records-per-cell", "20",
                                                     "--epochs", "5"]),
    }
    est0 = tmp_path / "est0"
    checks["evaluate"] = _run_twice(tmp_path, "ev", ["evaluate", "--result", str(est0 / "estimate.json"),
                                                     "--truth", str(s / "truth.json")])
    report(9, "determinism", all(checks.values()),
           ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items()))
