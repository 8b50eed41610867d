"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial import cKDTree

from geoflow import data, flow, oracle
from geoflow.graph import build_graph, connected_components, from_arrays, hop_distance
from geoflow.trainer import T_IN_GRID, TrainConfig, sweep, train_dataset

from conftest import path_graph

# frozen after the pilot on seeds 100-104; see the decisions ledger
SHIFT_SEEDS = range(5)
SHIFT_MARGIN = 0.01
SATURATION_TOL = 0.01


@pytest.fixture
def verdict(capsys):
    def emit(number, name, passed, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        assert passed, detail
    return emit


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def test_01_mass_conservation(verdict):
    res, secs = _timed(oracle.check_mass_conservation, instances=1000)
    ok = res["passed"] and secs < 1.0
    verdict(1, "mass conservation", ok, f"max |sum q' - 1| = {res['max_mass_error']:.2e} (<= 1e-12), {secs:.2f}s (< 1s)")


def test_02_gibbs_fixed_point(verdict):
    res, secs = _timed(oracle.check_gibbs_fixed_point, tau=1e-3, t_in=200_000)
    ok = res["passed"] and secs < 5.0
    verdict(2, "Gibbs fixed point", ok,
            f"Linf to softmax = {res['linf_to_gibbs']:.2e} (<= 1e-6), derivative at Gibbs = "
            f"{res['derivative_at_gibbs']:.2e} (<= 1e-10), {secs:.2f}s (< 5s)")


def test_03_component_isolation(verdict):
    rng = np.random.default_rng(0)
    g = build_graph(8, [(0, 1), (1, 2), (2, 3), (0, 3), (4, 5), (5, 6), (6, 7)])
    loss = np.concatenate([rng.uniform(2.0, 3.0, 4), rng.uniform(0.0, 0.5, 4)])
    cfg = flow.FlowConfig(beta=0.1, tau=0.01, t_in=500)
    trace = flow.run_flow(None, loss, g, cfg)
    comps = [sorted(c) for c in connected_components(g)]
    drift = max(abs(q[c].sum() - 0.5) for q in trace.densities for c in comps)
    kl = flow.softmax(loss / cfg.beta)
    tv = 0.5 * float(np.abs(trace.final - kl).sum())
    ok = drift <= 1e-12 and tv >= 0.1
    verdict(3, "component isolation", ok, f"max component mass drift = {drift:.1e} (<= 1e-12), TV(TAR, KL-tilt) = {tv:.3f} (>= 0.1)")


def test_04_locality(verdict):
    # at tau = 0.01 the signal reaching hop k is ~tau**k / k!, below one ulp of q for k >= 7;
    # tau = 0.2 resolves every hop, and "never early" is checked at both step sizes
    t0 = time.perf_counter()
    g = path_graph(10)
    rng = np.random.default_rng(0)
    loss = rng.uniform(size=10)
    inexact, early = [], []
    for tau in (0.2, 0.01):
        cfg = flow.FlowConfig(beta=0.1, tau=tau, t_in=14)
        for node in range(10):
            bumped = loss.copy()
            bumped[node] += 0.5
            first = oracle.first_differing_step(g, loss, bumped, cfg)
            expected = np.maximum(hop_distance(g, [node]), 1).astype(int)
            if np.any((first >= 0) & (first < expected)):
                early.append((tau, node))
            if tau == 0.2 and not np.array_equal(first, expected):
                inexact.append(node)
    secs = time.perf_counter() - t0
    ok = not inexact and not early and secs < 1.0
    verdict(4, "locality", ok, f"first bitwise change at max(hop, 1) for all 10 perturbed nodes "
            f"(mismatches: {inexact}, early changes: {early}), {secs:.2f}s (< 1s)")


def test_05_monotone_free_energy(verdict):
    res = oracle.check_monotone_free_energy(instances=100, tau=1e-3)
    verdict(5, "monotone free energy", res["passed"], f"most negative step change = {res['most_negative_increment']:.2e} (>= -1e-10)")


def test_06_theorem1(verdict):
    res, secs = _timed(oracle.check_theorem1, instances=100, grid=10_000)
    ok = res["passed"] and secs < 30.0
    verdict(6, "two-node proximal argmax", ok, f"max argmax gap = {res['max_argmax_gap']:.1e} (<= 2e-4), {secs:.2f}s (< 30s)")


def test_07_theorem2_trend(verdict):
    res = oracle.check_theorem2()
    verdict(7, "convergence trend", res["passed"], "ratios = [" + ", ".join(f"{r:.4f}" for r in res["ratios"]) + "] (non-decreasing, final >= 0.99)")


def test_08_gw2_oracle(verdict):
    res = oracle.check_gw2(instances=100, time_steps=1000)
    verdict(8, "GW2 closed form vs path optimization", res["passed"], f"max rel err = {res['max_relative_error']:.2e} (< 1e-3)")


def test_09_gradients(verdict):
    res = oracle.check_gradients(instances=50)
    verdict(9, "gradient check", res["passed"], f"max rel err = {res['max_relative_error']:.2e} (< 1e-5)")


def test_10_tar_equals_erm_at_zero_steps(verdict):
    ds = data.gen_concept_shift(0, 100, 3, 2, 0.9)
    cfg = TrainConfig(epochs=50, seed=4)
    tar = train_dataset(ds, replace(cfg, method="tar", flow=replace(cfg.flow, t_in=0)))
    erm = train_dataset(ds, replace(cfg, method="erm"))
    verdict(10, "TAR with T_in = 0 equals ERM", tar.same_trajectory(erm), "bitwise-identical records and parameters")


def test_11_concept_shift_robustness(verdict):
    t0 = time.perf_counter()
    tar, erm = [], []
    for seed in SHIFT_SEEDS:
        ds = data.gen_concept_shift(seed, 300, 3, 2, 0.9)
        tar.append(train_dataset(ds, TrainConfig(method="tar", seed=seed)).worst_group_acc)
        erm.append(train_dataset(ds, TrainConfig(method="erm", seed=seed)).worst_group_acc)
    secs = time.perf_counter() - t0
    gap = float(np.mean(tar) - np.mean(erm))
    ok = gap > SHIFT_MARGIN and secs < 120
    verdict(11, "concept-shift worst-group accuracy", ok,
            f"TAR {np.mean(tar):.4f} vs ERM {np.mean(erm):.4f}, gap {gap:+.4f} (> {SHIFT_MARGIN}), {secs:.1f}s (< 120s)")


def _two_block_dataset(seed=0, n=200, k=5):
    ds = data.gen_covariate_shift(seed, n, 3, 2, 2.0)
    heads, tails = [], []
    for block in (np.arange(n), np.arange(n, 3 * n)):
        _, nbr = cKDTree(ds.features[block]).query(ds.features[block], k=k + 1)
        a, b = np.repeat(block, k), block[nbr[:, 1:].ravel()]
        heads.append(np.minimum(a, b))
        tails.append(np.maximum(a, b))
    pairs = np.unique(np.stack([np.concatenate(heads), np.concatenate(tails)], 1), axis=0)
    g = from_arrays(3 * n, pairs[:, 0], pairs[:, 1])
    return data.Dataset(g, ds.features, ds.labels, ds.masks, ds.groups, ds.meta)


def saturation_index(curve, tol):
    """Smallest s with the curve non-decreasing up to s and within ``tol`` of curve[s] after it."""
    for s in range(len(curve)):
        rising = all(b >= a - 1e-12 for a, b in zip(curve[:s], curve[1:s + 1]))
        flat = all(abs(v - curve[s]) <= tol for v in curve[s + 1:])
        if rising and flat:
            return s
    return None


def test_12_t_in_saturation(verdict):
    ds = _two_block_dataset()
    assert len(connected_components(ds.graph)) == 2
    cells = sweep(ds.graph, ds.features, ds.labels, ds.masks, TrainConfig(seed=0), T_IN_GRID, [0.01])
    curve = [c.report.best_val for c in cells]
    s = saturation_index(curve, SATURATION_TOL)
    ok = s is not None and s < len(curve) - 1
    where = "none" if s is None else f"T_in = {T_IN_GRID[s]}"
    verdict(12, "T_in saturation", ok, f"val acc over T_in {list(T_IN_GRID)} = {[round(v, 3) for v in curve]}, saturation at {where}")


def test_13_performance(verdict):
    rng = np.random.default_rng(0)
    n, m = 10_000, 50_000
    h, t = rng.integers(0, n, 3 * m), rng.integers(0, n, 3 * m)
    keep = h != t
    pairs = np.unique(np.sort(np.stack([h[keep], t[keep]], 1), 1), axis=0)
    pairs = pairs[rng.permutation(len(pairs))[:m]]
    g = from_arrays(n, pairs[:, 0], pairs[:, 1], rng.uniform(0.5, 2.0, m))
    loss = rng.uniform(0, 3, n)
    cfg = flow.FlowConfig(beta=0.01, tau=0.01, t_in=100)
    q = flow.uniform_density(n)
    step = min(_timed(flow.euler_step, q, loss, g, cfg)[1] for _ in range(5))
    _, run = _timed(flow.run_flow, None, loss, g, cfg)
    ok = g.num_edges == m and step < 0.010 and run < 1.0
    verdict(13, "performance budget", ok, f"N={n}, |E|={g.num_edges}: one step {1000 * step:.2f} ms (< 10 ms), 100 steps {run:.3f}s (< 1s)")


def test_14_first_order_convergence(verdict):
    res = oracle.check_first_order()
    verdict(14, "first-order convergence", res["passed"],
            f"error ratio for 10x smaller tau = {res['ratio']:.2f} (10 +- factor 2, i.e. in [5, 20])")
