"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (visible in ``pytest -v`` output) before asserting.
"""
import json
import math
import time

import numpy as np
import pytest

import oracles
from otc.cost_kernel import AffineImageDomain, Ball, Polytope, builtin_cost, compute_constants
from otc.curvature import classify, cross_curvature_batch
from otc.estimates import extract_section, ma_dominates_cma, smooth_test_potential, unit_ball_volume
from otc.geometry import (AffineMap, ChartImageDomain, ConvexBody, john_certificate, john_ellipsoid,
                          make_chart, midpoint_convexity, renormalize, sublevel_convexity)
from otc.harness import probes
from otc.harness.campaign import bundled_config, run_campaign, strip_timing
from otc.potential import SemidiscretePotential, SmoothPotential, ma_measure, solve_semidiscrete

pytestmark = pytest.mark.acceptance

B1 = Ball((0.0, 0.0), 1.0)
BH = Ball((0.0, 0.0), 0.5)


@pytest.fixture
def verdict(capsys):
    def say(num, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
        assert ok, detail
    return say


@pytest.fixture(scope="module")
def ball256():
    return probes.ball_target_problem(256)


def unit_rows(rng, k, n):
    v = rng.standard_normal((k, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# 1 -----------------------------------------------------------------------------------

def test_criterion_01_flat_costs(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2, 3):
        B = Ball(np.zeros(n), 1.0)
        for name in ("bilinear", "quadratic"):
            x, y = B.sample(1000, rng), B.sample(1000, rng)
            v, _ = cross_curvature_batch(builtin_cost(name, n), x, y, unit_rows(rng, 1000, n),
                                         unit_rows(rng, 1000, n))
            worst = max(worst, float(np.abs(v).max()))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-6 and dt <= 30, f"max |MTW| = {worst:.2e}, {dt:.1f} s")


# 2 -----------------------------------------------------------------------------------

def test_criterion_02_log_positive_on_null_pairs(verdict):
    r = classify(builtin_cost("log_distance"), BH, Ball((2.0, 0.0), 0.5), 1000)
    a = r.null_argmin
    ref = oracles.mtw("log_distance", a.x, a.y, a.xi, a.eta)
    rel = abs(a.value - ref) / abs(ref)
    ok = r.null_pairs >= 1000 and r.min_over_null_pairs > 0 and rel <= 1e-3
    verdict(2, ok, f"null min {r.min_over_null_pairs:.5f} over {r.null_pairs} pairs, "
                   f"symbolic {ref:.5f} (rel {rel:.1e})")


# 3 -----------------------------------------------------------------------------------

B3_CANDIDATES = [("bilinear", {}), ("quadratic", {}),
                 ("perturbed", {"epsilon": -0.1, "perturbation": "quartic"})]


def test_criterion_03_dasm(verdict):
    worst, marked = 0.0, []
    for name, kw in B3_CANDIDATES:
        c = builtin_cost(name, **kw)
        if not classify(c, B1, B1, 1000).b3_nonneg:
            continue
        marked.append(c.name + str(kw.get("epsilon", "")))
        for fn in (probes.dasm_check, probes.time_convex_dasm_check):
            r = fn(c, B1, B1, configs=10_000)
            assert r.stats["skipped_segments"] == 0
            worst = max(worst, r.worst_violation)
    bad = builtin_cost("perturbed", epsilon=0.3, perturbation="quartic")
    w = probes.dasm_check(bad, B1, B1, configs=10_000, expect_violation=True)
    ok = len(marked) == 3 and worst <= 1e-6 and w.violated and w.witness["reverified"]
    verdict(3, ok, f"B3 costs {marked}: worst {worst:.1e}; quartic(+0.3) witness "
                   f"{w.worst_violation:.3f} re-verified={w.witness['reverified']}")


# 4 -----------------------------------------------------------------------------------

def test_criterion_04_modified_potential_convexity(verdict):
    rng = np.random.default_rng(4)
    setups = [("bilinear", {}, B1, B1, True), ("quadratic", {}, B1, B1, True),
              ("perturbed", {"epsilon": -0.1, "perturbation": "quartic"}, B1, B1, True),
              ("log_distance", {}, BH, Ball((2.0, 0.0), 0.5), False)]
    mid_worst, sub_worst, tests = -math.inf, -math.inf, 0
    for name, kw, U, V, b3 in setups:
        c = builtin_cost(name, **kw)
        chart = make_chart(c, U, V.center)
        u = SemidiscretePotential(c, V.sample(30, rng), rng.uniform(0, 0.1, 30), domain=U)
        ut = chart.modify(u)
        Q = ChartImageDomain(chart)
        if b3:
            m = midpoint_convexity(ut, Q, 10_000, rng=rng)
            tests = min(tests, m["tests"]) if tests else m["tests"]
            mid_worst = max(mid_worst, m["max_defect"] / m["scale"])
        s = sublevel_convexity(ut, Q, 10_000, rng=rng)
        sub_worst = max(sub_worst, s["max_defect"] / s["scale"])
    ok = mid_worst <= 1e-8 and sub_worst <= 1e-8 and tests >= 9000
    verdict(4, ok, f"midpoint defect/scale {mid_worst:.1e} (>= {tests} tests per cost), "
                   f"sublevel defect/scale {sub_worst:.1e} incl. log")


# 5 -----------------------------------------------------------------------------------

def test_criterion_05_affine_invariance(verdict):
    c = builtin_cost("quadratic")
    U, V = B1, Ball((0.3, 0.1), 0.8)
    rng = np.random.default_rng(2024)
    chart = make_chart(c, U, (0.2, 0.1))
    z_ord, z_c, n = 0.0, 0.0, 0
    for k in range(5):
        atoms = V.sample(40, rng)
        ut = chart.modify(SemidiscretePotential(c, atoms, rng.uniform(0, 0.2, 40), domain=U))
        Z = Ball(chart.forward(np.array([[0.1, 0.1]]))[0], 0.35).as_polytope(64)
        # slopes of u~ are the finitely many -D_q c~(., y_i); the window covers their hull
        P = -ut.cost.dx(np.repeat(Z.vertices[:1], len(atoms), 0), atoms)
        ctr = P.mean(axis=0)
        W = Ball(ctr, 1.02 * float(np.linalg.norm(P - ctr, axis=1).max()))
        for j in range(20):
            M = rng.normal(size=(2, 2)) + 2 * np.eye(2)
            L = AffineMap(M, 0.2 * rng.normal(size=2))
            det = abs(L.det)
            us, Zs = renormalize(ut, L), renormalize(Z, L)
            seed = 1000 * k + j
            a = ma_measure(ut, Z, W, 20_000, rng=seed, probe="ordinary")
            b = ma_measure(us, Zs, AffineImageDomain(W, M.T / det), 20_000, rng=seed + 500,
                           probe="ordinary")
            z_ord = max(z_ord, abs(a.value - det * b.value) / math.hypot(a.std_error, det * b.std_error))
            a = ma_measure(ut, Z, V, 20_000, rng=seed + 200)
            b = ma_measure(us, Zs, AffineImageDomain(V, np.linalg.inv(M).T), 20_000, rng=seed + 700)
            z_c = max(z_c, abs(a.value - det * b.value) / math.hypot(a.std_error, det * b.std_error))
            n += 1
    verdict(5, n == 100 and z_ord <= 3 and z_c <= 3,
            f"{n} (L, potential) pairs: worst |diff|/sigma ordinary {z_ord:.2f}, c~ {z_c:.2f}")


# 6 -----------------------------------------------------------------------------------

def test_criterion_06_ma_dominates_cma(verdict):
    c = builtin_cost("log_distance")
    V = Ball((2.0, 0.0), 0.5)
    chart = make_chart(c, BH, (2.0, 0.0))
    ct = chart.modified_cost()
    Q = ChartImageDomain(chart)
    K = compute_constants(ct, Q, V, 2000)
    u = smooth_test_potential(ct, chart.forward(np.zeros((1, 2)))[0], [2.1, 0.1], eps=0.5)
    r = ma_dominates_cma(u, Q, K.gamma_minus, balls=100, mc_samples=4000, rng=6)
    zmax = 0.0
    for name in ("bilinear", "quadratic"):
        cq = builtin_cost(name)
        ch = make_chart(cq, B1, (0.3, 0.0))
        uq = smooth_test_potential(ch.modified_cost(), ch.forward(np.zeros((1, 2)))[0], [0.5, 0.2], eps=0.5)
        for row in ma_dominates_cma(uq, ChartImageDomain(ch), 1.0, balls=20, mc_samples=4000, rng=6)["rows"]:
            d = abs(row["c_measure"] - row["ordinary"])
            zmax = max(zmax, d / row["combined_std"] if row["combined_std"] > 0 else (0.0 if d == 0 else math.inf))
    ok = r["balls"] == 100 and r["passed"] and zmax <= 3
    verdict(6, ok, f"log: max ratio/gamma- {r['max_ratio_over_gamma']:.3f} on {r['balls']} balls; "
                   f"flat costs agree within {zmax:.2f} sigma")


# 7 -----------------------------------------------------------------------------------

def test_criterion_07_john(verdict):
    rng = np.random.default_rng(7)
    done, failures = 0, []
    for n in (2, 3):
        for k in range(100):
            pts = rng.standard_normal((n + 3 + k % 10, n)) @ (np.eye(n) + 0.8 * rng.standard_normal((n, n)))
            K = ConvexBody(vertices=pts)
            cert = john_certificate(K, john_ellipsoid(K).L, tol=1e-9)
            done += 1
            if not (cert["inner_ok"] and cert["outer_ok"]):
                failures.append((n, k))
    verdict(7, done == 200 and not failures, f"{done} polytopes (100 each in n=2,3), failures {failures}")


# 8 -----------------------------------------------------------------------------------

def test_criterion_08_alexandrov_scaling(verdict, ball256):
    n = 2
    target = 1.0 / (2 ** n * unit_ball_volume(n) ** 2)
    quad = SmoothPotential(lambda q: 0.5 * np.sum(q * q, -1), lambda q: q,
                           lambda q: np.broadcast_to(np.eye(2), q.shape + (2,)), 2)
    rel = 0.0
    for r in (0.1, 0.2, 0.4):
        s = extract_section(quad, None, [0.01, 0.0], r * r / 2, direction=[1, 0])
        rel = max(rel, abs(abs(s.inf_value) ** n / s.leb ** 2 / target - 1))
    u = ball256
    chart = make_chart(u.cost, u.meta["U"], np.zeros(2))
    ut = chart.modify(u)
    P = chart.forward(Ball((0, 0), 0.9).sample(4000, 8))
    q = P[np.argmin(ut(P))]
    base = float(ut(q[None])[0])
    ratios = []
    for h in (0.2, 0.1, 0.05):
        s = extract_section(u, chart, q, base + h)
        ratios.append(abs(s.inf_value) ** n / s.leb ** 2)
    spread = max(ratios) / min(ratios)
    verdict(8, rel <= 1e-6 and spread <= 10,
            f"closed form rel err {rel:.1e}; solver ratios {[round(x, 5) for x in ratios]} spread {spread:.3f}")


# 9 -----------------------------------------------------------------------------------

def test_criterion_09_solver(verdict):
    rng = np.random.default_rng(9)
    atoms = rng.random((50, 2))
    t0 = time.perf_counter()
    u = solve_semidiscrete(builtin_cost("quadratic"), None, atoms, np.full(50, 1 / 50), tol=1e-6,
                           source=Polytope.box([0, 0], [1, 1]))
    dt = time.perf_counter() - t0
    areas = oracles.power_cell_areas(atoms, -u.weights, (np.zeros(2), np.ones(2)))
    err = float(np.abs(areas * 50 - 1).max())
    verdict(9, err <= 5e-3 and dt <= 60, f"max rel cell-mass error {err:.1e} vs power diagram, {dt:.2f} s")


# 10 ----------------------------------------------------------------------------------

def test_criterion_10_discontinuity(verdict):
    levels = (16, 32, 64, 128)
    inner = Ball((0, 0), 0.8)
    spans = []
    for u in probes.refinement_ladder("two-cluster", levels):
        r = probes.contact_set_probe(u, pair_samples=20, ties=30, U_lambda=inner, V=u.meta["V"], seed=1)
        spans.append(r.stats["widest_subdifferential"]["span"] / u.meta["separation"])
    ladder = probes.refinement_ladder("ball", levels)
    cm = probes.continuity_modulus(ladder, inner, V=ladder[0].meta["V"])
    js = [lv["jump_over_spacing"] for lv in cm.stats["levels"]]
    ok = min(spans) >= 0.9 and cm.passed and cm.stats["monotone"] and max(js) <= 3
    verdict(10, ok, f"two-cluster span/separation {[round(s, 2) for s in spans]}; "
                    f"ball jump/spacing {[round(j, 2) for j in js]} monotone={cm.stats['monotone']}")


# 11 ----------------------------------------------------------------------------------

def test_criterion_11_boundary_mixing(verdict, ball256):
    u = ball256
    R = u.meta["U"].radius
    r = probes.boundary_mixing_check(u, u.meta["U"], u.meta["V"], probes=4000, source_delta=0.1,
                                     target_delta=1e-3, scale=R)
    verdict(11, r.passed and r.stats["selected"] > 0,
            f"{r.stats['selected']} interior probes, min target distance "
            f"{r.stats['min_target_distance']:.3f} (threshold {1e-3 * R})")


# 12 ----------------------------------------------------------------------------------

def test_criterion_12_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv("OTC_SEED", raising=False)
    cfg = bundled_config("quadratic-smoke")
    run_campaign(cfg, out_dir=tmp_path / "a")
    run_campaign(cfg, out_dir=tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        a = json.loads((tmp_path / "a" / name).read_text())
        b = json.loads((tmp_path / "b" / name).read_text())
        same &= json.dumps(strip_timing(a), sort_keys=True) == json.dumps(strip_timing(b), sort_keys=True)
    same &= (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    verdict(12, same and len(names) == 7, f"{len(names)} report files identical outside 'timing'")
