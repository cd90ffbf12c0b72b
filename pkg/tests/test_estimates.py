import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otc import Ball, builtin_cost, compute_constants, make_chart
from otc.estimates import (SectionError, alexandrov_upper, build_c_cone, c_cone_ma_lower,
                           cone_inclusion_check, density_identity, extract_section, ma_dominates_cma,
                           max_chord, renormalize_section, section_estimate, slope_estimate_check,
                           smooth_test_potential, smooth_measure, unit_ball_volume)
from otc.geometry import ChartImageDomain
from otc.potential import SemidiscretePotential, SmoothPotential


def quadratic_model(a=0.5, b=0.0, n=2, A=None):
    """a |A q|^2 + b as a smooth potential."""
    A = np.eye(n) if A is None else np.asarray(A, float)
    G = A.T @ A
    return SmoothPotential(lambda q: a * np.einsum("...i,ij,...j->...", q, G, q) + b,
                           lambda q: 2 * a * np.asarray(q, float) @ G,
                           lambda q: np.broadcast_to(2 * a * G, np.shape(q)[:-1] + (n, n)), n)


@pytest.fixture(scope="module")
def unit_cone():
    # section of |q|^2 - 1 at level 0 is B_1 with vertex 0 and height -1
    sec = extract_section(quadratic_model(1.0, -1.0), None, [0.0, 0.0], 0.0, direction=[1, 0])
    return sec, build_c_cone(sec, V=None)


# sections -----------------------------------------------------------------------

def test_unit_ball_section():
    s = extract_section(quadratic_model(), None, [0.0, 0.0], 0.5, direction=[1, 0])
    assert s.leb == pytest.approx(math.pi, rel=1e-6)
    assert s.ell_plus == pytest.approx(2.0, rel=1e-6)
    assert s.plane_plus == pytest.approx(1.0, rel=1e-6) and s.plane_minus == pytest.approx(-1.0, rel=1e-6)
    assert s.inf_value == pytest.approx(-0.5, abs=1e-9)
    assert np.allclose(s.vertex, 0, atol=1e-6)


def test_cross_polytope_section():
    u = SemidiscretePotential(builtin_cost("bilinear"), [[1, 0], [-1, 0], [0, 1], [0, -1]], np.zeros(4))
    s = extract_section(u, None, [0.0, 0.0], 1.0, direction=[1, 0])
    assert s.Z.volume() == pytest.approx(2.0 * 2.0, rel=1e-9)
    assert s.ell_plus == pytest.approx(2.0, rel=1e-9)
    assert (s.plane_plus, s.plane_minus) == pytest.approx((1.0, -1.0))
    # the chord along the normal never exceeds the width
    width = s.plane_plus - s.plane_minus
    assert s.ell_plus <= max_chord(s.Z, s.normal) * (1 + 1e-9)
    assert max_chord(s.Z, s.normal) <= width * (1 + 1e-9)


def test_section_reaching_chart_boundary():
    u = SemidiscretePotential(builtin_cost("bilinear"), [[1, 0], [-1, 0]], np.zeros(2),
                              domain=Ball((0, 0), 0.5))
    with pytest.raises(SectionError):
        extract_section(u, None, [0.0, 0.0], 1.0)


def test_level_below_anchor_rejected():
    with pytest.raises(SectionError):
        extract_section(quadratic_model(), None, [0.5, 0.0], 0.0)


@pytest.mark.parametrize("r", [0.1, 0.2, 0.4])
def test_quadratic_model_ratio_closed_form(r):
    s = extract_section(quadratic_model(0.5, -r * r / 2), None, [0.0, 0.0], 0.0)
    est = section_estimate(s, 1.0, rng=0)
    n = 2
    assert est["ratio"] == pytest.approx(1 / (2 ** n * unit_ball_volume(n) ** 2), rel=1e-6)


def test_vardist_ratio_vanishes_linearly():
    s = extract_section(quadratic_model(0.5, -0.5), None, [0.0, 0.0], 0.0, direction=[1, 0])
    for d in (1e-2, 1e-3, 1e-4):
        q = np.array([[1 - d, 0.0]])
        lhs = abs(float(s.f(q)[0])) ** 2 / s.leb ** 2
        rhs = float(s.plane_distance(q)[0]) / s.ell_plus
        # closed form for |q|^2/2 - 1/2: d (2 - d)^2 / (2 pi^2)
        assert lhs / rhs == pytest.approx(d * (2 - d) ** 2 / (2 * math.pi ** 2), rel=1e-6)


# cones --------------------------------------------------------------------------

def test_classical_cone(unit_cone):
    sec, cone = unit_cone
    q = Ball((0, 0), 1).sample(200, 0)
    # sup over |y| <= 1 of <q, y> - 1 is |q| - 1
    assert np.abs(cone(q) - (np.linalg.norm(q, axis=1) - 1)).max() <= 1e-4
    assert cone(cone.vertex[None])[0] == pytest.approx(cone.height, abs=1e-12)
    # finite candidate set: the boundary residual is a sampling tolerance
    assert np.abs(cone(sec.boundary)).max() <= 2e-5 * abs(cone.height)
    assert cone.meta["boundary_max_abs"] == pytest.approx(np.abs(cone(sec.boundary)).max())
    assert cone.subgradient_volume == pytest.approx(math.pi, rel=1e-3)


def test_classical_cone_lower_constant(unit_cone):
    _, cone = unit_cone
    low = c_cone_ma_lower(cone)
    assert not low["skipped"]
    # |H|^n / (dist/ell * |dh| * Leb) = 1 / (1/2 * pi * pi)
    assert low["empirical_C"] == pytest.approx(2 / math.pi ** 2, rel=2e-3)


def test_cone_skipped_for_large_sections(unit_cone):
    _, cone = unit_cone
    low = c_cone_ma_lower(cone, eps_c=1.0, C_guard=10.0)
    assert low["skipped"] and "eps_c" in low["reason"]


def test_off_centre_vertex_cone():
    sec = extract_section(quadratic_model(1.0, -1.0), None, [0.0, 0.0], 0.0, direction=[1, 0])
    Cs = []
    for p in (256, 1024, 4096):
        cone = build_c_cone(sec, vertex=[0.9, 0.0], height=-1.0, pinned=p)
        Cs.append(c_cone_ma_lower(cone)["empirical_C"])
    # slopes y with <0.9 e1, y> - 1 <= |y| - 1 on the boundary: an ellipse of area pi / 0.19^1.5
    assert cone.subgradient_volume == pytest.approx(math.pi / 0.19 ** 1.5, rel=1e-3)
    assert all(b <= a * (1 + 1e-9) for a, b in zip(Cs, Cs[1:]))


def test_cone_vertex_equality_any_cost(log_setup):
    c, U, V = log_setup
    chart = make_chart(c, U, (2.0, 0.0))
    q0 = chart.forward(np.zeros((1, 2)))[0]
    # atoms around ytilde, weights chosen so every mountain touches at x = 0
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    Y = np.array([2.0, 0.0]) + 0.3 * np.c_[np.cos(th), np.sin(th)]
    u = SemidiscretePotential(c, Y, -c(np.zeros((12, 2)), Y), domain=U)
    ut = chart.modify(u)
    lo = float(ut(q0[None])[0])
    hb = float(ut(chart.forward(U.boundary_sample(256))).min())
    sec = extract_section(u, chart, q0, lo + 0.4 * (hb - lo), resolution=256)
    cone = build_c_cone(sec, V=None, pinned=64)
    assert cone.meta["vertex_value_error"] <= 1e-8
    # 64 pinned targets only; the residual is a sampling gap between pins
    assert cone.meta["boundary_max_abs"] <= 1e-4 * abs(cone.height)
    assert cone.meta["min_over_Z_minus_height"] >= 0
    inc = cone_inclusion_check(cone, ut, ChartImageDomain(chart), grid=2000)
    assert inc["targets"] >= 1


def test_slope_estimate(log_setup):
    c, U, V = log_setup
    chart = make_chart(c, U, (2.0, 0.0))
    ct = chart.modified_cost()
    Q = ChartImageDomain(chart)
    K = compute_constants(ct, Q, V, 1000)
    r = slope_estimate_check(ct, Q, V, K.epsilon_c)
    assert r["passed"] and r["max_ratio"] < 1


# Alexandrov ------------------------------------------------------------------------

def test_alexandrov_cone_exact_cells(unit_cone):
    sec, cone = unit_cone
    cs = cone.section
    r = alexandrov_upper(cs.__class__(**{**cs.__dict__, "u_tilde": cone}), 0.5, rng=0)
    # all of the slope disc sits at the vertex
    assert r["measure"] == pytest.approx(math.pi, rel=2e-3)
    assert r["slope_bound_ok"]


def test_alexandrov_quadratic():
    s = extract_section(quadratic_model(0.5, -0.5), None, [0.0, 0.0], 0.0)
    r = alexandrov_upper(s, 0.5, mc_samples=20000, rng=0)
    assert abs(r["measure"] - math.pi / 4) <= 3 * r["std_error"]


def test_alexandrov_requires_renormalized():
    s = extract_section(quadratic_model(0.5, -0.5, A=[[3, 1], [0, 1]]), None, [0.0, 0.0], 0.0)
    with pytest.raises(SectionError):
        alexandrov_upper(s)
    with pytest.raises(ValueError):
        alexandrov_upper(s, t=1.5, require_renormalized=False)


def test_renormalization_keeps_verdict():
    s = extract_section(quadratic_model(0.5, -0.5, A=[[3, 1], [0, 1]]), None, [0.0, 0.0], 0.0)
    before = alexandrov_upper(s, 0.5, rng=0, require_renormalized=False)
    rs, J = renormalize_section(s)
    after = alexandrov_upper(rs, 0.5, rng=0)
    assert after["renormalized"]
    assert before["slope_bound_ok"] == after["slope_bound_ok"]
    # same empirical constant up to MC noise
    assert after["empirical_C"] == pytest.approx(before["empirical_C"], rel=0.05)


# MA versus c-MA ---------------------------------------------------------------------

def test_bilinear_measures_coincide():
    u = smooth_test_potential(builtin_cost("bilinear"), [0, 0], [0.3, 0], eps=0.5)
    r = ma_dominates_cma(u, Ball((0, 0), 1), 1.0, balls=5, rng=0)
    for row in r["rows"]:
        assert abs(row["ratio"] - 1) * row["ordinary"] <= 3 * row["combined_std"] + 1e-12


def test_log_ma_dominates_small(log_setup):
    c, U, V = log_setup
    chart = make_chart(c, U, (2.0, 0.0))
    ct = chart.modified_cost()
    Q = ChartImageDomain(chart)
    K = compute_constants(ct, Q, V, 2000)
    q0 = chart.forward(np.zeros((1, 2)))[0]
    u = smooth_test_potential(ct, q0, [2.1, 0.1], eps=0.5)
    r = ma_dominates_cma(u, Q, K.gamma_minus, balls=8, mc_samples=4000, rng=0)
    assert r["passed"]


def test_density_identity_matches_pushforward(log_setup):
    c, U, V = log_setup
    chart = make_chart(c, U, (2.0, 0.0))
    ct = chart.modified_cost()
    q0 = chart.forward(np.zeros((1, 2)))[0]
    u = smooth_test_potential(ct, q0, [2.1, 0.1], eps=0.5)
    B = Ball(q0, 0.05)
    d = density_identity(u, B, points=4000)
    m = smooth_measure(u, B, probe="c", mc_samples=20000, rng=0)
    assert d["psd"]
    assert abs(d["integral"] - m.value) <= 3 * m.std_error + 0.02 * d["integral"]


@given(st.floats(0.05, 0.5), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
@settings(max_examples=10)
def test_quadratic_model_scale_invariance(r, cx, cy):
    # the ratio depends on the dimension only, wherever the bowl sits
    c0 = np.array([cx, cy])
    u = SmoothPotential(lambda q: 0.5 * np.sum((q - c0) ** 2, axis=-1) - r * r / 2,
                        lambda q: np.asarray(q) - c0,
                        lambda q: np.broadcast_to(np.eye(2), np.shape(q)[:-1] + (2, 2)), 2)
    s = extract_section(u, None, c0, 0.0, resolution=2048)
    assert section_estimate(s, 1.0, q_samples=10)["ratio"] == pytest.approx(1 / (4 * math.pi ** 2), rel=1e-5)
