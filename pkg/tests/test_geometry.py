import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otc import Ball, Polytope, builtin_cost, make_chart
from otc.cost_kernel import AffineImageDomain, DomainUnion
from otc.geometry import (AffineMap, ChartImageDomain, ConvexBody, DegenerateBodyError,
                          EmptySliceError, SegmentDomainError, SliceRatioMonitor, c_segment,
                          check_c_convexity, dual_coords, john_certificate, john_ellipsoid,
                          midpoint_convexity, renormalize, slice_projection_ratio,
                          sublevel_convexity)
from otc.potential import SemidiscretePotential, SmoothPotential, ma_measure

import oracles


# charts -----------------------------------------------------------------------

def test_bilinear_chart_is_identity(rng):
    ch = make_chart(builtin_cost("bilinear"), Ball((0, 0), 1), (0.3, -0.4))
    x = rng.uniform(-.5, .5, (20, 2))
    assert np.allclose(ch.forward(x), x)
    assert ch.affine


def test_quadratic_chart_at_origin(rng):
    ch = make_chart(builtin_cost("quadratic"), Ball((0, 0), 1), (0, 0))
    x = rng.uniform(-.5, .5, (20, 2))
    assert np.allclose(ch.forward(x), x)


def test_log_chart_value_and_sign():
    # the symbolic forward map is -D_y c(x, ytilde) = -(x - y)/|x - y|^2, which
    # is (-1/2, 0) at x = (2, 0), ytilde = 0
    ref = oracles.dual_forward("log_distance", [2, 0], [0, 0])
    assert np.allclose(ref, [-0.5, 0.0])
    ch = make_chart(builtin_cost("log_distance"), Ball((2, 0), .5), (0, 0))
    assert np.allclose(ch.forward(np.array([[2.0, 0.0]]))[0], ref, atol=1e-15)


@pytest.mark.parametrize("n", [2, 3])
def test_chart_roundtrip(n):
    c = builtin_cost("log_distance", dim=n)
    U = Ball(np.zeros(n), .5)
    yt = np.r_[2.0, np.zeros(n - 1)]
    ch = make_chart(c, U, yt)
    x = U.sample(1000, 0)
    back = ch.inverse(ch.forward(x))
    assert np.abs(back - x).max() <= 1e-8 * U.diameter


def test_chart_jacobian_matches_fd(log_setup):
    c, U, _ = log_setup
    ch = make_chart(c, U, (2, 0))
    x = np.array([0.1, 0.2])
    h = 1e-6
    fd = np.stack([(ch.forward(x + h * e) - ch.forward(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.allclose(ch.jacobian(x), fd, atol=1e-7)


def test_chart_image_domain(log_setup):
    c, U, _ = log_setup
    ch = make_chart(c, U, (2, 0))
    D = ChartImageDomain(ch)
    q = D.sample(200, 1)
    assert np.all(U.contains(ch.inverse(q)))
    assert D.volume() == pytest.approx(ch.image_hull().volume(), rel=1e-2)


# segments -------------------------------------------------------------------

def test_bilinear_segment_is_straight():
    t = np.linspace(0, 1, 11)
    z = c_segment(builtin_cost("bilinear"), (0, 0), (0, 1), (2, -1), t)
    assert np.allclose(z, (1 - t)[:, None] * [0, 1] + t[:, None] * [2, -1])


def test_segment_endpoints_exact():
    z = c_segment(builtin_cost("log_distance"), (0, 0), (2.0, 0.1), (0.3, 2.0), [0.0, 1.0])
    assert np.array_equal(z[0], [2.0, 0.1]) and np.array_equal(z[1], [0.3, 2.0])


def test_log_segment_midpoint_is_dual_midpoint():
    c = builtin_cost("log_distance")
    z = c_segment(c, (0, 0), (2, 0), (0, 2), [0.5])
    mid = 0.5 * (oracles.dual_forward("log_distance", [2, 0], [0, 0])
                 + oracles.dual_forward("log_distance", [0, 2], [0, 0]))
    assert np.abs(oracles.dual_forward("log_distance", z[0], [0, 0]) - mid).max() <= 1e-8
    # for this cost the chart is an inversion, so the midpoint is (2, 2)
    assert np.allclose(z[0], [2, 2])


def test_segment_leaving_domain():
    with pytest.raises(SegmentDomainError) as err:
        c_segment(builtin_cost("log_distance"), (0, 0), (2, 0), (0, 2), np.linspace(0, 1, 9),
                  domain=Ball((2, 0), 0.5))
    assert "point" in err.value.witness


# c-convexity of domains --------------------------------------------------------

def test_bilinear_ball_is_strongly_convex():
    r = check_c_convexity(builtin_cost("bilinear"), Ball((0, 0), 1.5), Ball((0, 0), 1), strong=True)
    assert r.convex and r.strong
    assert r.max_radius == pytest.approx(1.5, rel=1e-2)


def test_bilinear_l_shape_is_not_convex():
    L = DomainUnion([Polytope.box([0, 0], [2, 1]), Polytope.box([0, 0], [1, 2])])
    r = check_c_convexity(builtin_cost("bilinear"), L, Ball((0, 0), 1))
    assert not r.convex
    assert r.violations and "kind" in r.violations[0]


def test_log_convexity_stable_under_refinement(log_setup):
    c, U, V = log_setup
    for side in ("x", "y"):
        coarse = check_c_convexity(c, U, V, side=side)
        fine = check_c_convexity(c, U, V, side=side, resolution=10240)
        assert coarse.convex == fine.convex


# John ellipsoid -----------------------------------------------------------------

def test_john_of_disc_is_scaled_rotation():
    th = np.linspace(0, 2 * np.pi, 2000, endpoint=False)
    K = ConvexBody(vertices=np.c_[np.cos(th), np.sin(th)])
    J = john_ellipsoid(K)
    M = J.L.matrix
    # L is identity up to rotation and the midpoint scale between 1 and n
    k = math.sqrt(abs(np.linalg.det(M)))
    assert 1 <= k <= 2
    assert np.allclose(M.T @ M / k ** 2, np.eye(2), atol=1e-3)
    assert np.allclose(J.L.shift, 0, atol=1e-6)


def test_john_of_box():
    K = ConvexBody(vertices=np.array([[-2, -1], [2, -1], [2, 1], [-2, 1.0]]))
    J = john_ellipsoid(K)
    Linv = J.L.inverse().matrix
    # inverse is diag(2, 1) up to an orthogonal factor and the scale alpha
    G = Linv.T @ Linv / J.alpha ** 2
    assert np.allclose(np.sort(np.linalg.eigvalsh(G)), [1, 4], atol=1e-6)
    cert = john_certificate(K, J.L, tol=1e-9)
    assert cert["inner_ok"] and cert["outer_ok"]
    img = J.L(K.vertices)
    assert np.linalg.norm(img, axis=1).max() <= 2 + 1e-9


def test_john_random_simplex_3d():
    rng = np.random.default_rng(4)
    K = ConvexBody(vertices=rng.standard_normal((4, 3)))
    J = john_ellipsoid(K)
    LK = K.transform(J.L)
    sph = rng.standard_normal((10_000, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    assert np.all(LK.contains(sph, tol=1e-9))
    assert np.linalg.norm(LK.vertices, axis=1).max() <= 3 + 1e-9


def test_degenerate_body():
    with pytest.raises(DegenerateBodyError):
        ConvexBody(vertices=np.array([[0, 0], [1, 1], [2, 2.0]]))


# renormalization ---------------------------------------------------------------

def quad_smooth(n=2):
    return SmoothPotential(lambda q: 0.5 * np.sum(np.asarray(q) ** 2, axis=-1),
                           lambda q: np.asarray(q, float),
                           lambda q: np.broadcast_to(np.eye(n), np.shape(q)[:-1] + (n, n)), n)


def test_renormalize_identity_leaves_potential(rng):
    c = builtin_cost("quadratic")
    u = SemidiscretePotential(c, rng.uniform(-1, 1, (10, 2)), rng.uniform(0, .3, 10))
    us = renormalize(u, AffineMap.identity(2))
    q = rng.uniform(-1, 1, (50, 2))
    assert np.allclose(us(q), u(q), atol=1e-14)


def test_renormalize_quadratic_fixed_point(rng):
    us = renormalize(quad_smooth(), AffineMap(2 * np.eye(2)))
    q = rng.uniform(-1, 1, (50, 2))
    assert np.allclose(us.value(q), 0.5 * np.sum(q ** 2, axis=1))
    assert np.allclose(us.grad(q), q)


def test_renormalized_exact_cell_measure_identity():
    c = builtin_cost("quadratic")
    U = Ball((0, 0), 1.0)
    V = Ball((0.3, 0.1), 0.8)
    rng = np.random.default_rng(7)
    atoms = V.sample(40, rng)
    u = SemidiscretePotential(c, atoms, rng.uniform(0, .2, 40), domain=U)
    ut = make_chart(c, U, (0.2, 0.1)).modify(u)
    L = AffineMap([[2.0, 0.5], [0.1, 0.7]], [0.1, -0.2])
    us = renormalize(ut, L)
    Z = Ball((0.1, 0.1), 0.3).as_polytope(64)
    Zs = renormalize(Z, L)
    Vs = AffineImageDomain(V, np.linalg.inv(L.matrix).T)
    a = ma_measure(ut, Z, V, method="exact-cell")
    b = ma_measure(us, Zs, Vs, method="exact-cell")
    assert a.value > 0
    assert b.value * abs(L.det) == pytest.approx(a.value, rel=1e-9)


# slices --------------------------------------------------------------------------

CUBE = np.array(np.meshgrid([0, 1], [0, 1], [0, 1])).reshape(3, -1).T.astype(float)


def test_slice_ratio_cube():
    r, _ = slice_projection_ratio(ConvexBody(vertices=CUBE), (1, 2), [0, .5, .5])
    assert r == pytest.approx(1.0)


def test_slice_ratio_simplex_edge():
    r, _ = slice_projection_ratio(ConvexBody(vertices=np.array([[0, 0], [1, 0], [0, 1.0]])), (1, 1), [0, 0])
    assert r == pytest.approx(0.5)


def test_slice_outside_raises():
    with pytest.raises(EmptySliceError):
        slice_projection_ratio(ConvexBody(vertices=CUBE), (1, 2), [0, 2.0, 2.0])


def test_random_polytope_slice_ratios_bounded():
    rng = np.random.default_rng(0)
    mon = SliceRatioMonitor()
    for _ in range(30):
        K = ConvexBody(vertices=rng.standard_normal((12, 3)))
        ctr = K.barycenter()
        for split in ((1, 2), (2, 1)):
            slice_projection_ratio(K, split, ctr, mon)
    assert mon.calls == 60
    assert mon.minimum > 1e-3


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.integers(0, 10_000))
@settings(max_examples=20)
def test_slice_ratio_shear_invariant(shear, seed):
    # shears fixing the x'' coordinates and moving x' by a function of x''
    rng = np.random.default_rng(seed)
    K = ConvexBody(vertices=rng.standard_normal((10, 3)))
    S = np.eye(3)
    S[0, 1:] = shear
    ctr = K.barycenter()
    r0, _ = slice_projection_ratio(K, (1, 2), ctr)
    r1, _ = slice_projection_ratio(K.transform(AffineMap(S)), (1, 2), S @ ctr)
    assert r1 == pytest.approx(r0, rel=1e-6)


# convexity of modified potentials --------------------------------------------------

def test_midpoint_convexity_on_convex_and_concave():
    D = Ball((0, 0), 1)
    ok = midpoint_convexity(lambda q: np.sum(q ** 2, axis=-1), D, 2000, rng=0)
    bad = midpoint_convexity(lambda q: -np.sum(q ** 2, axis=-1), D, 2000, rng=0)
    assert ok["max_defect"] <= 0 < bad["max_defect"]
    assert "q0" in bad["witness"]


def test_sublevel_convexity_quasiconvex():
    D = Ball((0, 0), 1)
    r = sublevel_convexity(lambda q: np.sqrt(np.linalg.norm(q, axis=-1)), D, 2000, rng=0)
    assert r["max_defect"] <= 1e-12
