import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otc import Ball, Polytope, builtin_cost
from otc.harness.probes import ball_target_problem, two_cluster_problem
from otc.potential import (BoundsSpec, NondifferentiablePointError, PotentialError,
                           SemidiscretePotential, c_subdifferential, c_transform,
                           check_ma_bounds, double_transform, laguerre_cells, ma_measure, map_G,
                           read_atoms_csv, solve_semidiscrete, uniform_grid_atoms,
                           write_atoms_csv)

import oracles


@pytest.fixture
def two_atom():
    return SemidiscretePotential(builtin_cost("bilinear"), [[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0],
                                 domain=Ball((0, 0), 1))


@pytest.fixture(scope="module")
def ball_problem():
    return ball_target_problem(256)


@pytest.fixture(scope="module")
def two_cluster():
    return two_cluster_problem(64)


def target_measure(u, B, cells=None):
    """|d^{c*} u^{c*}|(B): source mass of the cells whose atoms lie in B."""
    cells = cells if cells is not None else laguerre_cells(u, u.domain)
    inside = B.contains(u.atoms)
    return float(sum(c.mass for c, k in zip(cells, inside) if k))


# transforms -------------------------------------------------------------------

def test_legendre_of_quadratic_on_grid():
    Y = uniform_grid_atoms(Ball((0, 0), 1), 0.02)
    u = c_transform(builtin_cost("bilinear"), Y, 0.5 * np.sum(Y ** 2, axis=1))
    x = Ball((0, 0), 1).sample(500, 0)
    # grid-converged: error is O(spacing^2)
    assert np.abs(u(x) - 0.5 * np.sum(x ** 2, axis=1)).max() <= 0.02 ** 2


def test_single_atom(rng):
    c = builtin_cost("log_distance")
    y0 = np.array([2.0, 0.3])
    U = Ball((0, 0), .5)
    u = SemidiscretePotential(c, [y0], [0.0], domain=U)
    x = U.sample(50, rng)
    assert np.allclose(u(x), -c(x, y0))
    assert np.allclose(double_transform(u, x), u(x), atol=1e-9)
    assert np.all(map_G(u, x[0]) == y0)


def test_two_atom_abs(two_atom, rng):
    x = rng.uniform(-1, 1, (100, 2))
    assert np.allclose(two_atom(x), np.abs(x[:, 0]))


def test_two_atom_subdifferentials(two_atom):
    idx, _ = c_subdifferential(two_atom, [0.5, 0.0])
    assert idx.tolist() == [0]
    idx, pts = c_subdifferential(two_atom, [0.0, 0.3])
    assert idx.tolist() == [0, 1]
    assert np.array_equal(map_G(two_atom, [0.5, 0.0]), [1.0, 0.0])
    with pytest.raises(NondifferentiablePointError) as err:
        map_G(two_atom, [0.0, 0.3])
    assert len(err.value.targets) == 2


def test_circle_atoms_tie_at_center():
    th = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    u = SemidiscretePotential(builtin_cost("quadratic"), np.c_[np.cos(th), np.sin(th)], np.zeros(7))
    idx, _ = c_subdifferential(u, [0.0, 0.0])
    assert len(idx) == 7


def test_to_target_transform_swaps_roles(rng):
    c = builtin_cost("log_distance")
    xs = rng.uniform(-.5, .5, (5, 2))
    vals = rng.random(5)
    v = c_transform(c, xs, vals, direction="to-target")
    y = np.array([[2.0, 0.1]])
    assert v(y)[0] == pytest.approx(np.max(-c(xs, y[0]) - vals))


def test_empty_support():
    with pytest.raises(PotentialError):
        c_transform(builtin_cost("quadratic"), np.empty((0, 2)), [])


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20)
def test_double_transform_idempotent(seed):
    rng = np.random.default_rng(seed)
    c = builtin_cost("quadratic")
    U = Ball((0, 0), 1)
    u = SemidiscretePotential(c, rng.uniform(-1, 1, (8, 2)), rng.uniform(0, .5, 8), domain=U)
    x = U.sample(200, rng)
    assert np.allclose(double_transform(u, x), u(x), atol=1e-9)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30)
def test_two_point_cyclical_monotonicity(seed):
    rng = np.random.default_rng(seed)
    c = builtin_cost("log_distance")
    u = SemidiscretePotential(c, rng.uniform(-.5, .5, (12, 2)) + [2, 0], rng.normal(0, .1, 12))
    x = rng.uniform(-.5, .5, (2, 2))
    y1, y2 = u.atoms[u.argmax(x)]
    lhs = c(x[0], y1) + c(x[1], y2)
    rhs = c(x[0], y2) + c(x[1], y1)
    assert lhs <= rhs + 1e-10


# measures -----------------------------------------------------------------------

def test_identity_map_measure():
    Y = uniform_grid_atoms(Ball((0, 0), 1), 0.02)
    V = Ball((0, 0), 1)
    u = SemidiscretePotential(builtin_cost("bilinear"), Y, 0.5 * np.sum(Y ** 2, axis=1), domain=V)
    est = ma_measure(u, Ball((0, 0), .5), V, 20_000, rng=0)
    assert est.value == pytest.approx(math.pi / 4, rel=0.03)
    assert abs(est.value - math.pi / 4) <= 3 * est.std_error


def test_single_atom_measure_on_whole_domain():
    c = builtin_cost("quadratic")
    U = Ball((0, 0), 1)
    V = Ball((0.2, 0), 0.5)
    u = SemidiscretePotential(c, [[0.2, 0.0]], [0.0], domain=U)
    # every y in V touches u somewhere in the closed domain, so X = U gets all of V
    est = ma_measure(u, U, V, 4000, rng=1, interior=False)
    assert abs(est.value - V.volume()) <= 3 * est.std_error + 1e-12


def test_measure_rejects_bad_samples(two_atom):
    with pytest.raises(PotentialError):
        ma_measure(two_atom, Ball((0, 0), .5), Ball((0, 0), 1), mc_samples=0)


# solver -------------------------------------------------------------------------

def test_two_equal_atoms_symmetric():
    c = builtin_cost("quadratic")
    U = Ball((0, 0), 1)
    u = solve_semidiscrete(c, None, [[0.5, 0.0], [-0.5, 0.0]], [math.pi / 2] * 2, source=U, tol=1e-8)
    assert u.weights[0] == pytest.approx(u.weights[1], abs=1e-9)
    idx, _ = c_subdifferential(u, [0.0, 0.37], gap_tol=1e-9)
    assert len(idx) == 2


def test_one_atom_any_weight():
    U = Ball((0, 0), 1)
    u = solve_semidiscrete(builtin_cost("quadratic"), None, [[0.1, 0.1]], [math.pi], source=U)
    cells = laguerre_cells(u, U)
    assert cells[0].mass == pytest.approx(U.volume(), rel=1e-3)


def test_mass_mismatch():
    with pytest.raises(PotentialError, match="masses"):
        solve_semidiscrete(builtin_cost("quadratic"), None, [[0, 0], [1, 0]], [1, 1],
                           source=Polytope.box([0, 0], [1, 1]))


def test_small_solve_against_power_oracle():
    rng = np.random.default_rng(3)
    atoms = rng.random((12, 2))
    P = Polytope.box([0, 0], [1, 1])
    u = solve_semidiscrete(builtin_cost("quadratic"), None, atoms, np.full(12, 1 / 12), tol=1e-6, source=P)
    areas = oracles.power_cell_areas(atoms, -u.weights, (np.zeros(2), np.ones(2)))
    assert np.abs(areas * 12 - 1).max() <= 1e-5
    assert areas.sum() == pytest.approx(1.0)


def test_mc_solver_mass_conservation():
    c = builtin_cost("log_distance")
    U = Ball((0, 0), .5)
    rng = np.random.default_rng(0)
    atoms = Ball((2, 0), .5).sample(6, rng)
    m = np.full(6, U.volume() / 6)
    u = solve_semidiscrete(c, None, atoms, m, source=U, tol=2e-2, method="mc", mc_samples=40_000)
    assert u.meta["trace"][-1]["max_rel_error"] <= 2e-2
    assert sum(u.meta["masses"]) == pytest.approx(U.volume())


def test_map_G_is_power_cell_argmax(rng):
    atoms = rng.random((50, 2))
    P = Polytope.box([0, 0], [1, 1])
    u = solve_semidiscrete(builtin_cost("quadratic"), None, atoms, np.full(50, 1 / 50), source=P)
    x = rng.random((200, 2))
    brute = np.argmin(0.5 * ((x[:, None] - atoms[None]) ** 2).sum(-1) + u.weights, axis=1)
    got = np.array([np.flatnonzero((atoms == map_G(u, xi, gap_tol=0.0)).all(1))[0] for xi in x])
    assert np.array_equal(got, brute)


# bounds ---------------------------------------------------------------------------

def test_identity_map_bounds_pass():
    Y = uniform_grid_atoms(Ball((0, 0), 1), 0.02)
    u = SemidiscretePotential(builtin_cost("bilinear"), Y, 0.5 * np.sum(Y ** 2, axis=1),
                              domain=Ball((0, 0), 1))
    # the grid discretisation moves ratios by about 1%; the slack covers it
    r = check_ma_bounds(u, BoundsSpec(1, 1, Ball((0, 0), .6)), 0.2, Ball((0, 0), 1), probes=10,
                        slack=0.02)
    assert r["passed"]
    assert r["min_ratio"] == pytest.approx(1, abs=0.02) and r["max_ratio"] == pytest.approx(1, abs=0.02)


def test_solver_bounds_half(ball_problem):
    u = ball_problem
    r = check_ma_bounds(u, BoundsSpec(0.5, 2, Ball((0, 0), .6)), 0.25, u.meta["V"], probes=20)
    assert r["passed"], r["violations"][:2]


def test_two_cluster_gap_breaks_lower_bound(two_cluster):
    # dual side: balls in the gap of the target support carry no mass
    u = two_cluster
    cells = laguerre_cells(u, u.domain)
    lam = 0.5
    gap = Ball((0, 0), 0.3)
    inner = Ball((1.5, 0), 0.3)
    assert target_measure(u, gap, cells) < lam * gap.volume()
    assert target_measure(u, inner, cells) >= lam * inner.volume()


def test_dual_lower_bound_from_upper_bound(ball_problem):
    u = ball_problem
    r = check_ma_bounds(u, BoundsSpec(1, 1, Ball((0, 0), .6)), 0.25, u.meta["V"], probes=20)
    Lam = r["max_ratio"]
    cells = laguerre_cells(u, u.domain)
    h = u.meta["spacing"]
    for ctr in ([0, 0], [0.3, -0.2], [-0.4, 0.1]):
        B = Ball(ctr, 0.3)
        # atoms within one spacing of the edge may fall on either side
        assert target_measure(u, B, cells) >= Ball(ctr, 0.3 - h).volume() / Lam


def test_bounds_spec_validation():
    with pytest.raises(PotentialError):
        BoundsSpec(2.0, 1.0, Ball((0, 0), 1))


# io -------------------------------------------------------------------------------

def test_csv_roundtrip(tmp_path, rng):
    a, m, w = rng.random((5, 3)), rng.random(5), rng.random(5)
    p = tmp_path / "atoms.csv"
    write_atoms_csv(p, a, m, w)
    a2, m2, w2 = read_atoms_csv(p)
    assert np.array_equal(a, a2) and np.array_equal(m, m2) and np.array_equal(w, w2)
    write_atoms_csv(p, a)
    _, m3, w3 = read_atoms_csv(p)
    assert m3 is None and w3 is None


def test_csv_bad_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y1,y2\n0.1,abc\n")
    with pytest.raises(PotentialError, match=":2:"):
        read_atoms_csv(p)
