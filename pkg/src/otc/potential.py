"""Semidiscrete c-convex potentials, c-transforms, c-Monge-Ampere measures and
the semidiscrete Kantorovich solver."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, spatial
from scipy.spatial import QhullError

from .cost_kernel import (Ball, BilinearStructure, CostOracle, DomainSpec, Polytope,
                          builtin_cost, chebyshev_center)

log = logging.getLogger(__name__)


class PotentialError(ValueError):
    pass


class NondifferentiablePointError(PotentialError):
    def __init__(self, message, x=None, targets=None):
        super().__init__(message)
        self.x = x
        self.targets = targets


class NonConvergenceError(PotentialError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class EmptyCellError(PotentialError):
    pass


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

class SemidiscretePotential:
    """u(x) = max_i { -c(x, y_i) - v_i }.

    ``domain`` is the source domain (optional, used by measures and probes);
    ``meta`` carries solver traces and similar bookkeeping.
    """

    def __init__(self, cost: CostOracle, atoms, weights, domain: DomainSpec | None = None,
                 meta: dict | None = None):
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
        if atoms.shape[0] == 0:
            raise PotentialError("empty support")
        if atoms.shape[0] != weights.size:
            raise PotentialError("atoms and weights differ in count")
        if atoms.shape[1] != cost.dim:
            raise PotentialError("atom dimension does not match the cost")
        self.cost = cost
        self.atoms = atoms
        self.weights = weights
        self.domain = domain
        self.meta = dict(meta or {})
        self._poly = None
        self.atoms.setflags(write=False)
        self.weights.setflags(write=False)

    def __repr__(self):
        return f"SemidiscretePotential({self.cost.name}, {len(self.atoms)} atoms)"

    @property
    def dim(self):
        return self.cost.dim

    def __len__(self):
        return len(self.atoms)

    def mountains(self, x) -> np.ndarray:
        """Values -c(x, y_i) - v_i, shape ``x.shape[:-1] + (N,)``."""
        x = np.asarray(x, dtype=float)
        return -self.cost(x[..., None, :], self.atoms) - self.weights

    def __call__(self, x):
        return self.mountains(x).max(axis=-1)

    def argmax(self, x):
        return self.mountains(x).argmax(axis=-1)

    def default_gap_tol(self, x) -> float:
        x = np.asarray(x, dtype=float)
        scale = np.abs(self.cost(x[..., None, :], self.atoms)).max()
        return 1e-9 * max(1.0, float(scale))

    def with_weights(self, weights, meta=None):
        return SemidiscretePotential(self.cost, self.atoms, weights, self.domain,
                                     meta if meta is not None else self.meta)

    def polyhedral(self):
        """Lower-hull dual structure, available for bilinear-type costs."""
        if self.cost.bilinear is None:
            return None
        if self._poly is None:
            self._poly = PolyhedralDual(self)
        return self._poly


class SmoothPotential:
    """A C^2 potential given by value / gradient / Hessian callables."""

    def __init__(self, value, grad, hess, dim, cost: CostOracle | None = None,
                 domain: DomainSpec | None = None, name="smooth"):
        self.value = value
        self.grad = grad
        self.hess = hess
        self.dim = dim
        self.cost = cost
        self.domain = domain
        self.name = name

    def __call__(self, q):
        return self.value(np.asarray(q, dtype=float))

    def __repr__(self):
        return f"SmoothPotential({self.name!r}, dim={self.dim})"


# ---------------------------------------------------------------------------
# Polyhedral structure for bilinear-type costs
# ---------------------------------------------------------------------------

class PolyhedralDual:
    """Regular-triangulation data for u when the cost is bilinear-type.

    With ``p_i = Phi y_i + o`` and heights ``h_i = b(y_i) + v_i`` the contact
    problem for a target y is min_x max_i <x, p_i - p(y)> - h_i.  Lower-hull
    facets T of the lifted points (p_i, h_i) are the vertices x_T of the cell
    complex; the contact point of y is x_T iff p(y) lies in T.
    """

    def __init__(self, u: SemidiscretePotential):
        bl: BilinearStructure = u.cost.bilinear
        self.structure = bl
        self.p = bl.phi(u.atoms)
        self.h = np.asarray(bl.b(u.atoms), dtype=float) + u.weights
        self.n = u.dim
        self.det_phi = abs(float(np.linalg.det(bl.Phi)))
        self._build()

    def _build(self):
        n = self.n
        N = len(self.p)
        self.simplices = np.zeros((0, n + 1), dtype=int)
        self.vertices = np.zeros((0, n))
        self.betas = np.zeros(0)
        if N < n + 1:
            return
        pts = np.hstack([self.p, self.h[:, None]])
        scale = np.abs(pts).max() + 1.0
        try:
            hull = spatial.ConvexHull(pts)
        except QhullError:
            try:
                hull = spatial.ConvexHull(pts, qhull_options="QJ Pp")
            except QhullError:
                return
        eq = hull.equations
        lower = eq[:, n] < -1e-12 * np.linalg.norm(eq[:, :n], axis=1).clip(1e-300) - 1e-14
        simp = hull.simplices[lower]
        keep = []
        verts = []
        betas = []
        for s in simp:
            P = self.p[s]
            # <x, p_j> - beta = h_j for the facet vertices
            Msys = np.hstack([P, -np.ones((n + 1, 1))])
            if abs(np.linalg.det(Msys)) < 1e-14 * scale ** n:
                continue
            sol = np.linalg.solve(Msys, self.h[s])
            keep.append(s)
            verts.append(sol[:n])
            betas.append(sol[n])
        if keep:
            self.simplices = np.array(keep, dtype=int)
            self.vertices = np.array(verts)
            self.betas = np.array(betas)
        # barycentric inverses
        T = self.p[self.simplices]  # (F, n+1, n)
        if len(T):
            Mb = np.concatenate([np.transpose(T, (0, 2, 1)), np.ones((len(T), 1, n + 1))], axis=1)
            self._bary_inv = np.linalg.inv(Mb)
            self.simplex_volume = np.abs(np.linalg.det(Mb)) / math.factorial(n)
        else:
            self._bary_inv = np.zeros((0, n + 1, n + 1))
            self.simplex_volume = np.zeros(0)

    def locate(self, pq):
        """Facet index containing each p (or -1 outside the atom hull)."""
        pq = np.atleast_2d(pq)
        if len(self.simplices) == 0:
            return np.full(len(pq), -1), np.zeros((len(pq), self.n + 1))
        # the facet over p maximises the affine pieces <x_T, p> - beta_T
        vals = pq @ self.vertices.T - self.betas
        idx = vals.argmax(axis=1)
        rhs = np.concatenate([pq, np.ones((len(pq), 1))], axis=1)
        bary = np.einsum("kij,kj->ki", self._bary_inv[idx], rhs)
        inside = bary.min(axis=1) >= -1e-10
        # coplanar lifted atoms split one face into tied facets; try the ties
        top = vals.max(axis=1, keepdims=True)
        tie_tol = 1e-10 * (1.0 + np.abs(top))
        for k in np.flatnonzero(~inside):
            for f in np.flatnonzero(vals[k] >= top[k] - tie_tol[k]):
                bk = self._bary_inv[f] @ rhs[k]
                if bk.min() >= -1e-10:
                    idx[k], bary[k], inside[k] = f, bk, True
                    break
        return np.where(inside, idx, -1), bary

    def contact_vertex(self, y):
        """Interior contact points x_T for targets y (NaN when not a vertex)."""
        pq = self.structure.phi(np.atleast_2d(y))
        idx, _ = self.locate(pq)
        out = np.full((len(pq), self.n), np.nan)
        ok = idx >= 0
        out[ok] = self.vertices[idx[ok]]
        return out, idx


# ---------------------------------------------------------------------------
# c-transforms and subdifferentials
# ---------------------------------------------------------------------------

def c_transform(c: CostOracle, support, values, direction="to-source", domain=None):
    """Generalised Legendre transform of a function known on a finite support.

    ``to-source``: v on target points -> v^c(x) = max_i -c(x, y_i) - v_i.
    ``to-target``: u on source points -> u^{c*}(y) = max_k -c(x_k, y) - u_k.
    Both are exact finite maxima; the result is a potential object.
    """
    support = np.atleast_2d(np.asarray(support, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    if support.shape[0] == 0 or values.size == 0:
        raise PotentialError("empty support")
    if direction == "to-source":
        return SemidiscretePotential(c, support, values, domain=domain)
    if direction == "to-target":
        # swap roles: c*(y, x) = c(x, y)
        swapped = CostOracle(c.name + "*", c.dim, lambda y, x: c(x, y),
                             {(b, a): (lambda y, x, ab=(a, b): _swap_tensor(c, ab, x, y))
                              for (a, b) in c._derivs}, c.fd_step)
        return SemidiscretePotential(swapped, support, values, domain=domain)
    raise PotentialError(f"unknown direction {direction!r}")


def _swap_tensor(c, ab, x, y):
    a, b = ab
    T = c.derivative((a, b), x, y)
    nb = T.ndim - a - b
    perm = list(range(nb)) + [nb + a + j for j in range(b)] + [nb + i for i in range(a)]
    return np.transpose(T, perm)


def conjugate(u: SemidiscretePotential, ys, domain: DomainSpec | None = None):
    """u^{c*}(y) = sup_{x in domain} -c(x, y) - u(x), by the contact solver."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    dom = domain if domain is not None else u.domain
    if dom is None:
        raise PotentialError("conjugate needs a source domain")
    x = contact_points(u, ys, dom)
    return -u.cost(x, ys) - u(x)


def double_transform(u: SemidiscretePotential, xs, domain=None):
    """(u^{c*})^c evaluated at xs, with u^{c*} computed at the atoms."""
    w = conjugate(u, u.atoms, domain)
    return SemidiscretePotential(u.cost, u.atoms, w)(xs)


def c_subdifferential(u: SemidiscretePotential, x, gap_tol: float | None = None):
    """Atoms within ``gap_tol`` of the max at ``x`` (indices and points)."""
    x = np.asarray(x, dtype=float)
    m = u.mountains(x)
    tol = u.default_gap_tol(x) if gap_tol is None else gap_tol
    idx = np.flatnonzero(m >= m.max() - tol)
    return idx, u.atoms[idx]


def map_G(u: SemidiscretePotential, x, gap_tol: float | None = None):
    """The optimal-map value at a differentiability point: the argmax atom."""
    idx, pts = c_subdifferential(u, x, gap_tol)
    if len(idx) != 1:
        raise NondifferentiablePointError("tie between atoms", x=np.asarray(x), targets=pts)
    return pts[0]


# ---------------------------------------------------------------------------
# Contact solver: F(y) = argmin_x u(x) + c(x, y) over the closed domain
# ---------------------------------------------------------------------------

def _domain_constraints(dom: DomainSpec):
    if isinstance(dom, Ball):
        ctr, r = dom.center, dom.radius
        return [{"type": "ineq", "fun": lambda z: r * r - np.sum((z[:-1] - ctr) ** 2),
                 "jac": lambda z: np.concatenate([-2 * (z[:-1] - ctr), [0.0]])}]
    if isinstance(dom, Polytope):
        A, b = dom.A, dom.b
        return [{"type": "ineq", "fun": lambda z: b - A @ z[:-1],
                 "jac": lambda z: np.hstack([-A, np.zeros((len(b), 1))])}]
    return [{"type": "ineq", "fun": lambda z: np.atleast_1d(dom.interior_distance(z[:-1]))}]


def _candidate_cloud(u, dom, count):
    key = ("cloud", id(dom), count)
    cache = u.meta.setdefault("_cache", {})
    if key not in cache:
        pts = np.concatenate([dom.qmc_sample(count), dom.boundary_sample(max(64, count // 4))])
        cache[key] = (pts, u(pts))
    return cache[key]


def contact_points(u, ys, dom: DomainSpec, probe="c", cloud=1500, polish=True):
    """Minimisers of x -> u(x) - psi_y(x) over the closed domain.

    ``probe='c'`` uses psi_y = -c(., y) (c-subdifferential contact);
    ``probe='ordinary'`` uses psi_p = <., p> (ordinary subgradients).
    Coarse start from a candidate cloud, then an SLSQP epigraph polish.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    pts, uvals = _candidate_cloud(u, dom, cloud)
    c = u.cost
    out = np.empty_like(ys)
    cons_dom = _domain_constraints(dom)
    for k, y in enumerate(ys):
        if probe == "c":
            g = uvals + c(pts, y)
        else:
            g = uvals - pts @ y
        x0 = pts[int(np.argmin(g))]
        if not polish:
            out[k] = x0
            continue
        out[k] = _pull_inside(dom, _polish(u, y, x0, cons_dom, probe), x0)
    return out


def _pull_inside(dom, x, x0):
    """SLSQP may stop a few 1e-9 outside; move back onto the closed domain."""
    if dom.contains(x[None])[0]:
        return x
    if isinstance(dom, Ball):
        d = x - dom.center
        return dom.center + d * (dom.radius / np.linalg.norm(d))
    lo, hi = 0.0, 1.0  # x0 (from the cloud) is inside
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if dom.contains((x0 + mid * (x - x0))[None])[0]:
            lo = mid
        else:
            hi = mid
    return x0 + lo * (x - x0)


def _polish(u, y, x0, cons_dom, probe):
    c = u.cost
    atoms, w = u.atoms, u.weights
    n = u.dim

    def pieces(x):
        vals = -c(x[None, :], atoms) - w
        if probe == "c":
            vals = vals + c(x, y)
        else:
            vals = vals - x @ y
        return vals

    def pieces_jac(x):
        J = -c.dx(x[None, :], atoms)
        if probe == "c":
            J = J + c.dx(x, y)
        else:
            J = J - y
        return J

    z0 = np.concatenate([x0, [pieces(x0).max()]])
    cons = [{"type": "ineq", "fun": lambda z: z[-1] - pieces(z[:-1]),
             "jac": lambda z: np.hstack([-pieces_jac(z[:-1]), np.ones((len(atoms), 1))])}]
    cons += cons_dom
    res = optimize.minimize(lambda z: z[-1], z0, jac=lambda z: np.eye(n + 1)[-1],
                            constraints=cons, method="SLSQP",
                            options={"ftol": 1e-14, "maxiter": 200})
    x = res.x[:n]
    if not np.all(np.isfinite(x)) or pieces(x).max() > pieces(x0).max():
        return x0
    return x


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------

@dataclass
class MeasureEstimate:
    value: float
    std_error: float
    method: str
    samples: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _region_contains(X, pts):
    if hasattr(X, "contains"):
        return np.asarray(X.contains(pts), dtype=bool)
    return np.asarray(X(pts), dtype=bool)


def _uniform_in(V: DomainSpec, count, rng):
    pts = V.sample(count, rng)
    return pts, V.volume()


def ma_measure(u, X, V: DomainSpec, mc_samples: int = 4000, rng=None, method="auto",
               probe="c", interior=True, slope_box=None) -> MeasureEstimate:
    """Estimate |d^c u|(X) = Leb{ y in V : contact point of y lies in X }.

    ``probe='ordinary'`` estimates the ordinary subgradient measure instead;
    then ``V`` is the sampling window for slopes (``slope_box`` may give a
    bounding box).  For bilinear-type costs the contact point is located
    exactly on the regular triangulation; otherwise the generic contact
    solver is used.  ``interior=True`` asserts X stays off the boundary of
    the source domain, which lets boundary contacts be discarded.
    """
    if mc_samples <= 0 and method != "exact-cell":
        raise PotentialError("mc_samples must be positive")
    poly = u.polyhedral() if isinstance(u, SemidiscretePotential) else None
    if probe == "ordinary" and poly is not None and u.cost.bilinear.alpha is None:
        poly = None
    if method == "exact-cell":
        if poly is None or not interior:
            raise PotentialError("exact-cell measure needs a bilinear-type cost and an interior region")
        return _exact_cell_measure(u, poly, X, V, probe)
    rng = np.random.default_rng(rng)
    if probe == "ordinary":
        if slope_box is not None:
            lo, hi = (np.asarray(a, float) for a in slope_box)
            ys = lo + (hi - lo) * rng.random((mc_samples, u.dim))
            vol = float(np.prod(hi - lo))
        else:
            ys, vol = _uniform_in(V, mc_samples, rng)
    else:
        ys, vol = _uniform_in(V, mc_samples, rng)
    hits = _contact_hits(u, poly, ys, X, probe, interior)
    p = hits.mean()
    return MeasureEstimate(value=float(vol * p), std_error=float(vol * math.sqrt(p * (1 - p) / len(ys))),
                           method="monte-carlo-pushforward", samples=int(len(ys)))


def _probe_points(u, ys, probe):
    bl = u.cost.bilinear
    if probe == "c":
        return bl.phi(ys)
    # ordinary: u = max <x, p_i - alpha> - ...; slope p means p + alpha in p-space
    return ys + bl.alpha


def _contact_hits(u, poly, ys, X, probe, interior):
    if poly is not None:
        pq = _probe_points(u, ys, probe)
        idx, _ = poly.locate(pq)
        hits = np.zeros(len(ys), dtype=bool)
        ok = idx >= 0
        if ok.any():
            hits[ok] = _region_contains(X, poly.vertices[idx[ok]])
        if not interior and u.domain is not None:
            rest = ~ok.copy()
            if ok.any():
                rest[ok] = ~u.domain.contains(poly.vertices[idx[ok]])
            if rest.any():
                xs = contact_points(u, ys[rest], u.domain, probe=probe)
                hits[rest] = _region_contains(X, xs)
        return hits
    if u.domain is None:
        raise PotentialError("generic contact solver needs the source domain")
    xs = contact_points(u, ys, u.domain, probe=probe)
    return _region_contains(X, xs)


def _exact_cell_measure(u, poly, X, V, probe):
    if len(poly.vertices) == 0:
        return MeasureEstimate(0.0, 0.0, "exact-cell")
    inX = _region_contains(X, poly.vertices)
    vols = poly.simplex_volume / (poly.det_phi if probe == "c" else 1.0)
    total = 0.0
    err = 0.0
    convex_target = isinstance(V, (Ball, Polytope))
    for k in np.flatnonzero(inX):
        simplex_y = u.atoms[poly.simplices[k]] if probe == "c" else None
        if probe == "c" and not (convex_target and np.all(V.contains(simplex_y))):
            frac, se = _simplex_fraction_in(simplex_y, V)
            total += vols[k] * frac
            err += (vols[k] * se) ** 2
        else:
            total += vols[k]
    return MeasureEstimate(float(total), float(math.sqrt(err)), "exact-cell")


def _simplex_fraction_in(S, V, count=4000):
    n = S.shape[1]
    rng = np.random.default_rng(12345)
    e = rng.exponential(size=(count, n + 1))
    bary = e / e.sum(axis=1, keepdims=True)
    pts = bary @ S
    p = float(np.mean(V.contains(pts)))
    return p, math.sqrt(p * (1 - p) / count)


# ---------------------------------------------------------------------------
# Power / Laguerre cells (exact path for bilinear-type costs)
# ---------------------------------------------------------------------------

def _gm_rule(n, s):
    """Grundmann-Moeller rule of degree 2s+1 on the unit simplex (points, weights)."""
    d = 2 * s + 1
    pts, wts = [], []
    for i in range(s + 1):
        coef = (-1) ** i * 2.0 ** (-2 * s) * (d + n - 2 * i) ** d \
            / (math.factorial(i) * math.factorial(d + n - i))
        for beta in _compositions(s - i, n + 1):
            bary = (2 * np.array(beta) + 1) / (d + n - 2 * i)
            pts.append(bary)
            wts.append(coef)
    pts = np.array(pts)
    wts = np.array(wts) * math.factorial(n)  # normalise to unit-volume simplex average
    return pts, wts


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for k in range(total + 1):
        for rest in _compositions(total - k, parts - 1):
            yield (k,) + rest


_GM_CACHE: dict = {}


def integrate_simplices(simplices, f, degree_s=2):
    """Integral of f over a list of n-simplices (array (K, n+1, n))."""
    K, n1, n = simplices.shape
    if (n, degree_s) not in _GM_CACHE:
        _GM_CACHE[(n, degree_s)] = _gm_rule(n, degree_s)
    bary, w = _GM_CACHE[(n, degree_s)]
    vols = np.abs(np.linalg.det(simplices[:, 1:] - simplices[:, :1])) / math.factorial(n)
    if f is None:
        return vols
    pts = np.einsum("qj,kjd->kqd", bary, simplices)
    vals = f(pts.reshape(-1, n)).reshape(K, -1)
    return vols * (vals @ w)


@dataclass
class LaguerreCell:
    index: int
    vertices: np.ndarray | None
    mass: float
    volume: float
    facets: dict = field(default_factory=dict)  # neighbour j -> weighted facet measure


def _domain_halfspaces(dom: DomainSpec):
    if isinstance(dom, Polytope):
        return dom.A, dom.b
    if isinstance(dom, Ball):
        P = dom.as_polytope()
        return P.A, P.b
    raise PotentialError("exact cells need a ball or polytope source domain")


def laguerre_cells(u: SemidiscretePotential, dom: DomainSpec, density=None, with_facets=False):
    """Clipped cells {x in dom : mountain i is maximal} for bilinear-type costs.

    Facet measures (for the solver Hessian) are ``int_F f / |p_i - p_j|``.
    """
    bl = u.cost.bilinear
    if bl is None:
        raise PotentialError("exact cells need a bilinear-type cost")
    p = bl.phi(u.atoms)
    h = np.asarray(bl.b(u.atoms), float) + u.weights
    A_dom, b_dom = _domain_halfspaces(dom)
    n = u.dim
    N = len(p)
    nbrs = _power_neighbours(p, h)
    cells = []
    for i in range(N):
        # <x, p_j - p_i> <= h_j - h_i
        oth = np.asarray(nbrs[i], dtype=int)
        if len(oth) == 0 and N > 1:
            cells.append(LaguerreCell(i, None, 0.0, 0.0))
            continue
        Ai = p[oth] - p[i]
        bi = h[oth] - h[i]
        nrm = np.linalg.norm(Ai, axis=1) if len(oth) else np.ones(0)
        A = np.vstack([Ai / nrm[:, None], A_dom])
        b = np.concatenate([bi / nrm, b_dom])
        K = len(oth)
        ctr, rad = chebyshev_center(A, b)
        if not rad > 1e-12:
            cells.append(LaguerreCell(i, None, 0.0, 0.0))
            continue
        try:
            hs = spatial.HalfspaceIntersection(np.hstack([A, -b[:, None]]), ctr)
            hull = spatial.ConvexHull(hs.intersections)
        except QhullError:
            cells.append(LaguerreCell(i, None, 0.0, 0.0))
            continue
        V = hull.points
        simp = np.concatenate([np.broadcast_to(ctr, (len(hull.simplices), 1, n)),
                               V[hull.simplices]], axis=1)
        vol = float(integrate_simplices(simp, None).sum())
        mass = vol if density is None else float(integrate_simplices(simp, density).sum())
        cell = LaguerreCell(i, V[hull.vertices], mass, vol)
        if with_facets:
            for f_simp in hull.simplices:
                fv = V[f_simp]
                res = fv @ A[:K].T - b[:K]
                on = np.flatnonzero(np.all(np.abs(res) < 1e-9 * (1 + np.abs(b[:K])), axis=0))
                if len(on) == 0:
                    continue
                j = int(oth[on[0]])
                meas = _facet_integral(fv, density)
                cell.facets[j] = cell.facets.get(j, 0.0) + meas / nrm[on[0]]
        cells.append(cell)
    return cells


def _facet_integral(fv, density):
    k = fv.shape[0] - 1
    E = fv[1:] - fv[0]
    meas = math.sqrt(max(np.linalg.det(E @ E.T), 0.0)) / math.factorial(k)
    if density is None:
        return meas
    if (k, 1) not in _GM_CACHE:
        _GM_CACHE[(k, 1)] = _gm_rule(k, 1)
    bary, w = _GM_CACHE[(k, 1)]
    return meas * float(density(bary @ fv) @ w)


def _power_neighbours(p, h):
    """Neighbour lists from the regular triangulation of the lifted atoms."""
    N, n = p.shape
    full = [np.array([j for j in range(N) if j != i], dtype=int) for i in range(N)]
    if N < n + 2:
        return full
    pts = np.hstack([p, h[:, None]])
    try:
        hull = spatial.ConvexHull(pts)
    except QhullError:
        return full
    lower = hull.simplices[hull.equations[:, n] < 0]
    nb = [set() for _ in range(N)]
    for s in lower:
        for i in s:
            nb[i].update(int(j) for j in s if j != i)
    return [np.array(sorted(x), dtype=int) for x in nb]


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _prepare_atoms(atoms, masses):
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    masses = np.asarray(masses, dtype=float).ravel()
    if np.any(masses < 0):
        raise PotentialError("negative atom mass")
    zero = masses == 0
    if zero.any():
        warnings.warn(f"dropping {int(zero.sum())} zero-mass atoms", stacklevel=3)
        atoms, masses = atoms[~zero], masses[~zero]
    # merge coincident atoms
    _, first, inv = np.unique(np.round(atoms, 12), axis=0, return_index=True, return_inverse=True)
    if len(first) < len(atoms):
        warnings.warn("merging coincident atoms", stacklevel=3)
        merged = np.zeros(len(first))
        np.add.at(merged, inv.ravel(), masses)
        order = np.argsort(first)
        atoms = atoms[first[order]]
        masses = merged[order]
    return atoms, masses


def _initial_weights(cost, atoms, dom):
    bl = cost.bilinear
    if bl is None:
        return np.zeros(len(atoms))
    # heights making the cells the Voronoi cells of the atoms shrunk into the
    # domain: every cell then contains its shrunk atom and is non-empty
    p = bl.phi(atoms)
    if isinstance(dom, Ball):
        c0, r0 = dom.center, dom.radius
    else:
        c0, r0 = chebyshev_center(dom.A, dom.b)
    pbar = p.mean(axis=0)
    spread = np.linalg.norm(p - pbar, axis=1).max() + 1e-300
    kappa = 0.5 * r0 / spread
    z = c0 + kappa * (p - pbar)
    h = np.sum(z * z, axis=1) / (2 * kappa)
    return h - np.asarray(bl.b(atoms), float)


def solve_semidiscrete(c: CostOracle, source_density, atoms, masses, tol: float = 1e-3,
                       source: DomainSpec | None = None, max_iter: int = 200,
                       method: str = "auto", mc_samples: int = 200_000, seed=0,
                       time_limit: float | None = None) -> SemidiscretePotential:
    """Weights v with cell masses matching ``masses`` (max relative error <= tol).

    ``method='exact'`` (bilinear-type costs on ball/polytope sources) runs a
    damped Newton ascent on the concave Kantorovich functional with exact
    cell integrals; ``method='mc'`` runs damped gradient ascent with step
    halving on a fixed quasi-random source sample.
    """
    if source is None:
        raise PotentialError("solve_semidiscrete needs the source domain")
    atoms, masses = _prepare_atoms(atoms, masses)
    if method == "auto":
        method = "exact" if (c.bilinear is not None and isinstance(source, (Ball, Polytope))) else "mc"
    total = _source_mass(source, source_density)
    rel = abs(masses.sum() - total) / total
    if rel > 1e-6:
        raise PotentialError(f"target masses sum to {masses.sum():.6g}, source mass is {total:.6g}")
    if method == "exact" and isinstance(source, Ball):
        # cells are integrated over the inscribed polytope; match its mass
        P = source.as_polytope()
        total = P.volume() if source_density is None else _source_mass(P, source_density)
    masses = masses * (total / masses.sum())
    t0 = time.perf_counter()
    if method == "exact":
        v, trace = _solve_newton(c, source_density, atoms, masses, tol, source, max_iter, t0, time_limit)
    elif method == "mc":
        v, trace = _solve_mc(c, source_density, atoms, masses, tol, source, max_iter, mc_samples, seed)
    else:
        raise PotentialError(f"unknown method {method!r}")
    meta = {"trace": trace, "masses": masses.tolist(), "method": method,
            "elapsed": time.perf_counter() - t0}
    return SemidiscretePotential(c, atoms, v, domain=source, meta=meta)


def _source_mass(dom, density):
    if density is None:
        return dom.volume()
    if isinstance(dom, (Ball, Polytope)):
        P = dom.as_polytope() if isinstance(dom, Ball) else dom
        hull = P.hull
        ctr = P.interior_point()
        n = dom.dim
        simp = np.concatenate([np.broadcast_to(ctr, (len(hull.simplices), 1, n)),
                               hull.points[hull.simplices]], axis=1)
        return float(integrate_simplices(simp, density).sum())
    pts = dom.qmc_sample(200_000)
    return dom.volume() * float(np.mean(density(pts)))


def _solve_newton(c, density, atoms, masses, tol, dom, max_iter, t0, time_limit):
    N = len(atoms)
    v = _initial_weights(c, atoms, dom)
    trace = []
    u = SemidiscretePotential(c, atoms, v)
    cells = laguerre_cells(u, dom, density, with_facets=True)
    m = np.array([cl.mass for cl in cells])
    err0 = np.abs(m - masses).max()
    eps0 = 0.5 * min(masses.min(), m.min()) if m.min() > 0 else 0.5 * masses.min()
    for it in range(max_iter):
        relerr = float(np.max(np.abs(m - masses) / masses))
        trace.append({"iter": it, "max_rel_error": relerr, "min_mass": float(m.min())})
        if relerr <= tol:
            return v, trace
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break
        H = np.zeros((N, N))
        for cl in cells:
            for j, w in cl.facets.items():
                H[cl.index, j] += w
        H = 0.5 * (H + H.T)
        L = np.diag(H.sum(axis=1)) - H  # d m / d v = -L
        g = m - masses
        # Newton: m(v + dv) ~ m - L dv = masses  =>  L dv = g
        dv = np.linalg.lstsq(L + 1e-14 * np.trace(L) / N * np.eye(N), g, rcond=None)[0]
        dv -= dv.mean()
        tau = 1.0
        errn = np.abs(g).max()
        accepted = False
        for _ in range(30):
            vt = v + tau * dv
            ut = SemidiscretePotential(c, atoms, vt)
            ct = laguerre_cells(ut, dom, density, with_facets=True)
            mt = np.array([cl.mass for cl in ct])
            if mt.min() >= eps0 and np.abs(mt - masses).max() <= (1 - tau / 2) * errn:
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            raise NonConvergenceError("Newton step halving failed", trace)
        v, cells, m = vt, ct, mt
    raise NonConvergenceError(f"no convergence in {max_iter} iterations (err0={err0:.3g})", trace)


def _solve_mc(c, density, atoms, masses, tol, dom, max_iter, mc_samples, seed):
    # concave dual G(v) = sum_s w_s min_i [c(x_s, y_i) + v_i] - <v, masses>
    # on a fixed quasi-random sample; ascent with Barzilai-Borwein steps and
    # Armijo halving
    N = len(atoms)
    pts = dom.qmc_sample(mc_samples, start=int(seed))
    wts = np.ones(len(pts)) if density is None else density(pts)
    wts = wts * (masses.sum() / wts.sum())
    C = c(pts[:, None, :], atoms[None, :, :])

    def G(v):
        S = C + v
        lab = np.argmin(S, axis=1)
        val = float(wts @ S[np.arange(len(S)), lab] - v @ masses)
        return val, np.bincount(lab, weights=wts, minlength=N) - masses

    v = np.zeros(N)
    g_val, grad = G(v)
    step = float(np.ptp(C)) / max(masses.sum(), 1e-300)
    trace = []
    for it in range(max_iter * 20):
        relerr = float(np.max(np.abs(grad) / masses))
        if it % 20 == 0 or relerr <= tol:
            trace.append({"iter": it, "max_rel_error": relerr, "step": step, "dual": g_val})
        if relerr <= tol:
            return v, trace
        for _ in range(60):
            vt = v + step * grad
            gt, gradt = G(vt)
            if gt >= g_val + 1e-4 * step * float(grad @ grad):
                break
            step *= 0.5
        else:
            break
        s_vec, y_vec = vt - v, gradt - grad
        v, g_val, grad = vt, gt, gradt
        curv = -float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / curv if curv > 0 else step * 2.0
    raise NonConvergenceError("dual ascent stalled", trace)


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

@dataclass
class BoundsSpec:
    lam: float
    Lam: float
    U_lambda: DomainSpec

    def __post_init__(self):
        if not (0 < self.lam <= 1 <= self.Lam):
            raise PotentialError("need 0 < lambda <= 1 <= Lambda")


def check_ma_bounds(u: SemidiscretePotential, bounds: BoundsSpec, probe_radius: float,
                    V: DomainSpec, probes: int = 40, mc_samples: int = 4000, rng=None,
                    slack: float = 0.0) -> dict:
    """Two-sided c-Monge-Ampere bounds on sampled balls.

    On balls inside U^lambda the measure must lie in [lam Leb(B), Leb(B)/lam]
    and on balls inside the source domain below Lam Leb(B), allowing 3 standard
    errors plus the relative ``slack``.
    """
    rng = np.random.default_rng(rng)
    n = u.dim
    Ul = bounds.U_lambda
    U = u.domain
    centers = Ul.sample(probes * 20, rng)
    centers = centers[Ul.interior_distance(centers) >= probe_radius][:probes]
    rows = []
    violations = []
    for ctr in centers:
        B = Ball(ctr, probe_radius)
        try:
            est = ma_measure(u, B, V, mc_samples, rng=rng, method="exact-cell")
        except PotentialError:
            est = ma_measure(u, B, V, mc_samples, rng=rng)
        leb = B.volume()
        allow = 3 * est.std_error + slack * leb
        lo_ok = est.value + allow >= bounds.lam * leb
        hi_ok = est.value - allow <= leb / bounds.lam
        row = {"center": ctr.tolist(), "measure": est.value, "std_error": est.std_error,
               "leb": leb, "ratio": est.value / leb, "lower_ok": bool(lo_ok), "upper_ok": bool(hi_ok)}
        rows.append(row)
        if not (lo_ok and hi_ok):
            violations.append(row)
    # Lambda bound on balls inside the whole source domain
    big = []
    if U is not None:
        cs = U.sample(probes * 20, rng)
        cs = cs[U.interior_distance(cs) >= probe_radius][: max(1, probes // 4)]
        for ctr in cs:
            B = Ball(ctr, probe_radius)
            try:
                est = ma_measure(u, B, V, mc_samples, rng=rng, method="exact-cell")
            except PotentialError:
                est = ma_measure(u, B, V, mc_samples, rng=rng)
            leb = B.volume()
            ok = est.value - 3 * est.std_error - slack * leb <= bounds.Lam * leb
            big.append({"center": ctr.tolist(), "ratio": est.value / leb, "ok": bool(ok)})
            if not ok:
                violations.append(big[-1])
    ratios = [r["ratio"] for r in rows]
    return {"lambda": bounds.lam, "Lambda": bounds.Lam, "probe_radius": probe_radius,
            "probes": len(rows), "min_ratio": min(ratios) if ratios else None,
            "max_ratio": max(ratios) if ratios else None, "violations": violations,
            "passed": not violations, "rows": rows, "global_rows": big}


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def write_atoms_csv(path, atoms, masses=None, weights=None):
    atoms = np.atleast_2d(atoms)
    n = atoms.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"y{i + 1}" for i in range(n)] + ["mass", "weight"])
        for k, y in enumerate(atoms):
            m = "" if masses is None else repr(float(masses[k]))
            w = "" if weights is None else repr(float(weights[k]))
            wr.writerow([repr(float(t)) for t in y] + [m, w])


def read_atoms_csv(path):
    """Returns (atoms, masses or None, weights or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PotentialError(f"{path}: empty atom file")
    head = [h.strip() for h in rows[0]]
    ycols = [i for i, h in enumerate(head) if h.startswith("y")]
    if not ycols:
        raise PotentialError(f"{path}: no y1..yn columns")
    mi = head.index("mass") if "mass" in head else None
    wi = head.index("weight") if "weight" in head else None
    atoms, masses, weights = [], [], []
    for ln, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        try:
            atoms.append([float(r[i]) for i in ycols])
            masses.append(float(r[mi]) if mi is not None and r[mi] != "" else np.nan)
            weights.append(float(r[wi]) if wi is not None and r[wi] != "" else np.nan)
        except (ValueError, IndexError) as exc:
            raise PotentialError(f"{path}:{ln}: {exc}")
    masses = np.array(masses)
    weights = np.array(weights)
    return (np.array(atoms), None if np.isnan(masses).all() else masses,
            None if np.isnan(weights).all() else weights)


def uniform_grid_atoms(V: DomainSpec, spacing: float):
    """Grid points of spacing ``spacing`` inside V (cell-centred)."""
    lo, hi = V.bbox()
    axes = [np.arange(l + spacing / 2, h, spacing) for l, h in zip(lo, hi)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    return g[V.interior_distance(g) > 0]


def quadratic(n=2):
    return builtin_cost("quadratic", n)
