"""Dual coordinates, c-segments, c-convexity checks, John ellipsoids and
affine renormalisation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import spatial
from scipy.spatial import QhullError

from .cost_kernel import (Ball, BilinearStructure, CostError, CostOracle, DomainSpec,
                          Polytope, AffineImageDomain, _all_orders)
from .potential import SemidiscretePotential, SmoothPotential

log = logging.getLogger(__name__)


class ChartInversionError(CostError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class SegmentDomainError(CostError):
    """A c-segment leaves the domain (the domain is not c-convex)."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DegenerateBodyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Newton inversion of dual coordinates
# ---------------------------------------------------------------------------

def dual_coords(c: CostOracle, pts, anchor, side="x"):
    """q = -D_y c(x, anchor) for side 'x', p = -D_x c(anchor, y) for side 'y'."""
    pts = np.asarray(pts, dtype=float)
    if side == "x":
        return -c.dy(pts, anchor)
    return -c.dx(anchor, pts)


def invert_dual(c: CostOracle, target, anchor, side="x", guess=None, max_iter=30,
                rtol=1e-12, strict=True):
    """Solve dual_coords(c, z, anchor, side) = target for z by damped Newton.

    Batched over the leading axis of ``target``.  Returns ``(z, ok)``; with
    ``strict`` a failure raises ChartInversionError carrying the offending
    target.
    """
    target = np.atleast_2d(np.asarray(target, dtype=float))
    anchors = np.broadcast_to(np.asarray(anchor, dtype=float), target.shape)
    z = np.array(np.broadcast_to(guess if guess is not None else anchors, target.shape), dtype=float)

    def resid(zz):
        with np.errstate(all="ignore"):
            return target_sub - dual_coords(c, zz, anchor_sub, side)

    ok = np.zeros(len(target), dtype=bool)
    tol = rtol * (1.0 + np.linalg.norm(target, axis=1))
    active = np.arange(len(target))
    target_sub, anchor_sub = target, anchors
    r = resid(z)
    rn = np.linalg.norm(r, axis=1)
    rn[~np.isfinite(rn)] = np.inf
    for _ in range(max_iter):
        done = rn[active] <= tol[active]
        ok[active[done]] = True
        active = active[~done]
        if len(active) == 0:
            break
        za = z[active]
        anchor_sub = anchors[active]
        with np.errstate(all="ignore"):
            M = c.dxy(za, anchor_sub) if side == "x" else c.dxy(anchor_sub, za)
        J = -np.swapaxes(M, -1, -2) if side == "x" else -M
        try:
            step = np.linalg.solve(J, r[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Jk, rk, rcond=None)[0] for Jk, rk in zip(J, r[active])])
        tau = np.ones(len(active))
        target_sub = target[active]
        base = rn[active]
        for _h in range(25):
            zt = za + tau[:, None] * step
            rt = resid(zt)
            rtn = np.linalg.norm(rt, axis=1)
            good = np.isfinite(rtn) & (rtn < base)
            if good.all():
                break
            tau = np.where(good, tau, 0.5 * tau)
        z[active] = np.where(good[:, None], zt, za)
        r[active] = np.where(good[:, None], rt, r[active])
        rn[active] = np.where(good, rtn, rn[active])
    ok |= rn <= tol
    if strict and not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        raise ChartInversionError(f"dual coordinates not inverted at {target[k].tolist()}",
                                  witness=target[k])
    return z, ok


# ---------------------------------------------------------------------------
# Coordinate chart and modified cost
# ---------------------------------------------------------------------------

class CoordinateChart:
    """q = -D_y c(x, ytilde) on the source domain U.

    The inverse uses Newton from the nearest precomputed forward image; for
    bilinear-type costs the chart is affine and inverted in closed form.
    """

    def __init__(self, c: CostOracle, U: DomainSpec, anchor, resolution=4096):
        self.cost = c
        self.domain = U
        self.anchor = np.asarray(anchor, dtype=float)
        self.dim = c.dim
        self.resolution = int(resolution)
        self._tree = None
        self._grid = None
        self._image = None
        self._mod = None
        bl = c.bilinear
        if bl is not None:
            self._lin = np.asarray(bl.Phi, float).T
            self._shift = -np.asarray(bl.grad_b(self.anchor), float)
            self._lin_inv = np.linalg.inv(self._lin)
        else:
            self._lin = None

    def __repr__(self):
        return f"CoordinateChart({self.cost.name}, anchor={self.anchor.tolist()})"

    @property
    def affine(self):
        return self._lin is not None

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if self._lin is not None:
            return x @ self._lin.T + self._shift
        return dual_coords(self.cost, x, self.anchor, "x")

    def jacobian(self, x):
        """dq/dx = -D_xy c(x, ytilde)^T."""
        M = self.cost.dxy(np.asarray(x, float), self.anchor)
        return -np.swapaxes(M, -1, -2)

    def _seed_grid(self):
        if self._tree is None:
            U = self.domain
            g = np.concatenate([U.qmc_sample(self.resolution),
                                U.boundary_sample(max(64, self.resolution // 4))])
            self._grid = g
            self._tree = spatial.cKDTree(self.forward(g))
        return self._tree

    def inverse(self, q, strict=True):
        q = np.asarray(q, dtype=float)
        shp = q.shape
        q2 = q.reshape(-1, self.dim)
        if self._lin is not None:
            return ((q2 - self._shift) @ self._lin_inv.T).reshape(shp)
        tree = self._seed_grid()
        _, nn = tree.query(q2)
        x, ok = invert_dual(self.cost, q2, self.anchor, "x", guess=self._grid[nn], strict=strict)
        if not strict:
            x[~ok] = np.nan
        return x.reshape(shp)

    def image_hull(self, count=None):
        """ConvexBody spanned by the images of boundary samples of U."""
        if self._image is None:
            m = count or (1024 if self.dim == 2 else 6000)
            pts = self.forward(self.domain.boundary_sample(m))
            self._image = ConvexBody(vertices=pts)
        return self._image

    def contains(self, q):
        """q in the chart image (preimage exists and lies in U)."""
        x = self.inverse(q, strict=False)
        good = np.all(np.isfinite(x), axis=-1)
        out = np.zeros(good.shape, dtype=bool)
        out[good] = self.domain.contains(x[good])
        return out

    def modified_cost(self) -> CostOracle:
        if self._mod is None:
            self._mod = modified_cost(self)
        return self._mod

    def modify(self, u: SemidiscretePotential) -> SemidiscretePotential:
        """u~(q) = u(x(q)) + c(x(q), ytilde) as a potential of the modified cost."""
        return SemidiscretePotential(self.modified_cost(), u.atoms, u.weights,
                                     domain=ChartImageDomain(self), meta={"chart": repr(self)})


def make_chart(c, U, anchor, resolution=4096) -> CoordinateChart:
    return CoordinateChart(c, U, anchor, resolution)


class ChartImageDomain(DomainSpec):
    """The image of U under a chart (membership through the inverse)."""

    def __init__(self, chart: CoordinateChart):
        self.chart = chart
        self.dim = chart.dim

    def __repr__(self):
        return f"ChartImageDomain({self.chart!r})"

    def contains(self, points, tol=None):
        return self.chart.contains(points)

    def bbox(self):
        V = self.chart.image_hull().vertices
        return V.min(axis=0), V.max(axis=0)

    def interior_distance(self, points):
        # distance to the image hull; exact for convex images
        return self.chart.image_hull().interior_distance(points)

    def boundary_sample(self, count, rng=None):
        return self.chart.forward(self.chart.domain.boundary_sample(count, rng))

    def sample(self, count, rng=None):
        return self.chart.forward(self.chart.domain.sample(count, rng))

    def qmc_sample(self, count, start=0):
        return self.chart.forward(self.chart.domain.qmc_sample(count, start))

    def volume(self):
        x = self.chart.domain.qmc_sample(20000)
        J = np.abs(np.linalg.det(self.chart.jacobian(x)))
        return float(self.chart.domain.volume() * J.mean())

    def to_dict(self):
        return {"shape": "chart-image", "anchor": self.chart.anchor.tolist(),
                "base": self.chart.domain.to_dict()}


def modified_cost(chart: CoordinateChart) -> CostOracle:
    """c~(q, y) = c(x(q), y) - c(x(q), ytilde).

    First derivatives and the mixed Hessian are closed-form in terms of the
    base cost; other orders fall back to finite differences.  Bilinear-type
    bases give a bilinear-type modified cost.
    """
    c = chart.cost
    yt = chart.anchor
    n = c.dim
    bl = c.bilinear
    name = f"{c.name}~"
    if bl is not None:
        b, gb = bl.b, bl.grad_b
        b0 = float(np.asarray(b(yt)))
        g0 = np.asarray(gb(yt), float)

        def bt(y):
            y = np.asarray(y, float)
            return b(y) - b0 - (y - yt) @ g0

        def gbt(y):
            return np.asarray(gb(np.asarray(y, float)), float) - g0

        def fn(q, y):
            q = np.asarray(q, float)
            y = np.asarray(y, float)
            return bt(y) - np.sum(q * (y - yt), axis=-1)

        def d10(q, y):
            q, y = np.broadcast_arrays(np.asarray(q, float), np.asarray(y, float))
            return -(y - yt)

        def d01(q, y):
            q, y = np.broadcast_arrays(np.asarray(q, float), np.asarray(y, float))
            return gbt(y) - q

        def d11(q, y):
            q, y = np.broadcast_arrays(np.asarray(q, float), np.asarray(y, float))
            return np.broadcast_to(-np.eye(n), q.shape[:-1] + (n, n)).copy()

        def zero(order):
            a, bb = order

            def f(q, y):
                q, y = np.broadcast_arrays(np.asarray(q, float), np.asarray(y, float))
                return np.zeros(q.shape[:-1] + (n,) * (a + bb))
            return f

        derivs = {(1, 0): d10, (0, 1): d01, (1, 1): d11}
        for order in _all_orders():
            a, bb = order
            if a >= 2 or (a == 1 and bb >= 2):
                derivs[order] = zero(order)
        structure = BilinearStructure(Phi=np.eye(n), offset=-yt, b=bt, grad_b=gbt,
                                      alpha=np.zeros(n), a0=0.0)
        return CostOracle(name, n, fn, derivs, c.fd_step, params={"base": c.name, "anchor": yt.tolist()},
                          bilinear=structure)

    def xq(q):
        return chart.inverse(np.asarray(q, float))

    def both(q, y):
        q, y = np.asarray(q, float), np.asarray(y, float)
        x = xq(q)
        x, y = np.broadcast_arrays(x, y)
        return x, y

    def fn(q, y):
        x, y = both(q, y)
        return c(x, y) - c(x, yt)

    def d10(q, y):
        x, y = both(q, y)
        M0 = c.dxy(x, yt)
        g = c.dx(x, y) - c.dx(x, yt)
        return -np.linalg.solve(M0, g[..., None])[..., 0]

    def d01(q, y):
        x, y = both(q, y)
        return c.dy(x, y)

    def d11(q, y):
        x, y = both(q, y)
        return -np.linalg.solve(c.dxy(x, yt), c.dxy(x, y))

    def d20(q, y):
        # J^T (W + c_xx(x,y) - c_xx(x,yt)) J with J = dx/dq = -M0^{-T}
        x, y = both(q, y)
        M0 = c.dxy(x, yt)
        J = -np.linalg.inv(np.swapaxes(M0, -1, -2))
        v = -np.linalg.solve(M0, (c.dx(x, y) - c.dx(x, yt))[..., None])[..., 0]
        W = np.einsum("...alb,...b->...al", c.derivative((2, 1), x, yt), v)
        inner = W + c.derivative((2, 0), x, y) - c.derivative((2, 0), x, yt)
        return np.einsum("...ai,...al,...lk->...ik", J, inner, J)

    def dy_only(b):
        def f(q, y):
            x, y = both(q, y)
            return c.derivative((0, b), x, y)
        return f

    derivs = {(1, 0): d10, (0, 1): d01, (1, 1): d11, (2, 0): d20}
    for b in (2, 3):
        derivs[(0, b)] = dy_only(b)
    return CostOracle(name, n, fn, derivs, c.fd_step, params={"base": c.name, "anchor": yt.tolist()})


# ---------------------------------------------------------------------------
# c-segments
# ---------------------------------------------------------------------------

def c_segment(c: CostOracle, anchor, e0, e1, t, side="x", domain: DomainSpec | None = None):
    """Points of the c-segment from e0 to e1 with respect to ``anchor``.

    Side 'x' interpolates q = -D_y c(., anchor) linearly, side 'y'
    interpolates p = -D_x c(anchor, .).  With a ``domain`` a point outside
    it raises SegmentDomainError.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    e0, e1 = np.asarray(e0, float), np.asarray(e1, float)
    d0 = dual_coords(c, e0, anchor, side)
    d1 = dual_coords(c, e1, anchor, side)
    tgt = (1 - t)[:, None] * d0 + t[:, None] * d1
    guess = (1 - t)[:, None] * e0 + t[:, None] * e1
    z, _ = invert_dual(c, tgt, anchor, side, guess=guess)
    z[t == 0] = e0
    z[t == 1] = e1
    if domain is not None:
        bad = ~domain.contains(z)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise SegmentDomainError("c-segment leaves the domain",
                                     witness={"anchor": np.asarray(anchor).tolist(),
                                              "endpoints": [e0.tolist(), e1.tolist()],
                                              "t": float(t[k]), "point": z[k].tolist()})
    return z


# ---------------------------------------------------------------------------
# c-convexity of domains
# ---------------------------------------------------------------------------

@dataclass
class ConvexityReport:
    convex: bool
    side: str
    strong: bool | None = None
    min_curvature: float | None = None
    max_radius: float | None = None
    violations: list = field(default_factory=list)
    anchors: int = 0
    resolution: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _image_curvature(img, centroid, k=12):
    """Minimum principal curvature of a sampled closed convex hypersurface.

    Local quadric fit in a PCA frame around each sample.
    """
    n = img.shape[1]
    tree = spatial.cKDTree(img)
    _, nn = tree.query(img, k=min(k + 1, len(img)))
    kmin = np.inf
    for i, idx in enumerate(nn):
        P = img[idx] - img[i]
        w, vecs = np.linalg.eigh(P.T @ P)
        nu = vecs[:, 0]
        if nu @ (img[i] - centroid) < 0:
            nu = -nu
        T = vecs[:, 1:]
        uu = P @ T
        hh = P @ nu
        cols = [np.ones(len(P))] + [uu[:, j] for j in range(n - 1)]
        quad = []
        for a in range(n - 1):
            for b in range(a, n - 1):
                cols.append(uu[:, a] * uu[:, b] * (0.5 if a == b else 1.0))
                quad.append((a, b))
        coef = np.linalg.lstsq(np.stack(cols, axis=1), hh, rcond=None)[0]
        H = np.zeros((n - 1, n - 1))
        for (a, b), v in zip(quad, coef[n:]):
            H[a, b] = H[b, a] = v
        g = coef[1:n]
        kappa = np.linalg.eigvalsh(-H) / (1 + g @ g) ** 1.5
        kmin = min(kmin, float(kappa.min()))
    return kmin


def check_c_convexity(c: CostOracle, U: DomainSpec, V: DomainSpec, side="x", strong=False,
                      anchors=8, resolution=None, interior=2000, pairs=2000, seed=0) -> ConvexityReport:
    """Test that the dual images of a domain are convex for sampled anchors.

    Side 'x' tests U against anchors in V (images -D_y c(U, ytilde)); side
    'y' tests V against anchors in U.  Two tests per anchor: interior images
    inside the hull of the boundary images, and midpoints of image pairs
    having a preimage in the domain.  ``strong`` also estimates the minimum
    principal curvature of the image boundary.
    """
    dom, other = (U, V) if side == "x" else (V, U)
    n = c.dim
    M = resolution or (1024 if n == 2 else 8000)
    rng = np.random.default_rng(seed)
    anc = other.qmc_sample(anchors)
    bd = dom.boundary_sample(M)
    inner = dom.qmc_sample(interior)
    rep = ConvexityReport(convex=True, side=side, anchors=len(anc), resolution=M)
    kmin = np.inf
    for a in anc:
        img_b = dual_coords(c, bd, a, side)
        img_i = dual_coords(c, inner, a, side)
        try:
            hull = spatial.ConvexHull(img_b)
        except QhullError:
            rep.convex = False
            rep.violations.append({"anchor": a.tolist(), "kind": "degenerate-image"})
            continue
        diam = float(np.ptp(img_b, axis=0).max())
        area = hull.area if n > 2 else hull.area
        spacing = (area / M) ** (1.0 / (n - 1))
        tol = spacing ** 2 / max(diam, 1e-300) + 1e-9 * diam
        sd = img_i @ hull.equations[:, :n].T + hull.equations[:, n]
        out = np.flatnonzero(sd.max(axis=1) > tol)
        if len(out):
            rep.convex = False
            rep.violations.append({"anchor": a.tolist(), "kind": "image-outside-hull",
                                   "point": inner[out[0]].tolist(),
                                   "excess": float(sd[out[0]].max())})
        allimg = np.concatenate([img_b, img_i])
        allpts = np.concatenate([bd, inner])
        i = rng.integers(0, len(allimg), pairs)
        j = rng.integers(0, len(allimg), pairs)
        mid = 0.5 * (allimg[i] + allimg[j])
        guess = 0.5 * (allpts[i] + allpts[j])
        z, ok = invert_dual(c, mid, a, side, guess=guess, strict=False)
        inside = np.zeros(len(z), dtype=bool)
        inside[ok] = dom.contains(z[ok])
        if not inside.all():
            k = int(np.flatnonzero(~inside)[0])
            rep.convex = False
            rep.violations.append({"anchor": a.tolist(), "kind": "midpoint-preimage-outside",
                                   "endpoints": [allpts[i[k]].tolist(), allpts[j[k]].tolist()],
                                   "preimage": z[k].tolist() if ok[k] else None})
        if strong:
            kmin = min(kmin, _image_curvature(img_b, img_i.mean(axis=0)))
    if strong:
        rep.min_curvature = float(kmin)
        rep.max_radius = float(1.0 / kmin) if kmin > 0 else math.inf
        rep.strong = bool(rep.convex and kmin > 0)
    return rep


# ---------------------------------------------------------------------------
# Affine maps and convex bodies
# ---------------------------------------------------------------------------

class AffineMap:
    """x -> M x + t."""

    def __init__(self, matrix, shift=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        n = self.matrix.shape[0]
        self.shift = np.zeros(n) if shift is None else np.asarray(shift, dtype=float)
        self.dim = n

    def __repr__(self):
        return f"AffineMap(det={self.det:.4g})"

    def __call__(self, x):
        return np.asarray(x, float) @ self.matrix.T + self.shift

    @property
    def det(self):
        return float(np.linalg.det(self.matrix))

    def inverse(self):
        Mi = np.linalg.inv(self.matrix)
        return AffineMap(Mi, -Mi @ self.shift)

    def compose(self, other: "AffineMap") -> "AffineMap":
        """self o other."""
        return AffineMap(self.matrix @ other.matrix, self.matrix @ other.shift + self.shift)

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "shift": self.shift.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["matrix"], d["shift"])


class ConvexBody:
    """Convex hull of a point set, with its facet inequalities."""

    def __init__(self, vertices=None, A=None, b=None):
        if vertices is not None:
            pts = np.atleast_2d(np.asarray(vertices, dtype=float))
            try:
                hull = spatial.ConvexHull(pts)
            except QhullError as exc:
                raise DegenerateBodyError(f"flat or degenerate body: {exc}".splitlines()[0])
            self.vertices = pts[hull.vertices]
            eq = hull.equations
            self._hull = hull
        else:
            P = Polytope(A, b)
            self.vertices = P.vertices
            self._hull = spatial.ConvexHull(self.vertices)
            eq = self._hull.equations
        self.dim = self.vertices.shape[1]
        self.A = eq[:, :-1]
        self.b = -eq[:, -1]
        self._volume = float(self._hull.volume)
        diam = float(np.ptp(self.vertices, axis=0).max())
        if self._volume <= 1e-12 * diam ** self.dim:
            raise DegenerateBodyError("body has (numerically) zero volume")

    def __repr__(self):
        return f"ConvexBody({len(self.vertices)} vertices, vol={self._volume:.4g})"

    def volume(self):
        return self._volume

    @property
    def diameter(self):
        V = self.vertices
        if len(V) > 2000:
            return float(np.ptp(V, axis=0).max() * math.sqrt(self.dim))
        return float(spatial.distance.pdist(V).max())

    def barycenter(self):
        tri = spatial.Delaunay(self.vertices)
        S = self.vertices[tri.simplices]
        w = np.abs(np.linalg.det(S[:, 1:] - S[:, :1]))
        return (w[:, None] * S.mean(axis=1)).sum(axis=0) / w.sum()

    def contains(self, pts, tol=1e-9):
        pts = np.asarray(pts, float)
        return np.all(pts @ self.A.T - self.b <= tol, axis=-1)

    def interior_distance(self, pts):
        pts = np.asarray(pts, float)
        return (self.b - pts @ self.A.T).min(axis=-1)

    def support(self, d):
        return (np.atleast_2d(d) @ self.vertices.T).max(axis=-1)

    def transform(self, L: AffineMap) -> "ConvexBody":
        return ConvexBody(vertices=L(self.vertices))

    def to_dict(self):
        return {"vertices": self.vertices.tolist()}


# ---------------------------------------------------------------------------
# John ellipsoid
# ---------------------------------------------------------------------------

@dataclass
class JohnResult:
    L: AffineMap
    alpha: float
    inner_margin: float
    outer_margin: float
    method: str
    meta: dict = field(default_factory=dict)


def _sym_basis(n):
    out = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            out.append(E)
    return np.array(out)


def _mvie(A, b, d0, r0, max_newton=400, gap=1e-12):
    """Maximum-volume inscribed ellipsoid {B w + d : |w| <= 1} of {A x <= b}
    by a log-barrier Newton method in (vech B, d)."""
    m, n = A.shape
    S = _sym_basis(n)
    p = len(S)
    J = np.einsum("kab,ib->iak", S, A)  # J[i] (n x p): theta -> B a_i
    theta = np.array([0.5 * r0 if np.count_nonzero(E) == 1 else 0.0 for E in S])
    d = np.array(d0, dtype=float)
    t = 1.0
    newton = 0

    def slack(th, dd):
        r = np.einsum("iak,k->ia", J, th)
        nr = np.linalg.norm(r, axis=1)
        return b - A @ dd - nr, r, nr

    def phi(th, dd, t):
        B = np.einsum("k,kab->ab", th, S)
        try:
            Lc = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            return np.inf
        s, _, _ = slack(th, dd)
        if s.min() <= 0:
            return np.inf
        return -t * 2 * np.log(np.diag(Lc)).sum() - np.log(s).sum()

    while m / t > gap and newton < max_newton:
        for _ in range(60):
            B = np.einsum("k,kab->ab", theta, S)
            Bi = np.linalg.inv(B)
            s, r, nr = slack(theta, d)
            rhat = r / nr[:, None]
            gi = np.einsum("iak,ia->ik", J, rhat)
            g_th = -t * np.einsum("ab,kba->k", Bi, S) + (gi / s[:, None]).sum(axis=0)
            g_d = (A / s[:, None]).sum(axis=0)
            BiS = np.einsum("ab,kbc->kac", Bi, S)
            H_tt = t * np.einsum("kac,lca->kl", BiS, BiS)
            H_tt += np.einsum("ik,il->kl", gi / s[:, None], gi / s[:, None])
            P = np.eye(n)[None] - np.einsum("ia,ib->iab", rhat, rhat)
            H_tt += np.einsum("iak,iab,ibl->kl", J, P / (nr * s)[:, None, None], J)
            H_td = np.einsum("ik,ia->ka", gi / s[:, None] ** 2 * s[:, None], A / s[:, None])
            H_dd = np.einsum("ia,ib->ab", A / s[:, None], A / s[:, None])
            H = np.block([[H_tt, H_td], [H_td.T, H_dd]])
            g = np.concatenate([g_th, g_d])
            step = -np.linalg.solve(H + 1e-14 * np.trace(H) * np.eye(len(H)), g)
            dec = -g @ step
            newton += 1
            if dec / 2 < 1e-12:
                break
            f0 = phi(theta, d, t)
            tau = 1.0
            while tau > 1e-12:
                f1 = phi(theta + tau * step[:p], d + tau * step[p:], t)
                if f1 <= f0 - 0.25 * tau * dec:
                    break
                tau *= 0.5
            theta = theta + tau * step[:p]
            d = d + tau * step[p:]
            if newton >= max_newton:
                break
        t *= 8.0
    B = np.einsum("k,kab->ab", theta, S)
    return B, d, {"newton_iterations": newton, "gap": m / t}


def _mvee(V, tol=1e-12, max_iter=20000):
    """Minimum-volume enclosing ellipsoid of points (Khachiyan/Todd-Yildirim)."""
    N, n = V.shape
    Q = np.hstack([V, np.ones((N, 1))]).T
    w = np.full(N, 1.0 / N)
    for _ in range(max_iter):
        X = (Q * w) @ Q.T
        Mv = np.einsum("ij,ji->i", Q.T @ np.linalg.inv(X), Q)
        j = int(np.argmax(Mv))
        mx = Mv[j]
        step = (mx - n - 1) / ((n + 1) * (mx - 1))
        if step < tol:
            break
        w = (1 - step) * w
        w[j] += step
    cen = V.T @ w
    Cov = (V - cen).T @ ((V - cen) * w[:, None])
    # E = {x : (x-c)^T (Cov n)^{-1} (x-c) <= 1} ; B = sqrtm(n Cov)
    ev, U = np.linalg.eigh(n * Cov)
    B = U @ np.diag(np.sqrt(np.clip(ev, 0, None))) @ U.T
    return B, cen


def _certify(K: ConvexBody, B, d, sphere_samples):
    """alpha range [rho/n, s_in] for L(x) = alpha^{-1} B^{-1}(x - d)."""
    n = K.dim
    Bi = np.linalg.inv(B)
    s_in = float(((K.b - K.A @ d) / np.linalg.norm(K.A @ B, axis=1)).min())
    rho = float(np.linalg.norm((K.vertices - d) @ Bi.T, axis=1).max())
    return s_in, rho


def john_ellipsoid(K: ConvexBody, sphere_samples=10000, seed=0) -> JohnResult:
    """Affine L with B_1 contained in L(K) contained in B_n.

    Both a barrier-method inscribed ellipsoid and a minimum enclosing
    ellipsoid are computed; the one with the wider certification interval
    is returned with alpha at the geometric midpoint.
    """
    n = K.dim
    cands = []
    try:
        ctr = K.barycenter()
        r0 = float((K.b - K.A @ ctr).min())
        B, d, info = _mvie(K.A, K.b, ctr, r0)
        cands.append(("inscribed", B, d, info))
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        log.debug("inscribed ellipsoid failed: %s", exc)
    try:
        B, d = _mvee(K.vertices)
        cands.append(("enclosing", B, d, {}))
    except np.linalg.LinAlgError as exc:
        log.debug("enclosing ellipsoid failed: %s", exc)
    best = None
    for name, B, d, info in cands:
        s_in, rho = _certify(K, B, d, sphere_samples)
        lo, hi = rho / n, s_in
        margin = math.log(hi / lo) if lo > 0 and hi > 0 else -math.inf
        if best is None or margin > best[0]:
            best = (margin, name, B, d, lo, hi, info)
    # simplices are extremal: the interval collapses to a point up to roundoff
    if best is None or not best[0] > -1e-10:
        raise DegenerateBodyError("no certified John ellipsoid found")
    margin, name, B, d, lo, hi, info = best
    alpha = math.sqrt(lo * hi)
    Linv = AffineMap(alpha * B, d)  # w -> alpha B w + d
    L = Linv.inverse()
    return JohnResult(L=L, alpha=alpha, inner_margin=hi / alpha - 1.0,
                      outer_margin=1.0 - lo / alpha, method=name,
                      meta={**info, "interval": [lo, hi]})


def john_certificate(K: ConvexBody, L: AffineMap, tol=1e-9, sphere_samples=10000, seed=0) -> dict:
    """Check B_1 inside L(K) inside B_n on vertices and sphere samples."""
    n = K.dim
    img = L(K.vertices)
    outer = float(np.linalg.norm(img, axis=1).max())
    LK = K.transform(L)
    rng = np.random.default_rng(seed)
    sph = rng.standard_normal((sphere_samples, n))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    inner_slack = float((LK.b - sph @ LK.A.T).min())
    # exact inner test: support distance of facets from the origin
    facet_dist = float((LK.b / np.linalg.norm(LK.A, axis=1)).min())
    return {"outer_radius": outer, "outer_ok": outer <= n + tol,
            "inner_facet_distance": facet_dist, "inner_ok": facet_dist >= 1 - tol,
            "sphere_min_slack": inner_slack, "samples": sphere_samples}


# ---------------------------------------------------------------------------
# Renormalisation
# ---------------------------------------------------------------------------

def _contract(T, M, a, b):
    """Contract the first ``a`` derivative axes with M (x-side) and the next
    ``b`` with M^T (y-side); T has layout (..., x-axes, y-axes)."""
    nb = T.ndim - a - b
    for k in range(a):
        T = np.moveaxis(np.tensordot(T, M, axes=([nb + k], [0])), -1, nb + k)
    for k in range(b):
        T = np.moveaxis(np.tensordot(T, M.T, axes=([nb + a + k], [0])), -1, nb + a + k)
    return T


class RenormalizedCost(CostOracle):
    """c*(q, y) = s c~(L q, M^T y) with s = |det M|^{-2/n}, M the linear part of L."""

    def __init__(self, base: CostOracle, L: AffineMap):
        n = base.dim
        self.base = base
        self.L = L
        M = L.matrix
        self.scale = abs(float(np.linalg.det(M))) ** (-2.0 / n)
        s = self.scale

        def fn(q, y):
            return s * base(L(q), np.asarray(y, float) @ M)

        def make(order):
            a, bb = order

            def f(q, y):
                T = base.derivative(order, L(q), np.asarray(y, float) @ M)
                return s * _contract(T, M, a, bb)
            return f

        derivs = {o: make(o) for o in _all_orders()}
        bl = base.bilinear
        structure = None
        if bl is not None:
            Phi = s * M.T @ bl.Phi @ M.T
            d = L.shift
            off = s * M.T @ bl.offset if bl.offset is not None else np.zeros(n)

            def bstar(y):
                z = np.asarray(y, float) @ M
                return s * np.asarray(bl.b(z)) - s * (z @ bl.Phi.T + (bl.offset if bl.offset is not None else 0)) @ d

            def gbstar(y):
                z = np.asarray(y, float) @ M
                return s * np.asarray(bl.grad_b(z)) @ M.T - s * d @ bl.Phi @ M.T

            alpha = None if bl.alpha is None else s * M.T @ bl.alpha
            structure = BilinearStructure(Phi=Phi, offset=off, b=bstar, grad_b=gbstar,
                                          alpha=alpha, a0=0.0)
        super().__init__(f"{base.name}*", n, fn, derivs, base.fd_step,
                         params={"base": base.name, "scale": s}, bilinear=structure)


def renormalize(obj, L: AffineMap, base_cost: CostOracle | None = None):
    """Transport an object through the normalising map L.

    Potentials go to q -> s u(L q) with atoms y* = M^{-T} y and weights s v;
    costs to RenormalizedCost; domains and bodies to their preimages
    under L (L maps normalised coordinates to chart coordinates).
    """
    if isinstance(obj, SemidiscretePotential):
        rc = RenormalizedCost(obj.cost, L)
        s = rc.scale
        Mi = np.linalg.inv(L.matrix)
        atoms = obj.atoms @ Mi  # rows y^T M^{-1} = (M^{-T} y)^T
        dom = AffineImageDomain(obj.domain, Mi, -Mi @ L.shift) if obj.domain is not None else None
        return SemidiscretePotential(rc, atoms, s * obj.weights, domain=dom,
                                     meta={"renormalized": L.to_dict(), "scale": s})
    if isinstance(obj, SmoothPotential):
        M = L.matrix
        s = abs(float(np.linalg.det(M))) ** (-2.0 / obj.dim)
        rc = RenormalizedCost(obj.cost, L) if obj.cost is not None else None
        return SmoothPotential(lambda q: s * obj.value(L(q)),
                               lambda q: s * obj.grad(L(q)) @ M,
                               lambda q: s * np.einsum("ai,...ab,bj->...ij", M, obj.hess(L(q)), M),
                               obj.dim, rc, None, obj.name + "*")
    if isinstance(obj, CostOracle):
        return RenormalizedCost(obj, L)
    if isinstance(obj, ConvexBody):
        return obj.transform(L.inverse())
    if isinstance(obj, DomainSpec):
        Li = L.inverse()
        return AffineImageDomain(obj, Li.matrix, Li.shift)
    raise TypeError(f"cannot renormalize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Slices and projections
# ---------------------------------------------------------------------------

class EmptySliceError(ValueError):
    pass


def _poly_volume(A, b, dim):
    """Volume of {z : A z <= b} in R^dim (dim 1 handled as an interval)."""
    if dim == 1:
        a = A[:, 0]
        lo = np.max(b[a < 0] / a[a < 0]) if np.any(a < 0) else -np.inf
        hi = np.min(b[a > 0] / a[a > 0]) if np.any(a > 0) else np.inf
        if np.any((a == 0) & (b < 0)):
            return 0.0
        return float(max(hi - lo, 0.0))
    P = Polytope(A, b)
    try:
        return float(P.volume())
    except (QhullError, ValueError):
        return 0.0


class SliceRatioMonitor:
    """Running minimum of slice/projection ratios across calls."""

    def __init__(self):
        self.minimum = math.inf
        self.calls = 0

    def update(self, r):
        self.calls += 1
        self.minimum = min(self.minimum, r)
        return self.minimum


def slice_projection_ratio(Z: ConvexBody, split, slice_anchor, monitor: SliceRatioMonitor | None = None):
    """vol(Z) / (H^{n'}(slice) * H^{n''}(projection)).

    Coordinates are split as (x', x'') with x' the first n' entries; the slice
    is Z cap {x'' = anchor''} and the projection is onto the x'' coordinates.
    Returns (ratio, running_minimum).
    """
    n1, n2 = (int(t) for t in split)
    n = Z.dim
    if n1 + n2 != n or n1 < 1 or n2 < 1:
        raise ValueError(f"split {split} does not match dimension {n}")
    a2 = np.asarray(slice_anchor, float)
    a2 = a2[n1:] if a2.size == n else a2
    A1, A2 = Z.A[:, :n1], Z.A[:, n1:]
    bs = Z.b - A2 @ a2
    sl = _poly_volume(A1, bs, n1)
    if not sl > 0:
        raise EmptySliceError("slice is empty or flat")
    proj = Z.vertices[:, n1:]
    pr = float(np.ptp(proj[:, 0])) if n2 == 1 else float(spatial.ConvexHull(proj).volume)
    r = Z.volume() / (sl * pr)
    run = monitor.update(r) if monitor is not None else r
    return r, run


# ---------------------------------------------------------------------------
# Convexity tests for modified potentials
# ---------------------------------------------------------------------------

def _pairs_in(domain, count, rng):
    q0 = domain.sample(count, rng)
    q1 = domain.sample(count, rng)
    return q0, q1


def midpoint_convexity(f, domain: DomainSpec, triples=10_000, rng=None, scale=None):
    """Largest defect f((q0+q1)/2) - (f(q0)+f(q1))/2 over random pairs."""
    rng = np.random.default_rng(rng)
    q0, q1 = _pairs_in(domain, triples, rng)
    mid = 0.5 * (q0 + q1)
    ok = domain.contains(mid)
    q0, q1, mid = q0[ok], q1[ok], mid[ok]
    f0, f1, fm = f(q0), f(q1), f(mid)
    d = fm - 0.5 * (f0 + f1)
    k = int(np.argmax(d))
    sc = float(np.abs(np.concatenate([f0, f1])).max()) if scale is None else scale
    return {"tests": int(len(d)), "max_defect": float(d[k]), "scale": sc,
            "witness": {"q0": q0[k].tolist(), "q1": q1[k].tolist()}}


def sublevel_convexity(f, domain: DomainSpec, pairs=10_000, rng=None):
    """Largest f(midpoint) - max(f(q0), f(q1)); <= 0 for quasi-convex f."""
    rng = np.random.default_rng(rng)
    q0, q1 = _pairs_in(domain, pairs, rng)
    mid = 0.5 * (q0 + q1)
    ok = domain.contains(mid)
    q0, q1, mid = q0[ok], q1[ok], mid[ok]
    f0, f1, fm = f(q0), f(q1), f(mid)
    d = fm - np.maximum(f0, f1)
    k = int(np.argmax(d))
    return {"tests": int(len(d)), "max_defect": float(d[k]),
            "scale": float(np.abs(np.concatenate([f0, f1])).max()),
            "witness": {"q0": q0[k].tolist(), "q1": q1[k].tolist()}}
