"""Sections of modified potentials, c-cones and the Alexandrov-type estimates."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, spatial
from scipy.spatial import QhullError

from .cost_kernel import Ball, CostOracle, DomainSpec, Polytope, builtin_cost
from .geometry import ChartInversionError, ConvexBody, CoordinateChart, DegenerateBodyError, invert_dual
from .potential import (MeasureEstimate, PotentialError, SemidiscretePotential,
                        SmoothPotential, ma_measure)

log = logging.getLogger(__name__)


class SectionError(ValueError):
    pass


def unit_ball_volume(n):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def _directions(n, count):
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - math.sqrt(5)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class Section:
    """Sublevel set Z = {u~ <= level} in chart coordinates."""

    u_tilde: object
    level: float
    anchor: np.ndarray
    Z: ConvexBody
    boundary: np.ndarray
    leb: float
    normal: np.ndarray
    plane_plus: float
    plane_minus: float
    ell_plus: float
    vertex: np.ndarray
    inf_value: float
    cost: CostOracle
    chart: CoordinateChart | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.Z.dim

    @property
    def width(self):
        return self.plane_plus - self.plane_minus

    def f(self, q):
        """The section function u~ - level (zero on the boundary of Z)."""
        return np.asarray(self.u_tilde(np.asarray(q, float)), float) - self.level

    def plane_distance(self, q):
        """min distance of q to the two supporting planes."""
        h = np.asarray(q, float) @ self.normal
        return np.minimum(self.plane_plus - h, h - self.plane_minus)

    def to_dict(self):
        return {"level": self.level, "anchor": self.anchor.tolist(), "leb": self.leb,
                "hull_volume": self.Z.volume(), "normal": self.normal.tolist(),
                "planes": [self.plane_minus, self.plane_plus], "ell_plus": self.ell_plus,
                "vertex": self.vertex.tolist(), "inf_value": self.inf_value,
                "boundary_points": int(len(self.boundary)), "meta": self.meta}


def _ray_boundary(f, anchor, dirs, level, r0, inside, max_doublings=60, iters=60):
    """Distance along each ray from anchor to {f = level} by bisection."""
    K = len(dirs)
    lo = np.zeros(K)
    hi = np.full(K, r0)
    for _ in range(max_doublings):
        pts = anchor + hi[:, None] * dirs
        ok = inside(pts)
        if not ok.all():
            k = int(np.flatnonzero(~ok)[0])
            if f(pts[k:k + 1])[0] <= level:
                raise SectionError(f"section reaches the chart boundary at {pts[k].tolist()}")
        vals = np.where(ok, f(np.where(ok[:, None], pts, anchor)), np.inf)
        grow = vals <= level
        if not grow.any():
            break
        lo = np.where(grow, hi, lo)
        hi = np.where(grow, 2 * hi, hi)
    else:
        raise SectionError("section is unbounded")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        vals = f(anchor + mid[:, None] * dirs)
        below = vals <= level
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _chord_length(Z: ConvexBody, e, T, w):
    p = T @ w
    ae = Z.A @ e
    slack = Z.b - Z.A @ p
    pos, neg = ae > 1e-14, ae < -1e-14
    if np.any((~pos & ~neg) & (slack < 0)):
        return 0.0
    hi = np.min(slack[pos] / ae[pos])
    lo = np.max(slack[neg] / ae[neg])
    return max(hi - lo, 0.0)


def _orth_basis(e):
    e = np.asarray(e, float)
    e = e / np.linalg.norm(e)
    # complete e to an orthonormal frame; T spans the complement
    Qm, _ = np.linalg.qr(np.column_stack([e, np.eye(e.size)]))
    return e, Qm[:, 1:e.size]


def max_chord(Z: ConvexBody, e):
    """Longest chord of Z parallel to e (concave in the base point)."""
    e, T = _orth_basis(e)
    proj = Z.vertices @ T
    neg = lambda w: -_chord_length(Z, e, T, np.atleast_1d(w))
    if T.shape[1] == 1:
        res = optimize.minimize_scalar(neg, bounds=(proj.min(), proj.max()), method="bounded",
                                       options={"xatol": 1e-12 * max(1.0, float(np.ptp(proj)))})
        best = -res.fun
    else:
        w0 = Z.barycenter() @ T
        res = optimize.minimize(neg, w0, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
        best = -res.fun
    # vertices are candidates too (the maximum can sit on a face)
    for v in proj:
        best = max(best, _chord_length(Z, e, T, v))
    return float(best)


def _polar_volume(radii, n):
    if n == 2:
        return float(0.5 * np.mean(radii ** 2) * 2 * np.pi)
    return float(np.mean(radii ** n) * n * unit_ball_volume(n) / n)


def extract_section(u, chart: CoordinateChart | None, anchor, level, direction=None,
                    resolution=None, cost: CostOracle | None = None) -> Section:
    """Sublevel set {u~ <= level} around ``anchor`` (chart coordinates).

    With a chart and a potential of the chart's base cost, u~ is the
    modified potential.  Without a chart ``u`` is taken to be already in
    chart coordinates (``cost`` then names its modified cost; default the
    bilinear cost).  Z is the hull of ray-bisection boundary points; the
    planes are orthogonal to ``direction`` or to the longest John axis.
    """
    anchor = np.asarray(anchor, float)
    n = anchor.size
    if chart is not None and isinstance(u, SemidiscretePotential) and u.cost is chart.cost:
        ut = chart.modify(u)
        ccost = ut.cost
        inside = chart.contains
    else:
        ut = u
        ccost = cost or getattr(u, "cost", None) or builtin_cost("bilinear", n)
        dom = getattr(u, "domain", None)
        if chart is not None:
            inside = chart.contains
        elif dom is not None:
            inside = dom.contains
        else:
            inside = lambda q: np.ones(len(q), dtype=bool)
    f = lambda q: np.asarray(ut(q), float)
    if not f(anchor[None])[0] < level:
        raise SectionError("anchor is not inside the open sublevel set")
    M = resolution or (2048 if n == 2 else 6000)
    dirs = _directions(n, M)
    r0 = 1e-3 * (1.0 + float(np.linalg.norm(anchor)))
    radii = _ray_boundary(f, anchor, dirs, level, r0, inside)
    bpts = anchor + radii[:, None] * dirs
    try:
        Z = ConvexBody(vertices=bpts)
    except DegenerateBodyError as exc:
        raise SectionError(f"degenerate section: {exc}")
    leb = _polar_volume(radii, n)
    # vertex: minimiser of u~ on Z
    s = np.linspace(0.0, 1.0, 9)[:, None, None]
    cand = (anchor + s * (bpts[:: max(1, M // 256)] - anchor)).reshape(-1, n)
    fc = f(cand)
    q0 = cand[int(np.argmin(fc))]
    def obj(q):
        # the simplex may step outside the chart image
        try:
            return float(f(q[None])[0]) if inside(q[None])[0] else math.inf
        except ChartInversionError:
            return math.inf

    res = optimize.minimize(obj, q0, method="Nelder-Mead",
                            options={"xatol": 1e-13, "fatol": 1e-16, "maxiter": 20000})
    vertex = res.x if res.fun <= fc.min() else q0
    inf_value = float(f(vertex[None])[0]) - level
    if direction is None:
        from .geometry import john_ellipsoid
        J = john_ellipsoid(Z)
        B = np.linalg.inv(J.L.matrix)
        w, V = np.linalg.eigh(B @ B.T)
        e = V[:, -1]
    else:
        e = np.asarray(direction, float)
    e = e / np.linalg.norm(e)
    hts = Z.vertices @ e
    ell = max_chord(Z, e)
    return Section(u_tilde=ut, level=float(level), anchor=anchor, Z=Z, boundary=bpts, leb=leb,
                   normal=e, plane_plus=float(hts.max()), plane_minus=float(hts.min()),
                   ell_plus=ell, vertex=vertex, inf_value=inf_value, cost=ccost, chart=chart,
                   meta={"resolution": M})


# ---------------------------------------------------------------------------
# c-cones
# ---------------------------------------------------------------------------

@dataclass
class CCone:
    section: Section
    vertex: np.ndarray
    height: float
    potential: SemidiscretePotential
    subgradient_volume: float
    meta: dict = field(default_factory=dict)

    def __call__(self, q):
        return self.potential(q)


def _pinned_targets(ct: CostOracle, sec: Section, qv, H, ytilde, V, count):
    """Targets whose cone mountain vanishes at a boundary point of Z.

    For z on the boundary with outward normal nu, y(t) solves
    -D_q c~(z, y) = t nu and t is bisected so that the mountain is 0 at z.
    """
    Z = sec.Z
    idx = np.linspace(0, len(sec.boundary) - 1, min(count, len(sec.boundary))).astype(int)
    zs = sec.boundary[idx]
    # outward normal from the closest facet
    sd = zs @ Z.A.T - Z.b
    nu = Z.A[np.argmax(sd, axis=1)]

    def mountain(y, z):
        return -ct(z, y) + ct(qv, y) + H

    lo = np.zeros(len(zs))
    hi = np.full(len(zs), 1.0)
    ok = np.ones(len(zs), dtype=bool)
    for _ in range(40):
        y, good = invert_dual(ct, hi[:, None] * nu, zs, "y", guess=np.broadcast_to(ytilde, zs.shape), strict=False)
        m = np.where(good, mountain(y, zs), np.inf)
        grow = m < 0
        if not grow.any():
            break
        lo = np.where(grow, hi, lo)
        hi = np.where(grow, 2 * hi, hi)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        y, good = invert_dual(ct, mid[:, None] * nu, zs, "y", guess=np.broadcast_to(ytilde, zs.shape), strict=False)
        m = np.where(good, mountain(y, zs), np.inf)
        below = m <= 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    y, good = invert_dual(ct, lo[:, None] * nu, zs, "y", guess=np.broadcast_to(ytilde, zs.shape), strict=False)
    # curved mountains pinned at one sample can poke above 0 at neighbouring
    # samples; shrink t against the max over all boundary samples
    bd = sec.boundary

    def overshoot(yy):
        return (-ct(bd[:, None, :], yy[None]) + ct(qv, yy)[None] + H).max(axis=0)

    bad = np.flatnonzero(good & (overshoot(y) > 0))
    if len(bad):
        a, b = 0.5 * lo[bad], lo[bad].copy()
        for _ in range(30):
            mid = 0.5 * (a + b)
            yy, g2 = invert_dual(ct, mid[:, None] * nu[bad], zs[bad], "y", guess=y[bad], strict=False)
            below = g2 & (overshoot(yy) <= 0)
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
        yy, g2 = invert_dual(ct, a[:, None] * nu[bad], zs[bad], "y", guess=y[bad], strict=False)
        y[bad] = yy
        good[bad] = g2
        lo[bad] = a
    keep = good & (lo > 0)
    if V is not None:
        keep &= V.contains(y)
    return y[keep]


def build_c_cone(section: Section, V: DomainSpec | None = None, candidates=None,
                 resolution=None, pinned=None, tol=None, vertex=None, height=None) -> CCone:
    """The c~-cone generated by the section vertex and Z.

    Mountains -c~(q, y) + c~(qv, y) + H with H = u~(qv) - level are kept when
    they are <= 0 on the boundary samples of Z; the cone is their supremum
    (always including the flat mountain of ytilde).
    """
    sec = section
    ct = sec.cost
    n = sec.dim
    qv = sec.vertex if vertex is None else np.asarray(vertex, float)
    H = sec.inf_value if height is None else float(height)
    if not H < 0:
        raise SectionError("cone height must be negative")
    ytilde = np.asarray(sec.chart.anchor if sec.chart is not None else np.zeros(n), float)
    cands = [ytilde[None]]
    if candidates is not None:
        cands.append(np.atleast_2d(candidates))
    elif V is not None:
        cands.append(V.qmc_sample(resolution or (4096 if n == 2 else 8192)))
    if pinned is None:
        pinned = 1024 if n == 2 else 4000
    if pinned:
        cands.append(_pinned_targets(ct, sec, qv, H, ytilde, V, pinned))
    Y = np.concatenate(cands)
    bd = sec.boundary
    scale = abs(H)
    tol = 1e-9 * scale if tol is None else tol
    # mountain values on the boundary, chunked over targets
    keep = np.zeros(len(Y), dtype=bool)
    for lo in range(0, len(Y), 512):
        Yc = Y[lo:lo + 512]
        m = -ct(bd[:, None, :], Yc[None]) + ct(qv, Yc)[None] + H
        keep[lo:lo + 512] = m.max(axis=0) <= tol
    keep[0] = True
    Yk = Y[keep]
    if len(Yk) == 1:
        warnings.warn("no admissible mountain besides the flat one", stacklevel=2)
    w = -ct(qv, Yk) - H
    pot = SemidiscretePotential(ct, Yk, w, meta={"cone": True})
    grads = -ct.dx(qv, Yk)
    try:
        sub_vol = float(spatial.ConvexHull(grads).volume)
    except (QhullError, ValueError):
        sub_vol = 0.0
    # post-conditions: value at the vertex, zero on the boundary
    hv = float(pot(qv[None])[0])
    hb = pot(bd)
    inner = sec.anchor + 0.9 * (bd - sec.anchor)
    meta = {"candidates": int(len(Y)), "kept": int(len(Yk)),
            "vertex_value_error": abs(hv - H), "boundary_max_abs": float(np.abs(hb).max()),
            "min_over_Z_minus_height": float(pot(inner).min() - H), "tol": tol}
    return CCone(section=sec, vertex=qv, height=H, potential=pot,
                 subgradient_volume=sub_vol, meta=meta)


def cone_inclusion_check(cone: CCone, u_tilde: SemidiscretePotential, domain: DomainSpec, grid=4000):
    """Targets supporting the cone at its vertex have contact points in Z."""
    Y = cone.potential.atoms
    q = domain.qmc_sample(grid)
    fu = u_tilde(q)
    ct = cone.section.cost
    misses = []
    for y in Y:
        g = fu + ct(q, y)
        x = q[int(np.argmin(g))]
        if not cone.section.Z.contains(x[None], tol=1e-6 * cone.section.Z.diameter)[0]:
            misses.append({"y": y.tolist(), "contact": x.tolist()})
    return {"targets": int(len(Y)), "misses": misses, "passed": not misses}


def slope_estimate_check(ct: CostOracle, Q: DomainSpec, V: DomainSpec, eps_c, samples=1000, seed=0):
    """|-D_q c~(q,y) + D_q c~(q',y)| <= |q - q'| |D_q c~(q',y)| / eps_c."""
    rng = np.random.default_rng(seed)
    q = Q.sample(samples, rng)
    qv = Q.sample(samples, rng)
    y = V.sample(samples, rng)
    lhs = np.linalg.norm(-ct.dx(q, y) + ct.dx(qv, y), axis=1)
    rhs = np.linalg.norm(q - qv, axis=1) * np.linalg.norm(ct.dx(qv, y), axis=1) / eps_c
    ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1), 0.0)
    k = int(np.argmax(ratio))
    return {"samples": samples, "max_ratio": float(ratio[k]), "passed": bool(ratio.max() <= 1.0),
            "witness": {"q": q[k].tolist(), "q_vertex": qv[k].tolist(), "y": y[k].tolist()}}


# ---------------------------------------------------------------------------
# Estimates
# ---------------------------------------------------------------------------

def _renormalized(Z: ConvexBody, tol=1e-4):
    # polygonal sections lose ~ (pi/M)^2 against the inscribed ball
    n = Z.dim
    outer = float(np.linalg.norm(Z.vertices, axis=1).max())
    inner = float((Z.b / np.linalg.norm(Z.A, axis=1)).min())
    return outer <= n + tol and inner >= 1 - tol, inner, outer


def _ordinary_measure(u, region, slope_radius, mc_samples, rng, Zdom):
    n = region.dim
    if isinstance(u, CCone):
        u = u.potential
    if isinstance(u, SemidiscretePotential):
        w = SemidiscretePotential(u.cost, u.atoms, u.weights, domain=Zdom)
        try:
            return ma_measure(w, region, None, method="exact-cell", probe="ordinary")
        except PotentialError:
            box = (-slope_radius * np.ones(n), slope_radius * np.ones(n))
            return ma_measure(w, region, None, mc_samples, rng=rng, probe="ordinary", slope_box=box)
    if isinstance(u, SmoothPotential):
        return smooth_measure(u, region, mc_samples=mc_samples, rng=rng)
    raise TypeError("unsupported potential type")


def renormalize_section(section: Section, resolution=None) -> tuple[Section, object]:
    """Re-extract the section of u~* = s u~(L^{-1} .) with B_1 in Z* in B_n."""
    from .geometry import john_ellipsoid, renormalize
    J = john_ellipsoid(section.Z)
    Linv = J.L.inverse()
    u_star = renormalize(section.u_tilde, Linv)
    s = abs(float(np.linalg.det(Linv.matrix))) ** (-2.0 / section.dim)
    e = section.normal @ Linv.matrix
    sec = extract_section(u_star, None, J.L(section.anchor[None])[0], s * section.level,
                          direction=e, resolution=resolution or section.meta.get("resolution"),
                          cost=getattr(u_star, "cost", None))
    sec.meta["renormalization"] = {"scale": s, "john_method": J.method, "alpha": J.alpha}
    return sec, J


def alexandrov_upper(section: Section, t: float = 0.5, mc_samples=20000, rng=None,
                     require_renormalized=True) -> dict:
    """|du~*|(tZ*) against |inf u~*|^n / ((1 - t)^n Leb(Z*)).

    Every subgradient on tZ* has norm at most |inf|/(1 - t) when B_1 is in
    Z*; the empirical constant is the ratio of the two sides.
    """
    if not 0 < t < 1:
        raise ValueError("t must lie in (0, 1)")
    Z = section.Z
    n = Z.dim
    ok, inner, outer = _renormalized(Z)
    if require_renormalized and not ok:
        raise SectionError(f"section is not renormalized (inner {inner:.4g}, outer {outer:.4g})")
    inf_abs = abs(section.inf_value)
    slope_r = inf_abs / ((1 - t) * max(inner, 1e-300))
    tZ = ConvexBody(vertices=t * Z.vertices)
    Zdom = Polytope(Z.A, Z.b)
    est = _ordinary_measure(section.u_tilde, tZ, slope_r, mc_samples, rng, Zdom)
    rhs = inf_abs ** n / ((1 - t) ** n * section.leb)
    ball_bound = unit_ball_volume(n) * slope_r ** n
    return {"t": t, "measure": est.value, "std_error": est.std_error, "method": est.method,
            "inf_abs": inf_abs, "leb": section.leb, "rhs_without_constant": rhs,
            "empirical_C": est.value / rhs, "slope_ball_bound": ball_bound,
            "slope_bound_ok": bool(est.value <= ball_bound * (1 + 1e-9) + 3 * est.std_error),
            "renormalized": ok}


def section_estimate(section: Section, lam: float, gamma_plus: float = 1.0,
                     gamma_minus: float = 1.0, q_samples=2000, rng=None,
                     verified: bool = False) -> dict:
    """Empirical constants for the two-sided bound on |inf u~|^n / Leb(Z)^2
    and for the distance-to-plane bound at interior points."""
    n = section.dim
    ratio = abs(section.inf_value) ** n / section.leb ** 2
    C1 = ratio * gamma_minus / lam      # largest C1 with C1 lam / gamma- <= ratio
    C2 = ratio * lam / gamma_plus       # smallest C2 with ratio <= C2 gamma+ / lam
    rng = np.random.default_rng(rng)
    Zd = Polytope(section.Z.A, section.Z.b)
    q = Zd.sample(q_samples, rng)
    fq = np.minimum(section.f(q), 0.0)
    dist = np.maximum(section.plane_distance(q), 0.0)
    lhs = np.abs(fq) ** n / section.leb ** 2
    rhs = (gamma_plus / lam) * dist / section.ell_plus
    Cq = lhs / np.where(rhs > 0, rhs, np.inf)
    k = int(np.argmax(Cq))
    return {"ratio": ratio, "C1": C1, "C2": C2, "C_vardist": float(Cq[k]),
            "vardist_witness": q[k].tolist(), "lambda": lam, "gamma_plus": gamma_plus,
            "gamma_minus": gamma_minus, "conditional": not verified, "leb": section.leb,
            "inf_value": section.inf_value}


def c_cone_ma_lower(cone: CCone, eps_c: float = math.inf, C_guard: float = 10.0) -> dict:
    """Smallest C with |H|^n <= C (dist/ell) |dh|({qv}) Leb(Z)."""
    sec = cone.section
    n = sec.dim
    diam = sec.Z.diameter
    if not diam <= eps_c / C_guard:
        return {"skipped": True, "reason": f"diam(Z)={diam:.4g} exceeds eps_c/C={eps_c / C_guard:.4g}"}
    dist = float(sec.plane_distance(cone.vertex[None])[0])
    lhs = abs(cone.height) ** n
    rhs = dist / sec.ell_plus * cone.subgradient_volume * sec.leb
    return {"skipped": False, "lhs": lhs, "dist": dist, "ell_plus": sec.ell_plus,
            "subgradient_volume": cone.subgradient_volume, "leb": sec.leb,
            "empirical_C": lhs / rhs if rhs > 0 else math.inf}


# ---------------------------------------------------------------------------
# Smooth test potentials and MA vs c-MA
# ---------------------------------------------------------------------------

def smooth_test_potential(ct: CostOracle, q0, y0, eps=0.5, v0=0.0, name="eps-mountain"):
    """u~(q) = eps |q - q0|^2 - c~(q, y0) - v0."""
    q0 = np.asarray(q0, float)
    y0 = np.asarray(y0, float)
    n = q0.size

    def value(q):
        q = np.asarray(q, float)
        return eps * np.sum((q - q0) ** 2, axis=-1) - ct(q, y0) - v0

    def grad(q):
        q = np.asarray(q, float)
        return 2 * eps * (q - q0) - ct.dx(q, y0)

    def hess(q):
        q = np.asarray(q, float)
        return 2 * eps * np.eye(n) - ct.derivative((2, 0), q, y0)

    return SmoothPotential(value, grad, hess, n, cost=ct, name=name)


def _newton_solve(F, J, z0, iters=40, tol=1e-12):
    z = np.array(z0, float)
    Fz = F(z)
    for _ in range(iters):
        nrm = np.linalg.norm(Fz, axis=1)
        if np.all(nrm <= tol * (1 + np.abs(z).max())):
            break
        step = np.linalg.solve(J(z), -Fz[..., None])[..., 0]
        tau = np.ones(len(z))
        for _h in range(20):
            zt = z + tau[:, None] * step
            Ft = F(zt)
            good = np.linalg.norm(Ft, axis=1) < nrm
            if good.all():
                break
            tau = np.where(good, tau, 0.5 * tau)
        z = np.where(good[:, None], zt, z)
        Fz = np.where(good[:, None], Ft, Fz)
    return z, np.linalg.norm(Fz, axis=1) <= 1e-9 * (1 + np.abs(z).max())


def smooth_measure(u: SmoothPotential, region, probe="ordinary", mc_samples=20000, rng=None,
                   table=2000) -> MeasureEstimate:
    """Pushforward Monte-Carlo estimate of |du~|(region) or |d^c~ u~|(region).

    A slope (or target) box is fitted to the image of the region; each sample
    is mapped back by Newton from the nearest tabulated image point.
    """
    rng = np.random.default_rng(rng)
    n = u.dim
    big = _region_sampler(region, 1.1)
    qs = big(table)
    ct = u.cost
    if probe == "ordinary":
        img = u.grad(qs)
    else:
        img, _ = invert_dual(ct, u.grad(qs), qs, "y", strict=False)
    inner = _region_sampler(region, 1.0)(table)
    img_in = u.grad(inner) if probe == "ordinary" else invert_dual(ct, u.grad(inner), inner, "y", strict=False)[0]
    lo, hi = img_in.min(axis=0), img_in.max(axis=0)
    pad = 0.05 * (hi - lo) + 1e-12
    lo, hi = lo - pad, hi + pad
    P = lo + (hi - lo) * rng.random((mc_samples, n))
    vol = float(np.prod(hi - lo))
    tree = spatial.cKDTree(img)
    _, nn = tree.query(P)
    if probe == "ordinary":
        F = lambda q: u.grad(q) - P
        J = lambda q: u.hess(q)
    else:
        F = lambda q: u.grad(q) + ct.dx(q, P)
        J = lambda q: u.hess(q) + ct.derivative((2, 0), q, P)
    q, ok = _newton_solve(F, J, qs[nn])
    hits = np.zeros(mc_samples, dtype=bool)
    hits[ok] = region.contains(q[ok])
    p = hits.mean()
    return MeasureEstimate(vol * p, vol * math.sqrt(p * (1 - p) / mc_samples),
                           "monte-carlo-pushforward", mc_samples)


def _region_sampler(region, grow):
    if isinstance(region, Ball):
        B = Ball(region.center, region.radius * grow)
        return lambda k: B.qmc_sample(k)
    if isinstance(region, ConvexBody):
        c = region.barycenter()
        K = ConvexBody(vertices=c + grow * (region.vertices - c))
        P = Polytope(K.A, K.b)
        return lambda k: P.qmc_sample(k)
    return lambda k: region.qmc_sample(k)


def density_identity(u: SmoothPotential, region, points=200):
    """det(D^2u~ + D^2_qq c~)/|det D^2_qy c~| integrated over the region,
    to compare with the pushforward c-measure."""
    q = _region_sampler(region, 1.0)(points)
    ct = u.cost
    y, ok = invert_dual(ct, u.grad(q), q, "y", strict=False)
    A = u.hess(q) + ct.derivative((2, 0), q, y)
    dens = np.linalg.det(A) / np.abs(np.linalg.det(ct.dxy(q, y)))
    vol = region.volume()
    return {"integral": float(vol * dens[ok].mean()), "min_density": float(dens[ok].min()),
            "psd": bool(np.all(np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))[ok] > 0))}


def ma_dominates_cma(u_tilde, region: DomainSpec, gamma_minus: float, balls=100, radius=None,
                     mc_samples=8000, rng=None, V: DomainSpec | None = None, slack=0.03) -> dict:
    """Compare |d^c~ u~|(B) with gamma- |du~|(B) on sampled balls B in region."""
    rng = np.random.default_rng(rng)
    if isinstance(region, ConvexBody):
        region = Polytope(region.A, region.b)
    n = region.dim
    lo, hi = region.bbox()
    r = radius or 0.08 * float(np.min(hi - lo))
    centres = region.sample(balls * 20, rng)
    centres = centres[region.interior_distance(centres) >= r][:balls]
    rows = []
    worst = -math.inf
    for ctr in centres:
        B = Ball(ctr, r)
        if isinstance(u_tilde, SmoothPotential):
            cm = smooth_measure(u_tilde, B, "c", mc_samples, rng)
            om = smooth_measure(u_tilde, B, "ordinary", mc_samples, rng)
        else:
            cm = ma_measure(u_tilde, B, V, mc_samples, rng=rng)
            om = ma_measure(u_tilde, B, V, mc_samples, rng=rng, probe="ordinary")
        ratio = cm.value / om.value if om.value > 0 else math.inf
        err = math.hypot(cm.std_error, om.std_error)
        row = {"center": ctr.tolist(), "c_measure": cm.value, "c_std": cm.std_error,
               "ordinary": om.value, "ordinary_std": om.std_error, "ratio": ratio,
               "combined_std": err}
        rows.append(row)
        worst = max(worst, ratio / gamma_minus)
    return {"balls": len(rows), "radius": r, "gamma_minus": gamma_minus,
            "max_ratio_over_gamma": worst, "passed": bool(worst <= 1 + slack), "rows": rows}
