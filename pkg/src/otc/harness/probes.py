"""Empirical probes: maximum principles, local-to-global, boundary mixing,
contact sets and the continuity modulus of semidiscrete maps."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import spatial

from ..cost_kernel import Ball, CostOracle, DomainSpec, DomainUnion, builtin_cost
from ..geometry import SegmentDomainError, invert_dual
from ..potential import (BoundsSpec, SemidiscretePotential, _domain_constraints, _polish,
                         c_subdifferential, contact_points, laguerre_cells,
                         solve_semidiscrete)

PROBE_KINDS = ("dasm", "time-convex", "local-global", "boundary-mixing", "contact-set",
               "continuity-modulus")


@dataclass
class DasmProfile:
    x: np.ndarray
    x_tilde: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    t: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float)
        if not (t[0] == 0.0 and t[-1] == 1.0 and np.all(np.diff(t) > 0)):
            raise ValueError("t-grid must increase strictly from 0 to 1")

    def to_dict(self):
        return {"x": self.x.tolist(), "x_tilde": self.x_tilde.tolist(),
                "segment": {"anchor": self.x_tilde.tolist(), "y0": self.y0.tolist(), "y1": self.y1.tolist()},
                "samples": [[float(a), float(b)] for a, b in zip(self.t, self.f)]}


@dataclass
class ProbeReport:
    """worst_violation >= 0; zero means no violation was found."""

    kind: str
    worst_violation: float
    witness: dict | None
    config: dict
    tol: float = 1e-6
    expect_violation: bool = False
    stats: dict = field(default_factory=dict)

    @property
    def violated(self):
        return self.worst_violation > self.tol

    @property
    def passed(self):
        # expected failures are first class: finding the violation is a pass
        return self.violated if self.expect_violation else not self.violated

    @property
    def verdict(self):
        if self.expect_violation:
            return "violation-as-predicted" if self.violated else "predicted-violation-missing"
        return "unexpected-violation" if self.violated else "pass"

    def to_dict(self):
        return {"kind": self.kind, "worst_violation": self.worst_violation, "tol": self.tol,
                "witness": self.witness, "config": self.config, "passed": self.passed,
                "verdict": self.verdict, "expect_violation": self.expect_violation,
                "stats": self.stats}


# ---------------------------------------------------------------------------
# DASM
# ---------------------------------------------------------------------------

def _profiles(c: CostOracle, x, xt, y0, y1, t, V):
    """f(t) = -c(x, y(t)) + c(xt, y(t)) along the c*-segment from y0 to y1
    with respect to xt; returns (f, inside) with f of shape (K, T)."""
    K, n = x.shape
    T = len(t)
    p0 = -c.dx(xt, y0)
    p1 = -c.dx(xt, y1)
    tgt = ((1 - t)[None, :, None] * p0[:, None] + t[None, :, None] * p1[:, None]).reshape(-1, n)
    guess = ((1 - t)[None, :, None] * y0[:, None] + t[None, :, None] * y1[:, None]).reshape(-1, n)
    anc = np.repeat(xt, T, axis=0)
    ys, ok = invert_dual(c, tgt, anc, "y", guess=guess, strict=False)
    ys = ys.reshape(K, T, n)
    ys[:, 0] = y0
    ys[:, -1] = y1
    ok = ok.reshape(K, T).all(axis=1)
    if V is not None:
        ok &= V.contains(ys.reshape(-1, n)).reshape(K, T).all(axis=1)
    f = -c(x[:, None], ys) + c(xt[:, None], ys)
    return f, ok, ys


def _draw(U, V, configs, rng):
    x = U.sample(configs, rng)
    xt = U.sample(configs, rng)
    y0 = V.sample(configs, rng)
    y1 = V.sample(configs, rng)
    return x, xt, y0, y1


def _dasm_common(kind, c, U, V, configs, t_grid, seed, tol, expect_violation, chunk=2000):
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, t_grid + 1)
    x, xt, y0, y1 = _draw(U, V, configs, rng)
    worst = -math.inf
    wk = None
    skipped = 0
    mins = []
    for lo in range(0, configs, chunk):
        sl = slice(lo, lo + chunk)
        f, ok, _ = _profiles(c, x[sl], xt[sl], y0[sl], y1[sl], t, V)
        skipped += int((~ok).sum())
        f = np.where(ok[:, None], f, np.nan)
        score = _score(kind, f, t)
        score = np.where(ok, score, -np.inf)
        mins.append(score)
        k = int(np.argmax(score))
        if score[k] > worst:
            worst, wk = float(score[k]), lo + k
    if wk is None or skipped == configs:
        raise SegmentDomainError("every sampled c*-segment left the target domain",
                                 witness={"configs": configs})
    cfg = {"cost": c.describe() if hasattr(c, "describe") else c.name, "configs": configs,
           "t_grid": t_grid, "seed": seed}
    # re-verify the worst configuration at 10x the t resolution
    tf = np.linspace(0.0, 1.0, 10 * t_grid + 1)
    ff, okf, _ = _profiles(c, x[wk:wk + 1], xt[wk:wk + 1], y0[wk:wk + 1], y1[wk:wk + 1], tf, V)
    fine = float(_score(kind, ff, tf)[0])
    prof = DasmProfile(x[wk], xt[wk], y0[wk], y1[wk], t,
                       _profiles(c, x[wk:wk + 1], xt[wk:wk + 1], y0[wk:wk + 1], y1[wk:wk + 1], t, V)[0][0])
    viol = max(worst, 0.0)
    witness = {"profile": prof.to_dict(), "score": worst, "fine_score": fine,
               "reverified": bool(fine > tol) if viol > tol else None}
    if viol > tol and not fine > tol:
        # coarse-grid artefact: not a confirmed violation
        viol = max(fine, 0.0)
    allv = np.concatenate(mins)
    allv = allv[np.isfinite(allv)]
    stats = {"skipped_segments": skipped, "evaluated": int(allv.size),
             "median_score": float(np.median(allv)) if allv.size else None}
    if kind == "time-convex":
        stats["min_second_difference"] = -worst
    return ProbeReport(kind, viol, witness, cfg, tol, expect_violation, stats)


def _score(kind, f, t):
    with warnings.catch_warnings():
        # rows of skipped segments are all NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        return _score_raw(kind, f, t)


def _score_raw(kind, f, t):
    if kind == "dasm":
        return np.nanmax(f, axis=1) - np.maximum(f[:, 0], f[:, -1])
    dt = t[1] - t[0]
    d2 = (f[:, :-2] - 2 * f[:, 1:-1] + f[:, 2:]) / dt ** 2
    return -np.nanmin(d2, axis=1)


def dasm_check(c: CostOracle, U: DomainSpec, V: DomainSpec, configs=10_000, t_grid=32,
               seed=0, tol=1e-6, expect_violation=False) -> ProbeReport:
    """max_t f(t) - max(f(0), f(1)) along random c*-segments (worst case)."""
    return _dasm_common("dasm", c, U, V, configs, t_grid, seed, tol, expect_violation)


def time_convex_dasm_check(c: CostOracle, U: DomainSpec, V: DomainSpec, configs=10_000,
                           t_grid=32, seed=0, tol=1e-6, expect_violation=False) -> ProbeReport:
    """Negative part of the smallest second difference quotient of f."""
    return _dasm_common("time-convex", c, U, V, configs, t_grid, seed, tol, expect_violation)


# ---------------------------------------------------------------------------
# Local to global
# ---------------------------------------------------------------------------

def _tie_point(u: SemidiscretePotential, a, b, iters=80):
    """Bisection on [a, b] for the first argmax change; returns the point and
    the two atom indices."""
    ia = int(u.argmax(a[None])[0])
    for _ in range(iters):
        m = 0.5 * (a + b)
        if int(u.argmax(m[None])[0]) == ia:
            a = m
        else:
            b = m
    return 0.5 * (a + b), ia, int(u.argmax(b[None])[0])


def _sample_ties(u, dom, count, rng):
    out = []
    tries = 0
    while len(out) < count and tries < 50 * count:
        tries += 1
        a, b = dom.sample(2, rng)
        if u.argmax(a[None])[0] == u.argmax(b[None])[0]:
            continue
        x, i, j = _tie_point(u, a, b)
        out.append((x, i, j))
    return out


def _global_min(u, y, dom, starts, rng):
    """Multistart SLSQP minima of x -> u(x) + c(x, y) over dom."""
    cons = _domain_constraints(dom)
    xs = np.concatenate([contact_points(u, y[None], dom), dom.sample(starts - 1, rng)])
    vals = []
    for x0 in xs:
        x = _polish(u, y, x0, cons, "c")
        vals.append((float(u(x[None])[0] + u.cost(x, y)), x))
    return vals


def local_global_check(u: SemidiscretePotential, U: DomainSpec | None = None, configs=100,
                       chart_free=True, starts=20, tol=1e-6, seed=0) -> ProbeReport:
    """(i) targets whose dual point lies in the hull of the contact gradients
    at a tie point are global c-subgradients there; (ii) multistart local
    minima of u + c(., y) agree with the global minimum."""
    rng = np.random.default_rng(seed)
    dom = U or u.domain
    c = u.cost
    worst, witness = 0.0, None
    ties = _sample_ties(u, dom, configs, rng)
    hull_tests = 0
    for x, i, j in ties:
        idx, ys = c_subdifferential(u, x, 1e-9 * max(1.0, float(np.abs(u.mountains(x)).max())))
        P = -c.dx(x, ys)
        w = rng.dirichlet(np.ones(len(P)))
        pt = w @ P
        y, ok = invert_dual(c, pt[None], x[None], "y", guess=(w @ ys)[None], strict=False)
        if not ok[0]:
            continue
        y = y[0]
        hull_tests += 1
        here = float(u(x[None])[0] + c(x, y))
        best = min(v for v, _ in _global_min(u, y, dom, 4, rng))
        gap = here - best
        if gap > worst:
            worst, witness = gap, {"part": "hull", "x_tilde": x.tolist(), "atoms": ys.tolist(),
                                   "y": y.tolist(), "value_at_x": here, "global_min": best}
    minima = 0
    for _ in range(configs):
        y = u.atoms[rng.integers(len(u.atoms))] + 0.0
        # a generic target near an atom
        y = y + 0.05 * (rng.random(u.dim) - 0.5) * max(1e-12, float(np.ptp(u.atoms)))
        vals = _global_min(u, y, dom, starts, rng)
        g = min(v for v, _ in vals)
        for v, x in vals:
            minima += 1
            if v - g > worst:
                worst, witness = v - g, {"part": "multistart", "y": y.tolist(), "local": x.tolist(),
                                         "local_value": v, "global_min": g}
    cfg = {"configs": configs, "starts": starts, "chart_free": chart_free, "seed": seed,
           "atoms": len(u.atoms)}
    return ProbeReport("local-global", worst, witness, cfg, tol,
                       stats={"hull_tests": hull_tests, "local_minima": minima})


# ---------------------------------------------------------------------------
# Boundary mixing
# ---------------------------------------------------------------------------

def boundary_mixing_check(u: SemidiscretePotential, U: DomainSpec, V: DomainSpec,
                          bounds: BoundsSpec | None = None, probes=2000, source_delta=0.1,
                          target_delta=1e-3, scale=None, seed=0, expect_violation=False,
                          bins=8) -> ProbeReport:
    """Interior sources must map to interior targets.

    Probes with source interior distance >= source_delta*scale whose target
    lies closer than target_delta*scale to the boundary of V count as
    violations (magnitude target_delta*scale - distance).
    """
    rng = np.random.default_rng(seed)
    scale = scale or 0.5 * U.diameter
    dom = bounds.U_lambda if bounds is not None else U
    xs = dom.sample(probes, rng)
    dx = U.interior_distance(xs)
    ia = u.argmax(xs)
    dy = V.interior_distance(u.atoms[ia])
    sel = dx >= source_delta * scale
    short = np.where(sel, target_delta * scale - dy, -np.inf)
    k = int(np.argmax(short))
    worst = max(float(short[k]), 0.0)
    witness = None
    if sel.any():
        witness = {"x": xs[k].tolist(), "source_distance": float(dx[k]),
                   "target": u.atoms[ia[k]].tolist(), "target_distance": float(dy[k])}
    # scatter summary: min target distance per source-distance bin
    edges = np.linspace(0.0, dx.max(), bins + 1)
    trend = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = (dx >= a) & (dx <= b)
        trend.append({"source_lo": float(a), "source_hi": float(b),
                      "min_target_distance": float(dy[m].min()) if m.any() else None,
                      "count": int(m.sum())})
    cfg = {"probes": probes, "source_delta": source_delta, "target_delta": target_delta,
           "scale": scale, "seed": seed}
    return ProbeReport("boundary-mixing", worst, witness, cfg, 0.0, expect_violation,
                       stats={"selected": int(sel.sum()),
                              "min_target_distance": float(dy[sel].min()) if sel.any() else None,
                              "trend": trend})


# ---------------------------------------------------------------------------
# Contact sets
# ---------------------------------------------------------------------------

def _contact_segment(u, i, j, dom):
    """Common facet of cells i and j (bilinear-type costs): its vertices."""
    cells = u.meta.setdefault("_cache", {}).get(("cells", id(dom)))
    if cells is None:
        cells = laguerre_cells(u, dom)
        u.meta["_cache"][("cells", id(dom))] = cells
    a, b = cells[i].vertices, cells[j].vertices
    if a is None or b is None:
        return np.empty((0, u.dim))
    d = spatial.distance.cdist(a, b)
    return a[np.min(d, axis=1) < 1e-9 * (1 + np.abs(a).max())]


def contact_set_probe(u: SemidiscretePotential, gap_tol: float | None = None, pair_samples=200,
                      U_lambda: DomainSpec | None = None, V: DomainSpec | None = None,
                      ties=50, seed=0, expect_violation=False, sep_tol=1e-6) -> ProbeReport:
    """(i) targets with two distinct contact points (injectivity), (ii) the
    widest subdifferential found on tie points and its contact set."""
    rng = np.random.default_rng(seed)
    dom = u.domain
    Ul = U_lambda or dom
    c = u.cost
    n = u.dim
    # (i) injectivity
    if V is None:
        r = float(np.ptp(u.atoms, axis=0).max()) / 2 or 0.1 * dom.diameter
        Vs = Ball(u.atoms.mean(axis=0), r)
    else:
        Vs = V
    ys = Vs.sample(pair_samples, rng)
    cons = _domain_constraints(dom)
    worst, witness = 0.0, None
    for y in ys:
        x0 = contact_points(u, y[None], dom)[0]
        other = dom.sample(3, rng)
        base = float(u(x0[None])[0] + c(x0, y))
        for s in other:
            x1 = _polish(u, y, s, cons, "c")
            v1 = float(u(x1[None])[0] + c(x1, y))
            tol = gap_tol if gap_tol is not None else 1e-9 * max(1.0, abs(base))
            d = float(np.linalg.norm(x1 - x0))
            if abs(v1 - base) <= tol and d > sep_tol and Ul.contains(np.stack([x0, x1])).all():
                if d > worst:
                    sub0, _ = c_subdifferential(u, x0, 1e-7)
                    worst, witness = d, {"part": "injectivity", "y": y.tolist(), "x": x0.tolist(),
                                         "x_tilde": x1.tolist(), "subdifferential_size": int(len(sub0))}
    # (ii) subdifferential span at tie points
    best = None
    for x, i, j in _sample_ties(u, Ul, ties, rng):
        idx, pts = c_subdifferential(u, x, gap_tol if gap_tol is not None else 1e-7)
        span = float(spatial.distance.pdist(pts).max()) if len(pts) > 1 else 0.0
        if best is None or span > best["span"]:
            best = {"x_tilde": x.tolist(), "atoms": pts.tolist(), "span": span,
                    "indices": [int(t) for t in idx]}
    if best is not None and len(best["indices"]) >= 2 and c.bilinear is not None:
        i, j = best["indices"][:2]
        seg = _contact_segment(u, i, j, dom)
        if len(seg):
            diam = float(spatial.distance.pdist(seg).max()) if len(seg) > 1 else 0.0
            meets = bool(np.any(dom.interior_distance(seg) <= 1e-9 * dom.diameter))
            best["contact_set"] = {"vertices": seg.tolist(), "diameter": diam,
                                   "meets_boundary": meets}
    if len(u.atoms) == 1:
        best = {"x_tilde": None, "atoms": u.atoms.tolist(), "span": 0.0,
                "contact_set": {"diameter": dom.diameter, "meets_boundary": True, "whole_domain": True}}
    cfg = {"pair_samples": pair_samples, "ties": ties, "gap_tol": gap_tol, "seed": seed,
           "atoms": len(u.atoms)}
    return ProbeReport("contact-set", worst, witness, cfg, 0.0, expect_violation,
                       stats={"widest_subdifferential": best})


def subdifferential_agreement(u: SemidiscretePotential, report: ProbeReport, gap_tol=1e-7):
    """Injectivity witnesses must sit on tie points (non-singleton subdifferential)."""
    w = report.witness
    if not w or w.get("part") != "injectivity":
        return True
    idx, _ = c_subdifferential(u, np.asarray(w["x"]), gap_tol)
    return len(idx) > 1


# ---------------------------------------------------------------------------
# Continuity modulus
# ---------------------------------------------------------------------------

def _line_jumps(u, region, lines, per_line, rng):
    """Largest jump of the argmax atom between consecutive points on random
    chords of ``region``; these are jumps across adjacent cells."""
    lo, hi = region.bbox()
    L = float(np.linalg.norm(hi - lo))
    worst, where = 0.0, None
    s = np.linspace(-L, L, per_line)
    for _ in range(lines):
        x0 = region.sample(1, rng)[0]
        e = rng.standard_normal(u.dim)
        e /= np.linalg.norm(e)
        pts = x0 + s[:, None] * e
        pts = pts[region.contains(pts)]
        if len(pts) < 2:
            continue
        ia = u.argmax(pts)
        ch = np.flatnonzero(ia[1:] != ia[:-1])
        if len(ch) == 0:
            continue
        jumps = np.linalg.norm(u.atoms[ia[ch + 1]] - u.atoms[ia[ch]], axis=1)
        k = int(np.argmax(jumps))
        if jumps[k] > worst:
            worst, where = float(jumps[k]), pts[ch[k]].tolist()
    return worst, where


def atom_spacing(atoms, V: DomainSpec | None = None):
    """(Leb(V)/N)^(1/n) with a volume, else the median nearest-neighbour distance."""
    atoms = np.atleast_2d(atoms)
    N, n = atoms.shape
    if V is not None:
        return (V.volume() / N) ** (1.0 / n)
    if N < 2:
        return 0.0
    d, _ = spatial.cKDTree(atoms).query(atoms, k=2)
    return float(np.median(d[:, 1]))


def continuity_modulus(ladder, region: DomainSpec, V: DomainSpec | None = None, lines=200,
                       per_line=4000, pairs=4000, seed=0, expect_violation=False,
                       jump_factor=3.0, separation=None) -> ProbeReport:
    """Adjacent-cell jump statistics across a refinement ladder.

    For each potential the largest jump across cells met by random chords of
    ``region`` is compared with the atom spacing, together with a binned
    modulus max |G(x) - G(x')| against |x - x'|.  Without ``separation`` the
    check expects jumps <= jump_factor * spacing, decreasing along the
    ladder; with it (a discontinuous construction) every level must keep a
    jump >= separation.
    """
    if isinstance(ladder, SemidiscretePotential):
        ladder = [ladder]
    rng = np.random.default_rng(seed)
    levels = []
    for u in ladder:
        jump, where = _line_jumps(u, region, lines, per_line, rng)
        x = region.sample(pairs, rng)
        xp = region.sample(pairs, rng)
        dxx = np.linalg.norm(x - xp, axis=1)
        dg = np.linalg.norm(u.atoms[u.argmax(x)] - u.atoms[u.argmax(xp)], axis=1)
        edges = np.quantile(dxx, np.linspace(0, 1, 9))
        modulus = []
        for a, b in zip(edges[:-1], edges[1:]):
            m = (dxx >= a) & (dxx <= b)
            modulus.append([float(a), float(b), float(dg[m].max()) if m.any() else 0.0])
        sp = atom_spacing(u.atoms, V)
        levels.append({"atoms": len(u.atoms), "spacing": sp, "max_adjacent_jump": jump,
                       "jump_over_spacing": jump / sp if sp > 0 else 0.0, "where": where,
                       "modulus": modulus})
    inconclusive = len(levels) < 3
    jumps = [lv["max_adjacent_jump"] for lv in levels]
    if separation is None:
        over = [max(0.0, lv["max_adjacent_jump"] - jump_factor * lv["spacing"]) for lv in levels]
        nonmono = [max(0.0, b - a) for a, b in zip(jumps[:-1], jumps[1:])]
        worst = max(over + nonmono + [0.0])
    else:
        worst = max([max(0.0, separation - j) for j in jumps] + [0.0])
    cfg = {"levels": [lv["atoms"] for lv in levels], "lines": lines, "per_line": per_line,
           "seed": seed, "jump_factor": jump_factor, "separation": separation}
    k = int(np.argmax(jumps)) if jumps else 0
    return ProbeReport("continuity-modulus", worst, levels[k] if levels else None, cfg, 0.0,
                       expect_violation, stats={"levels": levels, "inconclusive": inconclusive,
                                                "monotone": all(b <= a for a, b in zip(jumps[:-1], jumps[1:]))})


# ---------------------------------------------------------------------------
# Constructions
# ---------------------------------------------------------------------------

def _voronoi_masses(atoms, V: DomainSpec, samples=200_000):
    """Masses of the Voronoi cells of the atoms restricted to V (uniform density)."""
    pts = V.qmc_sample(samples)
    _, idx = spatial.cKDTree(atoms).query(pts)
    m = np.bincount(idx, minlength=len(atoms)).astype(float)
    m = np.maximum(m, 1.0)
    return m / m.sum()


def sunflower_atoms(count, center, radius, ring=True):
    """Exactly ``count`` quasi-uniform points in a disc: a Vogel spiral inside
    plus (optionally) a ring of points on the boundary circle."""
    center = np.asarray(center, float)
    k = int(round(math.sqrt(math.pi * count))) if ring and count >= 8 else 0
    m = count - k
    h = radius * math.sqrt(math.pi / count)
    rin = radius - 0.5 * h if k else radius
    i = np.arange(m)
    r = rin * np.sqrt((i + 0.5) / m)
    th = i * math.pi * (3 - math.sqrt(5))
    pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    if k:
        a = 2 * math.pi * (np.arange(k) + 0.5) / k
        pts = np.vstack([pts, radius * np.stack([np.cos(a), np.sin(a)], axis=1)])
    return center + pts


def ball_target_problem(n_atoms=256, radius=1.0, boundary_ring=True, tol=1e-4):
    """Quadratic transport from the uniform disc to a discretised disc.

    Atoms (exactly ``n_atoms``) are a Vogel spiral plus a ring of boundary
    atoms, weighted by their Voronoi areas in the target disc; the optimal
    map is close to the identity.  U, V and the spacing go into the meta.
    """
    c = builtin_cost("quadratic", 2)
    U = Ball(np.zeros(2), radius)
    V = Ball(np.zeros(2), radius)
    vol = U.volume()
    atoms = sunflower_atoms(n_atoms, np.zeros(2), radius, boundary_ring)
    masses = _voronoi_masses(atoms, V) * vol
    u = solve_semidiscrete(c, None, atoms, masses, tol=tol, source=U)
    u.meta.update({"U": U, "V": V, "spacing": (vol / n_atoms) ** 0.5})
    return u


def two_cluster_problem(n_atoms=64, offset=1.5, cluster_radius=0.5, tol=1e-4,
                        boundary_atoms=True):
    """Uniform disc to two separated clusters (the classical discontinuity).

    Clusters are discs at +-offset e_1 with half of the mass and half of the
    atoms each; the cluster separation is 2 (offset - cluster_radius).
    """
    c = builtin_cost("quadratic", 2)
    U = Ball(np.zeros(2), 1.0)
    e = np.array([offset, 0.0])
    balls = (Ball(-e, cluster_radius), Ball(e, cluster_radius))
    per = max(1, n_atoms // 2)
    parts = [sunflower_atoms(per, b.center, cluster_radius, boundary_atoms) for b in balls]
    atoms = np.vstack(parts)
    vol = U.volume()
    masses = np.concatenate([_voronoi_masses(p, b) * 0.5 * vol for p, b in zip(parts, balls)])
    u = solve_semidiscrete(c, None, atoms, masses, tol=tol, source=U)
    u.meta.update({"U": U, "V": DomainUnion(list(balls)), "separation": 2 * (offset - cluster_radius),
                   "clusters": [b.to_dict() for b in balls]})
    return u


def refinement_ladder(kind="ball", levels=(16, 32, 64, 128), **kw):
    make = ball_target_problem if kind == "ball" else two_cluster_problem
    return [make(n, **kw) for n in levels]
