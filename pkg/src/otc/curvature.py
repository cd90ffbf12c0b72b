"""Cross-curvature along doubled c-segments and cost classification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cost_kernel import CostError, CostOracle, DomainSpec, sample_pairs
from .geometry import invert_dual


class DomainTooSmallError(CostError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class SingularCrossHessianError(CostError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass
class CrossCurvatureSample:
    x: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    value: float
    null_defect: float

    def to_dict(self):
        return {"x": self.x.tolist(), "y": self.y.tolist(), "xi": self.xi.tolist(),
                "eta": self.eta.tolist(), "value": self.value, "null_defect": self.null_defect}


_OFFS = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
_IDX_H = [0, 1, 4, 5]   # offsets (-2,-1,1,2) * h
_IDX_H2 = [1, 2, 3, 4]  # offsets (-2,-1,1,2) * h/2


def _admissible(dom, pts, vel):
    if dom is None:
        return np.ones(len(pts)) / np.linalg.norm(vel, axis=1)
    return dom.interior_distance(pts) / np.linalg.norm(vel, axis=1)


def cross_curvature_batch(c: CostOracle, x, y, xi, eta, U: DomainSpec | None = None,
                          V: DomainSpec | None = None, step=None, min_step=1e-7):
    """Vectorised cross-curvature; returns (values, null_defects).

    The mixed derivative d^2/ds dt c(x(s), y(t)) is available in closed form as
    x'(s)^T D_xy c y'(t) (segment velocities come from the dual-coordinate
    Jacobians), so only one more mixed derivative is taken numerically:
    4th-order centred differences in s and t on a 5x5 stencil with one
    Richardson level.
    """
    x, y, xi, eta = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, y, xi, eta))
    x, y, xi, eta = np.broadcast_arrays(x, y, xi, eta)
    K, n = x.shape
    M0 = c.dxy(x, y)
    det = np.linalg.det(M0)
    scale = np.linalg.norm(M0, axis=(1, 2)) ** n
    bad = ~(np.abs(det) > 1e-12 * scale)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise SingularCrossHessianError("singular cross-Hessian", witness={"x": x[k].tolist(), "y": y[k].tolist()})
    Q = -np.einsum("kij,ki->kj", M0, xi)   # q-velocity of the c-segment in x
    P = -np.einsum("kij,kj->ki", M0, eta)  # p-velocity of the c*-segment in y
    q0 = -c.dy(x, y)
    p0 = -c.dx(x, y)
    null = np.abs(np.einsum("ki,kij,kj->k", xi, M0, eta))

    if step is None:
        ell = np.minimum(_admissible(U, x, xi), _admissible(V, y, eta))
        h = 1e-2 * ell
    else:
        h = np.full(K, float(step))
    tiny = h < min_step
    if tiny.any():
        k = int(np.flatnonzero(tiny)[0])
        raise DomainTooSmallError("no room for the c-segment stencil",
                                  witness={"x": x[k].tolist(), "y": y[k].tolist(), "step": float(h[k])})
    S = len(_OFFS)
    sv = h[:, None] * _OFFS[None, :]                          # (K, S)
    tq = (q0[:, None, :] + sv[..., None] * Q[:, None, :]).reshape(-1, n)
    tp = (p0[:, None, :] + sv[..., None] * P[:, None, :]).reshape(-1, n)
    gx = (x[:, None, :] + sv[..., None] * xi[:, None, :]).reshape(-1, n)
    gy = (y[:, None, :] + sv[..., None] * eta[:, None, :]).reshape(-1, n)
    ya = np.repeat(y, S, axis=0)
    xa = np.repeat(x, S, axis=0)
    xs, _ = invert_dual(c, tq, ya, "x", guess=gx)
    ys, _ = invert_dual(c, tp, xa, "y", guess=gy)
    for dom, pts, which in ((U, xs, "x"), (V, ys, "y")):
        if dom is not None:
            out = ~dom.contains(pts)
            if out.any():
                k = int(np.flatnonzero(out)[0]) // S
                raise DomainTooSmallError(f"c-segment in {which} leaves the domain",
                                          witness={"x": x[k].tolist(), "y": y[k].tolist()})
    Mx = c.dxy(xs, ya)  # M(x(s), y0)
    My = c.dxy(xa, ys)  # M(x0, y(t))
    Qr = np.repeat(Q, S, axis=0)
    Pr = np.repeat(P, S, axis=0)
    xd = -np.linalg.solve(np.swapaxes(Mx, -1, -2), Qr[..., None])[..., 0].reshape(K, S, n)
    yd = -np.linalg.solve(My, Pr[..., None])[..., 0].reshape(K, S, n)
    xs = xs.reshape(K, S, n)
    ys = ys.reshape(K, S, n)
    Mst = c.dxy(xs[:, :, None, :], ys[:, None, :, :])        # (K, S, S, n, n)
    H = np.einsum("kai,kabij,kbj->kab", xd, Mst, yd)

    def mixed(idx, hh):
        # difference before weighting so that constants cancel exactly
        a, b, cc, d = idx
        Ds = (H[:, a] - H[:, d] + 8.0 * (H[:, cc] - H[:, b])) / 12.0
        Dst = (Ds[:, a] - Ds[:, d] + 8.0 * (Ds[:, cc] - Ds[:, b])) / 12.0
        return Dst / hh ** 2

    d1 = mixed(_IDX_H, h)
    d2 = mixed(_IDX_H2, h / 2)
    values = -(16.0 * d2 - d1) / 15.0
    return values, null


def cross_curvature(c: CostOracle, x, y, xi, eta, U=None, V=None, step=None) -> float:
    """-d^4/ds^2 dt^2 c(x(s), y(t)) at 0 along the doubled c-segments."""
    v, _ = cross_curvature_batch(c, x, y, xi, eta, U, V, step)
    return float(v[0])


def null_direction(M, xi, rng=None):
    """A unit eta with xi^T M eta = 0 (projection onto the null space of the form)."""
    m = np.asarray(M, float).T @ np.asarray(xi, float)
    m = m / np.linalg.norm(m)
    n = m.size
    if n == 2:
        return np.array([-m[1], m[0]])
    rng = np.random.default_rng(rng)
    v = rng.standard_normal(n)
    v -= (v @ m) * m
    return v / np.linalg.norm(v)


def _unit(rng, K, n):
    v = rng.standard_normal((K, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class CurvatureReport:
    min_value: float
    argmin: CrossCurvatureSample
    min_over_null_pairs: float | None
    null_argmin: CrossCurvatureSample | None
    samples: int
    null_pairs: int
    skipped: int
    tol: float
    b3_nonneg: bool
    a3w_nonneg: bool
    a3w_vacuous: bool
    a3s_strict: bool
    a3s_margin: float | None
    cost: str = ""
    meta: dict = field(default_factory=dict)

    def verdicts(self):
        return {"b3_nonneg": self.b3_nonneg, "a3w_nonneg": self.a3w_nonneg,
                "a3w_vacuous": self.a3w_vacuous, "a3s_strict": self.a3s_strict,
                "a3s_margin": self.a3s_margin}

    def to_dict(self):
        am = self.argmin.to_dict()
        return {"cost": self.cost, "min_value": self.min_value,
                "argmin": {k: am[k] for k in ("x", "y", "xi", "eta")},
                "null_min": self.min_over_null_pairs,
                "null_argmin": None if self.null_argmin is None else self.null_argmin.to_dict(),
                "verdicts": self.verdicts(),
                "counts": {"samples": self.samples, "null_pairs": self.null_pairs,
                           "skipped": self.skipped},
                "tol": self.tol,
                # finite sampling: coverage is reported, nonnegativity is not certified
                "coverage": f"{self.samples} sampled pairs, {self.null_pairs} null pairs",
                "meta": self.meta}


def _merge(a, b):
    """Associative reduction of (min, sample) pairs."""
    if a is None:
        return b
    if b is None:
        return a
    return a if a[0] <= b[0] else b


def classify(c: CostOracle, U: DomainSpec, V: DomainSpec, samples: int = 1000,
             tol: float = 1e-5, seed: int = 0, chunk: int = 250,
             boundary_margin: float = 1e-6) -> CurvatureReport:
    """Sample cross-curvature on U x V and classify the cost.

    Each sampled (x, y) contributes one general pair of random unit
    directions and one null pair (eta projected onto the null space of
    xi^T D_xy c eta).  The overall minimum ranges over both kinds, so a
    nonnegative B3 verdict always implies the A3w one.
    """
    if samples <= 0:
        raise ValueError("empty sampling grid")
    rng = np.random.default_rng(seed)
    X, Y = sample_pairs(U, V, samples)
    n = c.dim
    margin = boundary_margin * max(U.diameter, V.diameter)
    keep = (U.interior_distance(X) > margin) & (V.interior_distance(Y) > margin)
    skipped = int((~keep).sum())
    X, Y = X[keep], Y[keep]
    XI = _unit(rng, len(X), n)
    ETA = _unit(rng, len(X), n)
    XI2 = _unit(rng, len(X), n)
    M0 = c.dxy(X, Y)
    ETA2 = np.stack([null_direction(M0[k], XI2[k], rng) for k in range(len(X))]) if len(X) else ETA
    best_all = None
    best_null = None
    null_count = 0
    for lo in range(0, len(X), chunk):
        sl = slice(lo, lo + chunk)
        xx = np.concatenate([X[sl], X[sl]])
        yy = np.concatenate([Y[sl], Y[sl]])
        aa = np.concatenate([XI[sl], XI2[sl]])
        bb = np.concatenate([ETA[sl], ETA2[sl]])
        vals, nulls = cross_curvature_batch(c, xx, yy, aa, bb, U, V)
        Mn = np.linalg.norm(c.dxy(xx, yy), axis=(1, 2))
        is_null = nulls <= 1e-6 * Mn
        null_count += int(is_null.sum())
        k = int(np.argmin(vals))
        best_all = _merge(best_all, (float(vals[k]), CrossCurvatureSample(xx[k], yy[k], aa[k], bb[k],
                                                                        float(vals[k]), float(nulls[k]))))
        if is_null.any():
            idx = np.flatnonzero(is_null)
            k = int(idx[np.argmin(vals[idx])])
            best_null = _merge(best_null, (float(vals[k]), CrossCurvatureSample(
                xx[k], yy[k], aa[k], bb[k], float(vals[k]), float(nulls[k]))))
    if best_all is None:
        raise DomainTooSmallError("all sampled pairs were too close to the boundary")
    min_all = best_all[0]
    min_null = None if best_null is None else best_null[0]
    a3s_margin = min_null if (min_null is not None and min_null > 0) else None
    return CurvatureReport(
        min_value=min_all, argmin=best_all[1],
        min_over_null_pairs=min_null, null_argmin=None if best_null is None else best_null[1],
        samples=len(X), null_pairs=null_count, skipped=skipped, tol=tol,
        b3_nonneg=bool(min_all >= -tol),
        a3w_nonneg=True if min_null is None else bool(min_null >= -tol),
        a3w_vacuous=best_null is None,
        a3s_strict=bool(min_null is not None and min_null > tol),
        a3s_margin=a3s_margin, cost=c.name, meta={"seed": seed})
