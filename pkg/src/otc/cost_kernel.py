"""Cost functions with derivative oracles, domains, and global cost constants.

A cost is evaluated on batches: ``x`` and ``y`` are arrays of shape ``(..., n)``
that broadcast against each other.  Derivative tensors carry the ``x`` indices
first, then the ``y`` indices, e.g. ``D2xy[..., i, j] = d^2 c / dx_i dy_j``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import optimize, spatial
from scipy.stats import qmc

Array = np.ndarray
DerivFn = Callable[[Array, Array], Array]


class CostError(ValueError):
    """Base class for cost-kernel errors."""


class DomainError(CostError):
    """A point lies outside the domain (or on the singular set of the cost)."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DerivativeOrderError(CostError):
    pass


class BiTwistError(CostError):
    """The mixed Hessian D2xy c is singular (or numerically so) at ``witness``."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConfigError(CostError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# Cost oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BilinearStructure:
    """Marks costs of the form ``c(x,y) = a(x) + b(y) - <x, Phi y + offset>``.

    For such costs the difference of two mountains is affine in ``x``, so
    semidiscrete potentials are polyhedral up to ``a``.  ``alpha``/``a0``
    are set when ``a`` itself is affine (``a(x) = <alpha, x> + a0``).
    """

    Phi: Array
    offset: Array
    b: Callable[[Array], Array]
    grad_b: Callable[[Array], Array]
    alpha: Array | None = None
    a0: float = 0.0

    def phi(self, y):
        y = np.asarray(y, dtype=float)
        return y @ self.Phi.T + self.offset

    def phi_inverse(self, p):
        p = np.asarray(p, dtype=float)
        return np.linalg.solve(self.Phi, (p - self.offset).T).T if p.ndim > 1 \
            else np.linalg.solve(self.Phi, p - self.offset)


class CostOracle:
    """A cost function with optional analytic derivatives.

    Parameters
    ----------
    name : str
    dim : int
    fn : callable
        ``fn(x, y)`` evaluated on broadcasting batches.
    derivatives : mapping
        ``(a, b) -> callable`` giving the tensor of ``a`` x-derivatives and
        ``b`` y-derivatives.  Missing entries fall back to finite differences.
    fd_step : float
        Stencil spacing for the finite-difference fallback.
    """

    def __init__(self, name: str, dim: int, fn: Callable[[Array, Array], Array],
                 derivatives: Mapping[tuple[int, int], DerivFn] | None = None,
                 fd_step: float = 1e-3, symmetric: bool = False,
                 params: dict | None = None,
                 bilinear: BilinearStructure | None = None):
        if dim < 1:
            raise CostError("dimension must be positive")
        if not fd_step > 0:
            raise CostError("fd_step must be positive")
        self.name = name
        self.dim = int(dim)
        self._fn = fn
        self._derivs = dict(derivatives or {})
        self.fd_step = float(fd_step)
        self.symmetric = symmetric
        self.params = dict(params or {})
        self.bilinear = bilinear

    def __repr__(self):
        return f"CostOracle({self.name!r}, dim={self.dim}, fd_step={self.fd_step:g})"

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self._fn(x, y)

    def has_analytic(self, order) -> bool:
        return tuple(order) in self._derivs or tuple(order) == (0, 0)

    def with_fd_step(self, fd_step: float) -> "CostOracle":
        return CostOracle(self.name, self.dim, self._fn, self._derivs, fd_step,
                          self.symmetric, self.params, self.bilinear)

    def derivative(self, order, x, y) -> Array:
        return eval_derivative(self, order, x, y)

    # convenience accessors used everywhere else
    def dx(self, x, y):
        return eval_derivative(self, (1, 0), x, y)

    def dy(self, x, y):
        return eval_derivative(self, (0, 1), x, y)

    def dxy(self, x, y):
        return eval_derivative(self, (1, 1), x, y)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "fd_step": self.fd_step,
                "params": self.params}


def _check_order(order):
    try:
        a, b = (int(v) for v in order)
    except (TypeError, ValueError):
        raise DerivativeOrderError(f"order must be a pair (x-count, y-count), got {order!r}")
    if a < 0 or b < 0:
        raise DerivativeOrderError("negative derivative order")
    if a + b > 4:
        raise DerivativeOrderError(f"total order {a + b} exceeds the smoothness budget of 4")
    if a + b == 4 and (a == 4 or b == 4):
        raise DerivativeOrderError(
            "at total order 4 at least one derivative must fall on each variable")
    return a, b


# 5-point centred first-derivative stencil
_FD_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def _fd_axis(func, x, y, wrt, h):
    """Differentiate ``func`` (tensor valued) once along every axis of ``wrt``.

    Returns the derivative with the new index appended last; one Richardson
    level on (h, h/2) removes the h^4 term.
    """
    z = x if wrt == "x" else y
    n = z.shape[-1]
    eye = np.eye(n)
    # shifts: (2 steps, 4 offsets, n axes, n)
    steps = np.array([h, h / 2.0])
    shifts = steps[:, None, None, None] * _FD_OFFSETS[None, :, None, None] * eye[None, None, :, :]
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    zb = np.broadcast_to(z, batch + (n,))
    other = np.broadcast_to(y if wrt == "x" else x, batch + (n,))
    pad = (1,) * len(batch)
    zs = zb[None, None, None] + shifts.reshape(2, 4, n, *pad, n)
    os_ = np.broadcast_to(other, zs.shape)
    vals = func(zs, os_) if wrt == "x" else func(os_, zs)
    # vals: (2, 4, n, *batch, *T)
    vals = np.asarray(vals, dtype=float)
    d = np.tensordot(_FD_WEIGHTS, vals, axes=([0], [1]))  # (2, n, *batch, *T)
    d = d / steps.reshape((2,) + (1,) * (d.ndim - 1))
    rich = (16.0 * d[1] - d[0]) / 15.0  # (n, *batch, *T)
    # move the new axis to the end
    return np.moveaxis(rich, 0, -1)


def eval_derivative(c: CostOracle, order, x, y, U=None, V=None) -> Array:
    """Mixed partial-derivative tensor of ``c`` at ``(x, y)``.

    Uses the analytic evaluator when present, otherwise centred 5-point finite
    differences with one Richardson level, built on top of the highest-order
    analytic derivative that is available below ``order``.
    """
    a, b = _check_order(order)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != c.dim or y.shape[-1] != c.dim:
        raise DomainError(f"points must have trailing dimension {c.dim}")
    if U is not None and not np.all(U.contains(x)):
        raise DomainError("x outside source domain", witness=x)
    if V is not None and not np.all(V.contains(y)):
        raise DomainError("y outside target domain", witness=y)
    if (a, b) == (0, 0):
        return c(x, y)
    if (a, b) in c._derivs:
        return np.asarray(c._derivs[(a, b)](x, y), dtype=float)
    # best analytic base below (a, b)
    base = (0, 0)
    for (aa, bb) in c._derivs:
        if aa <= a and bb <= b and aa + bb > sum(base):
            base = (aa, bb)
    return _fd_build(c, base, a - base[0], b - base[1], x, y)


def _fd_build(c, base, ra, rb, x, y):
    a0, b0 = base
    h = c.fd_step

    def f0(xx, yy):
        return eval_derivative(c, base, xx, yy)

    # differentiate y first (innermost), then x; each wrap appends an index
    funcs = [f0]
    plan = ["y"] * rb + ["x"] * ra
    for wrt in plan:
        prev = funcs[-1]

        def nxt(xx, yy, prev=prev, wrt=wrt):
            return _fd_axis(prev, xx, yy, wrt, h)
        funcs.append(nxt)
    out = funcs[-1](x, y)
    # index layout now: base-x (a0), base-y (b0), new-y (rb), new-x (ra)
    nb = out.ndim - (a0 + b0 + ra + rb)
    src = list(range(nb))
    bx = [nb + i for i in range(a0)]
    by = [nb + a0 + i for i in range(b0)]
    ny = [nb + a0 + b0 + i for i in range(rb)]
    nx = [nb + a0 + b0 + rb + i for i in range(ra)]
    perm = src + bx + nx + by + ny
    return np.transpose(out, perm)


# ---------------------------------------------------------------------------
# Built-in costs
# ---------------------------------------------------------------------------

def _eye_like(batch_shape, n):
    return np.broadcast_to(np.eye(n), tuple(batch_shape) + (n, n))


def _bilinear_part(a, b, x, y):
    """Derivatives of -<x,y>."""
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    n = x.shape[-1]
    if (a, b) == (1, 0):
        return -np.broadcast_to(y, batch + (n,))
    if (a, b) == (0, 1):
        return -np.broadcast_to(x, batch + (n,))
    if (a, b) == (1, 1):
        return -_eye_like(batch, n)
    return np.zeros(batch + (n,) * (a + b))


def _bilinear():
    def fn(x, y):
        return -np.sum(x * y, axis=-1)
    derivs = {ab: (lambda x, y, ab=ab: _bilinear_part(ab[0], ab[1], x, y))
              for ab in _all_orders()}
    return fn, derivs


def _all_orders():
    out = []
    for a in range(5):
        for b in range(5):
            if 0 < a + b <= 4 and not (a + b == 4 and (a == 4 or b == 4)):
                out.append((a, b))
    return out


def _sq_norm_derivs(k, z):
    """Derivatives of |z|^2 of order k (k = 0, 1, 2, >2)."""
    n = z.shape[-1]
    if k == 0:
        return np.sum(z * z, axis=-1)
    if k == 1:
        return 2.0 * z
    if k == 2:
        return 2.0 * _eye_like(z.shape[:-1], n)
    return np.zeros(z.shape[:-1] + (n,) * k)


def _quadratic_part(a, b, x, y):
    """Derivatives of |x-y|^2/2."""
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    n = x.shape[-1]
    r = np.broadcast_to(x - y, batch + (n,))
    k = a + b
    sign = -1.0 if b % 2 else 1.0
    if k == 1:
        return sign * r
    if k == 2:
        return sign * _eye_like(batch, n)
    return np.zeros(batch + (n,) * k)


def _log_phi_derivs(k, r):
    """k-th derivative tensor of phi(r) = -log|r|."""
    n = r.shape[-1]
    s = np.sum(r * r, axis=-1)
    if np.any(s == 0.0):
        raise DomainError("log cost is singular at x = y")
    eye = np.eye(n)
    if k == 1:
        return -r / s[..., None]
    if k == 2:
        return -eye / s[..., None, None] + 2.0 * np.einsum("...i,...j->...ij", r, r) / s[..., None, None] ** 2
    if k == 3:
        t = (np.einsum("ij,...k->...ijk", eye, r) + np.einsum("ik,...j->...ijk", eye, r)
             + np.einsum("jk,...i->...ijk", eye, r))
        return 2.0 * t / s[..., None, None, None] ** 2 \
            - 8.0 * np.einsum("...i,...j,...k->...ijk", r, r, r) / s[..., None, None, None] ** 3
    if k == 4:
        dd = (np.einsum("ij,kl->ijkl", eye, eye) + np.einsum("ik,jl->ijkl", eye, eye)
              + np.einsum("il,jk->ijkl", eye, eye))
        rr = np.einsum("...i,...j->...ij", r, r)
        t = (np.einsum("ij,...kl->...ijkl", eye, rr) + np.einsum("ik,...jl->...ijkl", eye, rr)
             + np.einsum("il,...jk->...ijkl", eye, rr) + np.einsum("jk,...il->...ijkl", eye, rr)
             + np.einsum("jl,...ik->...ijkl", eye, rr) + np.einsum("kl,...ij->...ijkl", eye, rr))
        s4 = s[..., None, None, None, None]
        return 2.0 * dd / s4 ** 2 - 8.0 * t / s4 ** 3 \
            + 48.0 * np.einsum("...ij,...kl->...ijkl", rr, rr) / s4 ** 4
    raise DerivativeOrderError("log derivative order out of range")


def _log_part(a, b, x, y):
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    r = np.broadcast_to(x - y, batch + (x.shape[-1],))
    d = _log_phi_derivs(a + b, r)
    return -d if b % 2 else d


def _inner_poly_derivs(a, b, x, y, g_derivs):
    """Derivatives of g(<x,y>) via matchings of x-slots with y-slots.

    Every derivative of s = <x,y> is either y_i (x-slot), x_j (y-slot) or
    delta_ij (one x-slot with one y-slot); higher blocks vanish.
    """
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    n = x.shape[-1]
    xb = np.broadcast_to(x, batch + (n,))
    yb = np.broadcast_to(y, batch + (n,))
    s = np.sum(xb * yb, axis=-1)
    k = a + b
    out = np.zeros(batch + (n,) * k)
    eye = np.eye(n)
    letters = "abcdefgh"
    xs = list(range(a))
    ys = list(range(a, a + b))
    for m in range(0, min(a, b) + 1):
        gval = g_derivs(k - m, s)
        if np.all(gval == 0):
            continue
        for xsel in itertools.combinations(xs, m):
            for ysel in itertools.permutations(ys, m):
                operands = []
                subs = []
                for i, j in zip(xsel, ysel):
                    operands.append(eye)
                    subs.append(letters[i] + letters[j])
                for i in xs:
                    if i not in xsel:
                        operands.append(yb)
                        subs.append("..." + letters[i])
                for j in ys:
                    if j not in ysel:
                        operands.append(xb)
                        subs.append("..." + letters[j])
                target = "..." + letters[:k]
                if operands:
                    term = np.einsum(",".join(subs) + "->" + target, *operands)
                    term = np.broadcast_to(term, batch + (n,) * k)
                else:
                    term = np.ones(batch)
                out = out + gval.reshape(batch + (1,) * k) * term
    return out


def _perturbed(epsilon, family):
    if family == "cubic":
        def g(k, s):
            if k == 0:
                return epsilon * s ** 3
            if k == 1:
                return 3.0 * epsilon * s ** 2
            if k == 2:
                return 6.0 * epsilon * s
            if k == 3:
                return np.full_like(s, 6.0 * epsilon)
            return np.zeros_like(s)

        def fn(x, y):
            s = np.sum(x * y, axis=-1)
            return -s + epsilon * s ** 3

        def part(a, b, x, y):
            return _bilinear_part(a, b, x, y) + _inner_poly_derivs(a, b, x, y, g)
    elif family == "quartic":
        def fn(x, y):
            return -np.sum(x * y, axis=-1) + epsilon * np.sum(x * x, axis=-1) * np.sum(y * y, axis=-1)

        def part(a, b, x, y):
            batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
            n = x.shape[-1]
            xb = np.broadcast_to(x, batch + (n,))
            yb = np.broadcast_to(y, batch + (n,))
            da = _sq_norm_derivs(a, xb)
            db = _sq_norm_derivs(b, yb)
            da = da.reshape(da.shape + (1,) * b)
            db = db.reshape(db.shape[: len(batch)] + (1,) * a + db.shape[len(batch):])
            return _bilinear_part(a, b, x, y) + epsilon * da * db
    else:
        raise CostError(f"unknown perturbation family {family!r} (known: cubic, quartic)")
    derivs = {ab: (lambda x, y, ab=ab: part(ab[0], ab[1], x, y)) for ab in _all_orders()}
    return fn, derivs


BUILTIN_COSTS = ("bilinear", "quadratic", "log_distance", "perturbed")
PERTURBATIONS = ("cubic", "quartic")


def builtin_cost(name: str, dim: int = 2, epsilon: float = 0.0,
                 perturbation: str = "cubic", fd_step: float = 1e-3) -> CostOracle:
    """Return one of the built-in costs with analytic derivatives.

    ``bilinear``      c = -<x,y>
    ``quadratic``     c = |x-y|^2 / 2
    ``log_distance``  c = -log|x-y|
    ``perturbed``     c = -<x,y> + epsilon * P(x,y) with P = <x,y>^3 (``cubic``)
                      or |x|^2 |y|^2 (``quartic``)
    """
    n = int(dim)
    if name == "bilinear":
        fn, derivs = _bilinear()
        bl = BilinearStructure(np.eye(n), np.zeros(n), b=lambda y: np.zeros(np.shape(y)[:-1]),
                               grad_b=lambda y: np.zeros_like(np.asarray(y, float)),
                               alpha=np.zeros(n), a0=0.0)
        return CostOracle("bilinear", n, fn, derivs, fd_step, symmetric=True, bilinear=bl)
    if name == "quadratic":
        def fn(x, y):
            d = x - y
            return 0.5 * np.sum(d * d, axis=-1)
        derivs = {ab: (lambda x, y, ab=ab: _quadratic_part(ab[0], ab[1], x, y))
                  for ab in _all_orders()}
        bl = BilinearStructure(np.eye(n), np.zeros(n),
                               b=lambda y: 0.5 * np.sum(np.asarray(y, float) ** 2, axis=-1),
                               grad_b=lambda y: np.asarray(y, float).copy())
        return CostOracle("quadratic", n, fn, derivs, fd_step, symmetric=True, bilinear=bl)
    if name == "log_distance":
        def fn(x, y):
            d = x - y
            s = np.sum(d * d, axis=-1)
            if np.any(s == 0.0):
                raise DomainError("log cost is singular at x = y")
            return -0.5 * np.log(s)
        derivs = {ab: (lambda x, y, ab=ab: _log_part(ab[0], ab[1], x, y))
                  for ab in _all_orders()}
        return CostOracle("log_distance", n, fn, derivs, fd_step, symmetric=True)
    if name == "perturbed":
        fn, derivs = _perturbed(float(epsilon), perturbation)
        return CostOracle("perturbed", n, fn, derivs, fd_step,
                          params={"epsilon": float(epsilon), "perturbation": perturbation})
    raise CostError(f"unknown cost {name!r}; known: {', '.join(BUILTIN_COSTS)}")


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

class DomainSpec:
    """Bounded domain with membership, boundary sampling and interior distance."""

    dim: int

    @property
    def diameter(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    @property
    def tol(self) -> float:
        return 1e-9 * self.diameter

    def bbox(self):
        raise NotImplementedError

    def contains(self, points, tol=None) -> Array:
        d = self.interior_distance(points)
        t = self.tol if tol is None else tol
        return d >= -t

    def interior_distance(self, points) -> Array:
        raise NotImplementedError

    def boundary_sample(self, count: int, rng=None) -> Array:
        raise NotImplementedError

    def volume(self) -> float:
        raise NotImplementedError

    def sample(self, count: int, rng=None) -> Array:
        """Uniform samples by rejection from the bounding box."""
        rng = np.random.default_rng(rng)
        lo, hi = self.bbox()
        out = []
        got = 0
        while got < count:
            m = max(64, 2 * (count - got))
            pts = lo + (hi - lo) * rng.random((m, self.dim))
            pts = pts[self.interior_distance(pts) > 0]
            out.append(pts)
            got += len(pts)
        return np.concatenate(out)[:count]

    def qmc_sample(self, count: int, start: int = 0) -> Array:
        """Deterministic low-discrepancy sample (Halton prefix, rejection)."""
        lo, hi = self.bbox()
        eng = qmc.Halton(self.dim, scramble=False)
        if start:
            eng.fast_forward(start)
        out = []
        got = 0
        while got < count:
            m = max(256, 2 * (count - got))
            pts = lo + (hi - lo) * eng.random(m)
            pts = pts[self.interior_distance(pts) > 0]
            out.append(pts)
            got += len(pts)
        return np.concatenate(out)[:count]

    def to_dict(self) -> dict:
        raise NotImplementedError


def _sphere_points(count, dim, rng=None):
    if rng is None:
        if dim == 1:
            return np.array([[-1.0], [1.0]])[: max(count, 1)]
        if dim == 2:
            th = 2 * np.pi * (np.arange(count) + 0.5) / count
            return np.stack([np.cos(th), np.sin(th)], axis=1)
        if dim == 3:
            i = np.arange(count) + 0.5
            z = 1 - 2 * i / count
            r = np.sqrt(np.maximum(0, 1 - z * z))
            th = np.pi * (1 + 5 ** 0.5) * i
            return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
        rng = np.random.default_rng(0)
    rng = np.random.default_rng(rng)
    g = rng.normal(size=(count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


class Ball(DomainSpec):
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float).ravel()
        self.radius = float(radius)
        if not self.radius > 0:
            raise CostError("ball radius must be positive")
        self.dim = self.center.size

    def __repr__(self):
        return f"Ball({self.center.tolist()}, {self.radius:g})"

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    @property
    def diameter(self):
        return 2.0 * self.radius

    def interior_distance(self, points):
        p = np.asarray(points, dtype=float)
        return self.radius - np.linalg.norm(p - self.center, axis=-1)

    def boundary_sample(self, count, rng=None):
        return self.center + self.radius * _sphere_points(count, self.dim, rng)

    def volume(self):
        n = self.dim
        return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * self.radius ** n

    def sample(self, count, rng=None):
        rng = np.random.default_rng(rng)
        g = rng.normal(size=(count, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.random(count) ** (1.0 / self.dim)
        return self.center + self.radius * r[:, None] * g

    def as_polytope(self, resolution=None) -> "Polytope":
        n = self.dim
        if resolution is None:
            resolution = 1024 if n == 2 else 4000
        if n == 2:
            th = 2 * np.pi * np.arange(resolution) / resolution
            normals = np.stack([np.cos(th), np.sin(th)], axis=1)
        else:
            normals = _sphere_points(resolution, n)
        # circumscribed polytope would overshoot; use the inscribed one
        verts = self.center + self.radius * normals
        return Polytope.from_vertices(verts)

    def to_dict(self):
        return {"shape": "ball", "center": self.center.tolist(), "radius": self.radius}


class Polytope(DomainSpec):
    """Convex polytope {x : A x <= b} (rows normalised to unit length)."""

    def __init__(self, A, b):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise CostError("halfspace rows and offsets differ in count")
        nrm = np.linalg.norm(A, axis=1)
        if np.any(nrm == 0):
            raise CostError("zero halfspace normal")
        self.A = A / nrm[:, None]
        self.b = b / nrm
        self.dim = A.shape[1]
        self._vertices = None
        self._hull = None
        self._interior = None

    def __repr__(self):
        return f"Polytope({self.A.shape[0]} halfspaces, dim={self.dim})"

    @classmethod
    def from_vertices(cls, vertices):
        hull = spatial.ConvexHull(np.asarray(vertices, dtype=float))
        eq = hull.equations
        P = cls(eq[:, :-1], -eq[:, -1])
        P._vertices = hull.points[hull.vertices]
        P._hull = spatial.ConvexHull(P._vertices)
        return P

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        n = lo.size
        A = np.vstack([np.eye(n), -np.eye(n)])
        return cls(A, np.concatenate([hi, -lo]))

    def interior_point(self):
        if self._interior is None:
            self._interior, r = chebyshev_center(self.A, self.b)
            if r <= 0:
                raise CostError("polytope has empty interior")
        return self._interior

    @property
    def vertices(self):
        if self._vertices is None:
            hs = np.hstack([self.A, -self.b[:, None]])
            hi = spatial.HalfspaceIntersection(hs, self.interior_point())
            hull = spatial.ConvexHull(hi.intersections)
            self._vertices = hull.points[hull.vertices]
            self._hull = hull
        return self._vertices

    @property
    def hull(self):
        if self._hull is None:
            self._hull = spatial.ConvexHull(self.vertices)
        return self._hull

    def bbox(self):
        v = self.vertices
        return v.min(axis=0), v.max(axis=0)

    def interior_distance(self, points):
        p = np.asarray(points, dtype=float)
        slack = self.b - p @ self.A.T
        return slack.min(axis=-1)

    def volume(self):
        return float(self.hull.volume)

    def boundary_sample(self, count, rng=None):
        hull = self.hull
        simp = hull.points[hull.simplices]  # (F, n, n)
        if self.dim == 1:
            return np.array([[self.vertices.min()], [self.vertices.max()]])
        edges = simp[:, 1:, :] - simp[:, :1, :]
        gram = np.einsum("fij,fkj->fik", edges, edges)
        meas = np.sqrt(np.maximum(np.linalg.det(gram), 0.0))
        w = meas / meas.sum()
        if rng is None:
            eng = qmc.Halton(self.dim, scramble=False)
            u = eng.random(count)
        else:
            u = np.random.default_rng(rng).random((count, self.dim))
        cdf = np.cumsum(w)
        idx = np.minimum(np.searchsorted(cdf, u[:, 0] * cdf[-1]), len(w) - 1)
        # uniform point in the (n-1)-simplex from the remaining coordinates
        if self.dim == 2:
            bary = np.stack([1 - u[:, 1], u[:, 1]], axis=1)
        else:
            # n = 3: fold the unit square into the triangle
            s, t = u[:, 1], u[:, 2]
            flip = s + t > 1
            s = np.where(flip, 1 - s, s)
            t = np.where(flip, 1 - t, t)
            bary = np.stack([1 - s - t, s, t], axis=1)
        pts = np.einsum("fi,fij->fj", bary, simp[idx])
        return pts

    def to_dict(self):
        return {"shape": "polytope",
                "halfspaces": np.hstack([self.A, self.b[:, None]]).tolist()}


class DomainUnion(DomainSpec):
    """Union of balls and/or polytopes (possibly nonconvex)."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise CostError("empty union")
        self.parts = parts
        self.dim = parts[0].dim
        if any(p.dim != self.dim for p in parts):
            raise CostError("union parts differ in dimension")
        self._vol = None

    def __repr__(self):
        return f"DomainUnion({self.parts!r})"

    def bbox(self):
        los, his = zip(*(p.bbox() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    def interior_distance(self, points):
        # max over parts: exact inside each part away from the seams
        return np.max([p.interior_distance(points) for p in self.parts], axis=0)

    def boundary_sample(self, count, rng=None):
        per = max(1, int(np.ceil(2 * count / len(self.parts))))
        pts = []
        for k, p in enumerate(self.parts):
            q = p.boundary_sample(per, rng)
            others = [o for j, o in enumerate(self.parts) if j != k]
            keep = np.ones(len(q), bool)
            for o in others:
                keep &= o.interior_distance(q) <= self.tol
            pts.append(q[keep])
        pts = np.concatenate(pts)
        if len(pts) > count:
            sel = np.linspace(0, len(pts) - 1, count).round().astype(int)
            pts = pts[sel]
        return pts

    def volume(self):
        if self._vol is None:
            lo, hi = self.bbox()
            eng = qmc.Halton(self.dim, scramble=False)
            u = lo + (hi - lo) * eng.random(200_000)
            self._vol = float(np.prod(hi - lo) * np.mean(self.interior_distance(u) >= 0))
        return self._vol

    def to_dict(self):
        return {"shape": "union", "parts": [p.to_dict() for p in self.parts]}


def ball_union(balls) -> DomainUnion:
    return DomainUnion([b if isinstance(b, Ball) else Ball(*b) for b in balls])


class AffineImageDomain(DomainSpec):
    """Image ``T(D)`` of a domain under an invertible affine map z -> M z + t."""

    def __init__(self, base: DomainSpec, M, t=None):
        self.base = base
        self.M = np.asarray(M, dtype=float)
        self.t = np.zeros(base.dim) if t is None else np.asarray(t, dtype=float)
        self.Minv = np.linalg.inv(self.M)
        self.dim = base.dim
        self._sv_min = float(np.linalg.svd(self.Minv, compute_uv=False).max()) ** -1

    def __repr__(self):
        return f"AffineImageDomain({self.base!r})"

    def pull(self, points):
        p = np.asarray(points, dtype=float)
        return (p - self.t) @ self.Minv.T

    def push(self, points):
        return np.asarray(points, dtype=float) @ self.M.T + self.t

    def contains(self, points, tol=None):
        t = self.tol if tol is None else tol
        return self.base.interior_distance(self.pull(points)) * self._sv_min >= -t

    def interior_distance(self, points):
        # lower bound on the true distance for points inside
        return self.base.interior_distance(self.pull(points)) * self._sv_min

    def bbox(self):
        lo, hi = self.base.bbox()
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        if isinstance(self.base, Ball):
            ext = self.base.radius * np.linalg.norm(self.M, axis=1)
            c = self.push(self.base.center)
            return c - ext, c + ext
        img = self.push(corners)
        return img.min(axis=0), img.max(axis=0)

    def boundary_sample(self, count, rng=None):
        return self.push(self.base.boundary_sample(count, rng))

    def sample(self, count, rng=None):
        return self.push(self.base.sample(count, rng))

    def volume(self):
        return abs(np.linalg.det(self.M)) * self.base.volume()

    def to_dict(self):
        return {"shape": "affine_image", "base": self.base.to_dict(),
                "matrix": self.M.tolist(), "shift": self.t.tolist()}


def chebyshev_center(A, b):
    """Centre and radius of the largest ball inside {A x <= b} (unit rows)."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    n = A.shape[1]
    nrm = np.linalg.norm(A, axis=1)
    cobj = np.zeros(n + 1)
    cobj[-1] = -1.0
    res = optimize.linprog(cobj, A_ub=np.hstack([A, nrm[:, None]]), b_ub=b,
                           bounds=[(None, None)] * n + [(0, None)], method="highs")
    if res.status != 0:
        return np.full(n, np.nan), -1.0
    return res.x[:n], float(res.x[-1])


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

@dataclass
class CostConstants:
    beta_plus: float
    beta_minus: float
    gamma_plus: float
    gamma_minus: float
    epsilon_c: float
    third_norm: float
    samples: int = 0
    conventions: dict = field(default_factory=lambda: {
        "beta": "spectral norm", "third_norm": "Frobenius norm of D3xxy"})

    def to_dict(self):
        d = dict(self.__dict__)
        d["epsilon_c"] = "inf" if math.isinf(self.epsilon_c) else self.epsilon_c
        return d


def epsilon_from(beta_plus, beta_minus, third_norm) -> float:
    if third_norm == 0.0:
        return math.inf
    return 1.0 / (2.0 * beta_plus ** 4 * beta_minus ** 6 * third_norm)


def sample_pairs(U: DomainSpec, V: DomainSpec, count: int, start: int = 0):
    """First ``count`` accepted points of a Halton sequence on U x V."""
    n = U.dim
    ulo, uhi = U.bbox()
    vlo, vhi = V.bbox()
    lo = np.concatenate([ulo, vlo])
    hi = np.concatenate([uhi, vhi])
    eng = qmc.Halton(2 * n, scramble=False)
    if start:
        eng.fast_forward(start)
    xs, ys = [], []
    got = 0
    while got < count:
        m = max(512, 3 * (count - got))
        z = lo + (hi - lo) * eng.random(m)
        x, y = z[:, :n], z[:, n:]
        ok = U.contains(x) & V.contains(y)
        xs.append(x[ok])
        ys.append(y[ok])
        got += int(ok.sum())
    return np.concatenate(xs)[:count], np.concatenate(ys)[:count]


def compute_constants(c: CostOracle, U: DomainSpec, V: DomainSpec,
                      samples: int = 1000, cond_limit: float = 1e12) -> CostConstants:
    """Sup estimates of the bi-Lipschitz and Jacobian constants over U x V."""
    if samples < 1:
        raise CostError("samples must be >= 1")
    x, y = sample_pairs(U, V, samples)
    M = c.dxy(x, y)
    sv = np.linalg.svd(M, compute_uv=False)
    smax, smin = sv[:, 0], sv[:, -1]
    bad = (smin <= 0) | (smax / np.where(smin > 0, smin, 1.0) > cond_limit)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise BiTwistError("singular cross-Hessian", witness={"x": x[k].tolist(), "y": y[k].tolist()})
    det = np.abs(np.prod(sv, axis=1))
    T = eval_derivative(c, (2, 1), x, y)
    tn = np.sqrt(np.sum(T.reshape(len(x), -1) ** 2, axis=1))
    bp = float(smax.max())
    bm = float((1.0 / smin).max())
    third = float(tn.max())
    return CostConstants(beta_plus=bp, beta_minus=bm, gamma_plus=float(det.max()),
                         gamma_minus=float((1.0 / det).max()),
                         epsilon_c=epsilon_from(bp, bm, third), third_norm=third,
                         samples=int(samples))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_toml(path):
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"parse error: {exc}") from exc


def _vec(d, key, prefix, dim=None):
    if key not in d:
        raise ConfigError(f"{prefix}.{key}", "missing")
    try:
        v = np.asarray(d[key], dtype=float).ravel()
    except (TypeError, ValueError):
        raise ConfigError(f"{prefix}.{key}", "expected a list of numbers")
    if dim is not None and v.size != dim:
        raise ConfigError(f"{prefix}.{key}", f"expected {dim} entries, got {v.size}")
    return v


def domain_from_config(d: Mapping, prefix: str = "domain") -> DomainSpec:
    if not isinstance(d, Mapping):
        raise ConfigError(prefix, "expected a table")
    shape = d.get("shape")
    known = {"ball": {"shape", "center", "radius"},
             "polytope": {"shape", "halfspaces"},
             "box": {"shape", "lo", "hi"},
             "union": {"shape", "parts"}}
    if shape not in known:
        raise ConfigError(f"{prefix}.shape", f"unknown shape {shape!r}; expected one of {sorted(known)}")
    extra = set(d) - known[shape]
    if extra:
        raise ConfigError(f"{prefix}.{sorted(extra)[0]}", f"unexpected key for shape {shape!r}")
    if shape == "ball":
        center = _vec(d, "center", prefix)
        if "radius" not in d:
            raise ConfigError(f"{prefix}.radius", "missing")
        r = d["radius"]
        if not isinstance(r, (int, float)) or r <= 0:
            raise ConfigError(f"{prefix}.radius", "must be a positive number")
        return Ball(center, float(r))
    if shape == "box":
        lo = _vec(d, "lo", prefix)
        hi = _vec(d, "hi", prefix, lo.size)
        if np.any(hi <= lo):
            raise ConfigError(f"{prefix}.hi", "must exceed lo componentwise")
        return Polytope.box(lo, hi)
    if shape == "polytope":
        rows = d.get("halfspaces")
        try:
            H = np.asarray(rows, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{prefix}.halfspaces", "expected rows [a_1, ..., a_n, b]")
        if H.ndim != 2 or H.shape[1] < 2:
            raise ConfigError(f"{prefix}.halfspaces", "expected rows [a_1, ..., a_n, b]")
        return Polytope(H[:, :-1], H[:, -1])
    parts = d.get("parts")
    if not isinstance(parts, list) or not parts:
        raise ConfigError(f"{prefix}.parts", "expected a non-empty list of tables")
    return DomainUnion([domain_from_config(p, f"{prefix}.parts[{i}]") for i, p in enumerate(parts)])


def cost_from_config(cfg: Mapping, fd_step: float | None = None):
    """Build ``(cost, U, V)`` from a parsed config mapping.

    Domains come from ``[domain]`` (used for both sides) or from
    ``[domain.source]`` / ``[domain.target]``.
    """
    if "cost" not in cfg:
        raise ConfigError("cost", "missing [cost] table")
    cc = cfg["cost"]
    allowed = {"name", "epsilon", "perturbation", "dim", "fd_step"}
    extra = set(cc) - allowed
    if extra:
        raise ConfigError(f"cost.{sorted(extra)[0]}", "unknown key")
    name = cc.get("name")
    if name not in BUILTIN_COSTS:
        raise ConfigError("cost.name", f"unknown cost {name!r}; expected one of {list(BUILTIN_COSTS)}")
    eps = cc.get("epsilon", 0.0)
    if not isinstance(eps, (int, float)):
        raise ConfigError("cost.epsilon", "must be a number")
    pert = cc.get("perturbation", "cubic")
    if pert not in PERTURBATIONS:
        raise ConfigError("cost.perturbation", f"unknown perturbation {pert!r}")
    U = V = None
    dom = cfg.get("domain")
    if dom is not None:
        if "source" in dom or "target" in dom:
            if "source" not in dom or "target" not in dom:
                raise ConfigError("domain", "give both domain.source and domain.target")
            U = domain_from_config(dom["source"], "domain.source")
            V = domain_from_config(dom["target"], "domain.target")
        else:
            U = V = domain_from_config(dom, "domain")
    dim = cc.get("dim", U.dim if U is not None else 2)
    if U is not None and (U.dim != dim or V.dim != dim):
        raise ConfigError("cost.dim", "dimension disagrees with the domains")
    step = fd_step if fd_step is not None else cc.get("fd_step")
    if step is None:
        step = 1e-3 * max(U.diameter, V.diameter) if U is not None else 1e-3
    cost = builtin_cost(name, dim=int(dim), epsilon=float(eps), perturbation=pert, fd_step=float(step))
    return cost, U, V
