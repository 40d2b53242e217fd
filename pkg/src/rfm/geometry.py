"""Closed-form Riemannian geometry for the simple manifolds.

Points and tangent vectors are plain numpy arrays in ambient coordinates with
shape ``(..., ambient_dim)``; the manifold object is the tag that gives them
meaning.  SPD matrices are stored flattened row-major (``n*n`` entries).

All methods are vectorised over leading axes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .errors import ContractViolation, CutLocusError, NumericError, ProjectionError

TWO_PI = 2.0 * math.pi
POINT_TOL = 1e-9
BALL_MAX_RADIUS = 1.0 - 1e-7
SPD_EIG_FLOOR = 1e-8
SPHERE_CUT_TOL = 1e-12


def _dot(u, v):
    return np.sum(u * v, axis=-1)


def _safe_div(num, den):
    den = np.asarray(den)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den != 0)


def wrap_angle(x):
    """Map angles into [0, 2*pi)."""
    out = np.mod(x, TWO_PI)
    # np.mod can round tiny negatives up to exactly 2*pi.
    return np.where(out >= TWO_PI, 0.0, out)


def mobius_add(x, y):
    """Möbius addition on the unit Poincaré ball."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xy = _dot(x, y)[..., None]
    x2 = _dot(x, x)[..., None]
    y2 = _dot(y, y)[..., None]
    num = (1.0 + 2.0 * xy + y2) * x + (1.0 - x2) * y
    den = 1.0 + 2.0 * xy + x2 * y2
    return num / den


# ---------------------------------------------------------------- SPD kernels


def sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _eigh(a):
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite eigenvalues")
    return w, q


def _apply_fn(w, q, f):
    return (q * f(w)[..., None, :]) @ np.swapaxes(q, -1, -2)


def _positive_eigh(a):
    w, q = _eigh(sym(a))
    if np.any(w < 0.5 * SPD_EIG_FLOOR):
        raise NumericError(f"matrix eigenvalue {w.min():.3e} below the SPD floor {SPD_EIG_FLOOR:g}")
    return w, q


def spd_sqrt(a):
    w, q = _positive_eigh(a)
    return _apply_fn(w, q, np.sqrt)


def spd_invsqrt(a):
    w, q = _positive_eigh(a)
    return _apply_fn(w, q, lambda s: 1.0 / np.sqrt(s))


def spd_sqrt_and_invsqrt(a):
    w, q = _positive_eigh(a)
    return _apply_fn(w, q, np.sqrt), _apply_fn(w, q, lambda s: 1.0 / np.sqrt(s))


def spd_log(a):
    w, q = _positive_eigh(a)
    return _apply_fn(w, q, np.log)


def sym_expm(a):
    w, q = _eigh(sym(a))
    return _apply_fn(w, q, np.exp)


def sqrt_frechet(a, e):
    """Directional derivative of the matrix square root at SPD ``a`` along symmetric ``e``."""
    w, q = _positive_eigh(a)
    s = np.sqrt(w)
    # Divided difference (s_i - s_j) / (w_i - w_j) simplifies to 1 / (s_i + s_j).
    ratio = 1.0 / (s[..., :, None] + s[..., None, :])
    qt = np.swapaxes(q, -1, -2)
    return q @ ((qt @ e @ q) * ratio) @ qt


def sym_basis(n):
    """Frobenius-orthonormal basis of symmetric n x n matrices, shape (n(n+1)/2, n, n)."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            b = np.zeros((n, n))
            if i == j:
                b[i, i] = 1.0
            else:
                b[i, j] = b[j, i] = 1.0 / math.sqrt(2.0)
            basis.append(b)
    return np.array(basis)


# ------------------------------------------------------------------ manifolds


class Manifold:
    """Common interface; concrete classes fill in the closed forms."""

    kind = "abstract"
    compact = False

    def __init__(self, n: int):
        if n < 1:
            raise ContractViolation(f"dimension must be >= 1, got {n}")
        self.n = int(n)

    # descriptor -----------------------------------------------------------
    @property
    def ambient_dim(self) -> int:
        raise NotImplementedError

    @property
    def intrinsic_dim(self) -> int:
        return self.n

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.n}"

    def __repr__(self):
        return f"{type(self).__name__}({self.n})"

    def __eq__(self, other):
        return isinstance(other, Manifold) and self.tag == other.tag

    def __hash__(self):
        return hash(self.tag)

    # invariants -----------------------------------------------------------
    def point_residual(self, x):
        raise NotImplementedError

    def tangent_residual(self, x, u):
        return np.zeros(np.shape(u)[:-1])

    def check_point(self, x, tol=POINT_TOL):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.ambient_dim:
            raise ContractViolation(f"{self.tag}: expected ambient dim {self.ambient_dim}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise ContractViolation(f"{self.tag}: non-finite coordinates")
        r = self.point_residual(x)
        if np.any(r > tol):
            raise ContractViolation(f"{self.tag}: point off manifold (residual {np.max(r):.3e})")
        return x

    def check_tangent(self, x, u, tol=POINT_TOL):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.ambient_dim:
            raise ContractViolation(f"{self.tag}: expected tangent dim {self.ambient_dim}, got {u.shape[-1]}")
        r = self.tangent_residual(x, u)
        if np.any(r > tol):
            raise ContractViolation(f"{self.tag}: vector not tangent (residual {np.max(r):.3e})")
        return u

    # metric ---------------------------------------------------------------
    def inner(self, x, u, v):
        raise NotImplementedError

    def norm(self, x, u):
        return np.sqrt(np.maximum(self.inner(x, u, u), 0.0))

    def dist(self, x, y):
        return self.norm(x, self.log(x, y))

    def metric(self, x, u):
        """Lower the index: the ambient covector G(x) u."""
        return u

    def metric_inv_sqrt(self, x, w):
        """Apply g(x)^(-1/2); makes the g-norm of the result equal ||w||_2."""
        return w

    def egrad_to_rgrad(self, x, egrad):
        return self.proju(x, egrad)

    def metric_log_det(self, x):
        return np.zeros(np.shape(x)[:-1])

    def grad_metric_log_det(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    # maps -----------------------------------------------------------------
    def exp(self, x, u):
        raise NotImplementedError

    def log(self, x, y):
        raise NotImplementedError

    def projx(self, raw):
        raise NotImplementedError

    def proju(self, x, raw):
        return np.asarray(raw, dtype=float)

    def geodesic(self, x0, x1, t):
        """Point at time t on the constant-speed geodesic from x0 to x1."""
        t = np.asarray(t, dtype=float)
        if np.any((t < 0) | (t > 1)):
            raise ContractViolation("geodesic time must lie in [0, 1]")
        kappa = (1.0 - t)[..., None] if t.ndim else 1.0 - t
        return self.exp(x1, kappa * self.log(x1, x0))

    # sampling / bases -----------------------------------------------------
    def random_point(self, rng, size):
        raise NotImplementedError

    def random_tangent(self, rng, x, scale=1.0):
        raw = rng.standard_normal(np.shape(x))
        return scale * self.proju(x, raw)

    def tangent_basis(self, x):
        """Rows form a g-orthonormal basis of T_x M (single point)."""
        raise NotImplementedError


class Sphere(Manifold):
    kind = "sphere"
    compact = True

    @property
    def ambient_dim(self):
        return self.n + 1

    def point_residual(self, x):
        return np.abs(np.linalg.norm(x, axis=-1) - 1.0)

    def tangent_residual(self, x, u):
        return np.abs(_dot(x, u))

    def inner(self, x, u, v):
        return _dot(u, v)

    def exp(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nu = np.linalg.norm(u, axis=-1, keepdims=True)
        sinc = np.where(nu > 0, np.sin(nu) / np.where(nu > 0, nu, 1.0), 1.0)
        out = x * np.cos(nu) + u * sinc
        return out / np.linalg.norm(out, axis=-1, keepdims=True)

    def log(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xy = _dot(x, y)
        if np.any(xy <= -1.0 + SPHERE_CUT_TOL):
            raise CutLocusError("sphere log undefined for antipodal points")
        v = y - xy[..., None] * x
        nv = np.linalg.norm(v, axis=-1)
        theta = np.arctan2(nv, xy)
        return v * _safe_div(theta, nv)[..., None]

    def dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xy = _dot(x, y)
        nv = np.linalg.norm(y - xy[..., None] * x, axis=-1)
        return np.arctan2(nv, xy)

    def projx(self, raw):
        raw = np.asarray(raw, dtype=float)
        nr = np.linalg.norm(raw, axis=-1, keepdims=True)
        if np.any(nr == 0) or not np.all(np.isfinite(raw)):
            raise ProjectionError("cannot project the zero vector onto the sphere")
        return raw / nr

    def proju(self, x, raw):
        raw = np.asarray(raw, dtype=float)
        return raw - _dot(raw, x)[..., None] * x

    def random_point(self, rng, size):
        return self.projx(rng.standard_normal((*np.atleast_1d(size), self.ambient_dim)))

    def tangent_basis(self, x):
        _, _, vt = np.linalg.svd(np.asarray(x, dtype=float)[None, :])
        return vt[1:]

    def log_volume(self):
        m = self.n + 1
        return math.log(2.0) + 0.5 * m * math.log(math.pi) - float(gammaln(0.5 * m))


class FlatTorus(Manifold):
    kind = "torus"
    compact = True

    @property
    def ambient_dim(self):
        return self.n

    def point_residual(self, x):
        below = np.maximum(-x, 0.0)
        above = np.where(x >= TWO_PI, x - TWO_PI + np.finfo(float).eps, 0.0)
        return np.max(below + above, axis=-1)

    def inner(self, x, u, v):
        return _dot(u, v)

    def exp(self, x, u):
        return wrap_angle(np.asarray(x, dtype=float) + np.asarray(u, dtype=float))

    def log(self, x, y):
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return np.arctan2(np.sin(d), np.cos(d))

    def projx(self, raw):
        raw = np.asarray(raw, dtype=float)
        if not np.all(np.isfinite(raw)):
            raise ProjectionError("non-finite torus coordinates")
        return wrap_angle(raw)

    def random_point(self, rng, size):
        return rng.uniform(0.0, TWO_PI, (*np.atleast_1d(size), self.n))

    def tangent_basis(self, x):
        return np.eye(self.n)

    def log_volume(self):
        return self.n * math.log(TWO_PI)


class PoincareBall(Manifold):
    kind = "ball"

    @property
    def ambient_dim(self):
        return self.n

    @staticmethod
    def conformal_factor(x):
        return 2.0 / (1.0 - _dot(x, x))

    def point_residual(self, x):
        r = np.linalg.norm(x, axis=-1)
        return np.where(r < 1.0, 0.0, r - 1.0 + np.finfo(float).eps)

    def inner(self, x, u, v):
        lam = self.conformal_factor(x)
        return lam**2 * _dot(u, v)

    def metric(self, x, u):
        return self.conformal_factor(x)[..., None] ** 2 * u

    def metric_inv_sqrt(self, x, w):
        return w / self.conformal_factor(x)[..., None]

    def egrad_to_rgrad(self, x, egrad):
        return egrad / self.conformal_factor(x)[..., None] ** 2

    def metric_log_det(self, x):
        # g = lam^2 I, so log det g = 2 n log lam.
        return 2.0 * self.n * np.log(self.conformal_factor(x))

    def grad_metric_log_det(self, x):
        x = np.asarray(x, dtype=float)
        return 4.0 * self.n * x / (1.0 - _dot(x, x))[..., None]

    def exp(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nu = np.linalg.norm(u, axis=-1, keepdims=True)
        scale = np.tanh(nu / (1.0 - _dot(x, x)[..., None]))
        step = u * _safe_div(scale, nu)
        return self.projx(mobius_add(x, step))

    def log(self, x, y):
        x = np.asarray(x, dtype=float)
        w = mobius_add(-x, np.asarray(y, dtype=float))
        nw = np.minimum(np.linalg.norm(w, axis=-1, keepdims=True), 1.0 - 1e-16)
        return (1.0 - _dot(x, x)[..., None]) * w * _safe_div(np.arctanh(nw), nw)

    def dist(self, x, y):
        w = mobius_add(-np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return 2.0 * np.arctanh(np.minimum(np.linalg.norm(w, axis=-1), 1.0 - 1e-16))

    def projx(self, raw):
        raw = np.asarray(raw, dtype=float)
        if not np.all(np.isfinite(raw)):
            raise ProjectionError("non-finite ball coordinates")
        r = np.linalg.norm(raw, axis=-1, keepdims=True)
        return np.where(r > BALL_MAX_RADIUS, raw * _safe_div(BALL_MAX_RADIUS, r), raw)

    def random_point(self, rng, size, max_dist=2.0):
        size = np.atleast_1d(size)
        direction = rng.standard_normal((*size, self.n))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        rho = max_dist * rng.uniform(0.0, 1.0, (*size, 1)) ** (1.0 / self.n)
        return np.tanh(rho / 2.0) * direction

    def tangent_basis(self, x):
        return np.eye(self.n) / self.conformal_factor(x)


class SPD(Manifold):
    """Symmetric positive definite n x n matrices with the affine-invariant metric."""

    kind = "spd"

    @property
    def ambient_dim(self):
        return self.n * self.n

    @property
    def intrinsic_dim(self):
        return self.n * (self.n + 1) // 2

    def mat(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(*x.shape[:-1], self.n, self.n)

    @staticmethod
    def vec(a):
        return a.reshape(*a.shape[:-2], -1)

    def point_residual(self, x):
        a = self.mat(x)
        asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-1, -2))
        w = np.linalg.eigvalsh(sym(a))
        return np.where(w[..., 0] > 0, asym, np.inf)

    def tangent_residual(self, x, u):
        a = self.mat(u)
        return np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-1, -2))

    def inner(self, x, u, v):
        xm = self.mat(x)
        a = np.linalg.solve(xm, self.mat(u))
        b = np.linalg.solve(xm, self.mat(v))
        return np.sum(a * np.swapaxes(b, -1, -2), axis=(-1, -2))

    def metric(self, x, u):
        xinv = np.linalg.inv(self.mat(x))
        return self.vec(xinv @ self.mat(u) @ xinv)

    def metric_inv_sqrt(self, x, w):
        s = spd_sqrt(self.mat(x))
        return self.vec(s @ self.mat(w) @ s)

    def egrad_to_rgrad(self, x, egrad):
        xm = self.mat(x)
        return self.vec(xm @ sym(self.mat(egrad)) @ xm)

    def metric_log_det(self, x):
        # Coordinates: upper-triangular entries; off-diagonals contribute the log 2 term.
        n = self.n
        _, logdet = np.linalg.slogdet(self.mat(x))
        return 0.5 * n * (n - 1) * math.log(2.0) - (n + 1) * logdet

    def grad_metric_log_det(self, x):
        return -(self.n + 1) * self.vec(np.linalg.inv(self.mat(x)))

    def exp(self, x, u):
        s, si = spd_sqrt_and_invsqrt(self.mat(x))
        inner = sym_expm(si @ sym(self.mat(u)) @ si)
        return self.vec(sym(s @ inner @ s))

    def log(self, x, y):
        s, si = spd_sqrt_and_invsqrt(self.mat(x))
        inner = spd_log(si @ self.mat(y) @ si)
        return self.vec(sym(s @ inner @ s))

    def dist(self, x, y):
        si = spd_invsqrt(self.mat(x))
        w, _ = _positive_eigh(si @ self.mat(y) @ si)
        return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))

    def projx(self, raw):
        a = self.mat(raw)
        if not np.all(np.isfinite(a)):
            raise ProjectionError("non-finite SPD coordinates")
        w, q = _eigh(sym(a))
        return self.vec(sym(_apply_fn(np.maximum(w, SPD_EIG_FLOOR), q, lambda s: s)))

    def proju(self, x, raw):
        return self.vec(sym(self.mat(raw)))

    def random_point(self, rng, size, scale=0.5):
        size = np.atleast_1d(size)
        a = rng.standard_normal((*size, self.n, self.n)) * scale
        return self.vec(sym_expm(sym(a)))

    def tangent_basis(self, x):
        s = spd_sqrt(self.mat(x))
        return np.array([self.vec(s @ b @ s) for b in sym_basis(self.n)])


MANIFOLDS = {cls.kind: cls for cls in (Sphere, FlatTorus, PoincareBall, SPD)}


def manifold_from_tag(tag: str) -> Manifold:
    """Parse tags like ``sphere:2`` or ``torus:7``."""
    try:
        kind, n = tag.strip().lower().split(":")
        return MANIFOLDS[kind](int(n))
    except (ValueError, KeyError) as exc:
        raise ContractViolation(f"unknown manifold tag {tag!r}") from exc


# Functional aliases ---------------------------------------------------------


def exp_map(m: Manifold, x, u):
    m.check_point(x)
    m.check_tangent(x, u)
    return m.exp(x, u)


def log_map(m: Manifold, x, y):
    m.check_point(x)
    m.check_point(y)
    return m.log(x, y)


def geodesic_interpolate(m: Manifold, x0, x1, t):
    return m.geodesic(x0, x1, t)


def project_to_manifold(m: Manifold, raw):
    return m.projx(raw)


def project_to_tangent(m: Manifold, x, raw):
    return m.proju(x, raw)
