"""Base distributions and exact log-likelihoods of learned flows.

The log-density of a flow is obtained by integrating the state ``(x_t, f_t)``
backward from t=1 to t=0, with ``df/dt = -div_g v`` and ``f_1 = 0``; then
``log p_1(x) = log p_0(x_0) - f_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from .errors import ContractViolation, NumericError, SolverError
from .geometry import SPD, FlatTorus, Manifold, PoincareBall, Sphere, TWO_PI, spd_invsqrt, spd_log, wrap_angle
from .mesh import MeshPoint, MeshProjector, TriangleMesh, closest_point, sample_uniform

MANIFOLD_RESIDUAL_TOL = 1e-6
TORUS_WINDINGS = 3


# ---------------------------------------------------------------- base distributions


class BaseDistribution:
    kind = "abstract"

    def sample(self, rng, n):
        raise NotImplementedError

    def log_density(self, x):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class UniformSphere(BaseDistribution):
    kind = "uniform_sphere"

    def __init__(self, m: Sphere):
        self.manifold = m

    def sample(self, rng, n):
        return self.manifold.random_point(rng, n)

    def log_density(self, x):
        return np.full(len(np.atleast_2d(x)), -self.manifold.log_volume())


class UniformTorus(BaseDistribution):
    kind = "uniform_torus"

    def __init__(self, m: FlatTorus):
        self.manifold = m

    def sample(self, rng, n):
        return self.manifold.random_point(rng, n)

    def log_density(self, x):
        return np.full(len(np.atleast_2d(x)), -self.manifold.log_volume())


class UniformMesh(BaseDistribution):
    """Area-uniform density on a triangle mesh."""

    kind = "uniform_mesh"

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh

    def sample(self, rng, n):
        return sample_uniform(self.mesh, n, rng)

    def log_density(self, x):
        return np.full(len(x), -math.log(self.mesh.total_area))


class TruncatedMeshGaussian(BaseDistribution):
    """Mixture of isotropic Gaussians on a planar mesh, each truncated to its box intersected with the mesh.

    Component j has density ``N(x; c_j, sigma^2 I) / Z_j`` on ``box_j`` and
    zero elsewhere; ``Z_j`` is the Gaussian mass of the truncation region,
    integrated face by face after clipping each triangle to the box.
    """

    kind = "mesh_gaussian"

    def __init__(self, mesh: TriangleMesh, centers, sigma: float, boxes, weights=None):
        if mesh.dim != 2:
            raise ContractViolation("truncated Gaussians are defined on planar meshes")
        self.mesh = mesh
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.sigma = float(sigma)
        self.boxes = np.asarray(boxes, dtype=float).reshape(len(self.centers), 2, 2)  # (J, lo/hi, xy)
        j = len(self.centers)
        self.weights = np.full(j, 1.0 / j) if weights is None else np.asarray(weights, dtype=float)
        self.log_z = np.array([math.log(_gaussian_mass(mesh, c, self.sigma, b)) for c, b in zip(self.centers, self.boxes)])

    def describe(self):
        return {
            "kind": self.kind,
            "centers": self.centers.tolist(),
            "sigma": self.sigma,
            "boxes": self.boxes.tolist(),
            "weights": self.weights.tolist(),
        }

    def sample(self, rng, n, return_component=False):
        comp = rng.choice(len(self.centers), size=n, p=self.weights)
        raw = np.empty((n, 2))
        for j in range(len(self.centers)):
            idx = np.flatnonzero(comp == j)
            filled = 0
            while filled < len(idx):
                need = len(idx) - filled
                prop = self.centers[j] + self.sigma * rng.standard_normal((2 * need + 16, 2))
                ok = self._inside(prop, j)
                take = prop[ok][:need]
                raw[idx[filled : filled + len(take)]] = take
                filled += len(take)
        pts = closest_point(self.mesh, raw)
        return (pts, comp) if return_component else pts

    def _inside(self, raw, j):
        lo, hi = self.boxes[j]
        in_box = np.all((raw >= lo) & (raw <= hi), axis=1)
        out = np.zeros(len(raw), dtype=bool)
        if np.any(in_box):
            idx = np.flatnonzero(in_box)
            p = closest_point(self.mesh, raw[idx])
            out[idx] = np.linalg.norm(p.positions(self.mesh) - raw[idx], axis=1) <= 1e-12
        return out

    def log_density(self, x):
        pos = x.positions(self.mesh) if isinstance(x, MeshPoint) else np.atleast_2d(x)
        terms = []
        for j in range(len(self.centers)):
            lo, hi = self.boxes[j]
            in_box = np.all((pos >= lo - 1e-12) & (pos <= hi + 1e-12), axis=1)
            q = -0.5 * np.sum((pos - self.centers[j]) ** 2, axis=1) / self.sigma**2
            q += math.log(self.weights[j]) - math.log(2 * math.pi * self.sigma**2) - self.log_z[j]
            terms.append(np.where(in_box, q, -np.inf))
        with np.errstate(divide="ignore"):
            return logsumexp(np.array(terms), axis=0)


# Degree-5 seven-point rule on the reference triangle (barycentrics, weights summing to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_TRI_RULE_BARY = np.array(
    [[1 / 3, 1 / 3, 1 / 3], [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1], [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2]]
)
_TRI_RULE_W = np.array([0.225, *[0.132394152788506] * 3, *[0.125939180544827] * 3])


def _clip_polygon(poly, axis, bound, keep_below):
    out = []
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        pin = p[axis] <= bound if keep_below else p[axis] >= bound
        qin = q[axis] <= bound if keep_below else q[axis] >= bound
        if pin:
            out.append(p)
        if pin != qin:
            s = (bound - p[axis]) / (q[axis] - p[axis])
            out.append(p + s * (q - p))
    return out


def _gaussian_mass(mesh, center, sigma, box, refine: int = 3):
    """Integral of N(x; center, sigma^2 I) over (union of mesh faces) intersected with ``box``."""
    lo, hi = box
    total = 0.0
    tris = []
    for corners in mesh.corners:
        poly = list(corners)
        for axis in range(2):
            poly = _clip_polygon(poly, axis, lo[axis], keep_below=False) if poly else poly
            poly = _clip_polygon(poly, axis, hi[axis], keep_below=True) if poly else poly
        for i in range(1, len(poly) - 1):
            tris.append((poly[0], poly[i], poly[i + 1]))
    if not tris:
        raise ContractViolation("truncation box does not meet the mesh")
    tri = np.array(tris)  # (T, 3, 2)
    for _ in range(refine):
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tri = np.concatenate([np.stack(s, 1) for s in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pts = np.einsum("qi,tid->tqd", _TRI_RULE_BARY, tri)
    dens = np.exp(-0.5 * np.sum((pts - center) ** 2, axis=2) / sigma**2) / (2 * math.pi * sigma**2)
    total = float(np.sum(area * (dens @ _TRI_RULE_W)))
    return total


class WrappedGaussian(BaseDistribution):
    """Isotropic Gaussian in a g-orthonormal frame of T_mu M pushed through exp_mu.

    ``log_density`` is the density with respect to Riemannian volume of the
    pushforward.  On the torus every winding |w| <= 3 is summed; on the
    sphere all preimages along the great circle are summed; on the ball and
    SPD manifolds the exponential map is a diffeomorphism.
    """

    kind = "wrapped_gaussian"

    def __init__(self, m: Manifold, center, scale: float, windings: int = TORUS_WINDINGS):
        if scale < 0:
            raise ContractViolation("scale must be non-negative")
        self.manifold = m
        self.center = np.asarray(center, dtype=float).reshape(-1)
        m.check_point(self.center)
        self.scale = float(scale)
        self.windings = int(windings)
        self._frame = m.tangent_basis(self.center)  # (N, ambient)

    def describe(self):
        return {"kind": self.kind, "center": self.center.tolist(), "scale": self.scale}

    def sample(self, rng, n):
        eps = rng.standard_normal((n, self._frame.shape[0])) * self.scale
        v = eps @ self._frame
        return self.manifold.exp(np.broadcast_to(self.center, v.shape), v)

    def log_density(self, x):
        m = self.manifold
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = self.scale
        if s == 0:
            raise ContractViolation("degenerate wrapped Gaussian has no density")
        dim = m.intrinsic_dim
        if isinstance(m, FlatTorus):
            diff = wrap_angle(x - self.center + math.pi) - math.pi
            w = np.arange(-self.windings, self.windings + 1) * TWO_PI
            d = diff[..., None] + w
            per_dim = logsumexp(-0.5 * (d / s) ** 2, axis=-1) - 0.5 * math.log(2 * math.pi * s * s)
            return per_dim.sum(axis=-1)
        mu = np.broadcast_to(self.center, x.shape)
        gauss_norm = -0.5 * dim * math.log(2 * math.pi * s * s)
        if isinstance(m, Sphere):
            r = m.dist(mu, x)
            ks = np.arange(0, 8)[:, None]
            rho = np.concatenate([r[None] + TWO_PI * ks, TWO_PI - r[None] + TWO_PI * ks])
            with np.errstate(divide="ignore", invalid="ignore"):
                log_jac = (dim - 1) * (np.log(np.abs(np.sin(rho))) - np.log(rho))
            # rho = 0 (x == mu) has unit Jacobian
            log_jac = np.where(rho < 1e-12, 0.0, log_jac)
            terms = -0.5 * (rho / s) ** 2 - log_jac
            return gauss_norm + logsumexp(terms, axis=0)
        if isinstance(m, PoincareBall):
            r = m.dist(mu, x)
            log_jac = (dim - 1) * _log_sinhc(r)
            return gauss_norm - 0.5 * (r / s) ** 2 - log_jac
        if isinstance(m, SPD):
            si = spd_invsqrt(m.mat(mu))
            lam = np.linalg.eigvalsh(spd_log(si @ m.mat(x) @ si))
            r2 = np.sum(lam**2, axis=-1)
            delta = np.abs(lam[..., :, None] - lam[..., None, :])
            iu = np.triu_indices(m.n, 1)
            log_jac = np.sum(_log_sinhc(0.5 * delta[..., iu[0], iu[1]]), axis=-1)
            return gauss_norm - 0.5 * r2 / s**2 - log_jac
        raise ContractViolation(f"no wrapped Gaussian for {m!r}")


def _log_sinhc(r):
    """log(sinh(r) / r), stable near zero and for large r."""
    r = np.abs(np.asarray(r, dtype=float))
    small = r < 1e-4
    rs = np.where(small, 1.0, r)
    big = r + np.log1p(-np.exp(-2 * rs)) - math.log(2.0) - np.log(rs)
    return np.where(small, r * r / 6.0, big)


def wrapped_log_density(m: Manifold, center, prior_logpdf, x):
    """Chart-based wrapped density: log p~(v) - 1/2 log det of the metric pulled back by exp_center.

    ``v`` are g-orthonormal tangent coordinates of ``log_center(x)``; the
    pulled-back metric is assembled from finite differences of the chart.
    Only the principal branch is used, so this is exact inside the
    injectivity radius.
    """
    center = np.asarray(center, dtype=float).reshape(-1)
    frame = m.tangent_basis(center)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty(len(x))
    h = 1e-6
    for i, xi in enumerate(x):
        u = m.log(center, xi)
        coords = np.linalg.lstsq(frame.T, u, rcond=None)[0]
        cols = []
        for e in np.eye(len(coords)):
            cols.append((m.exp(center, (coords + h * e) @ frame) - m.exp(center, (coords - h * e) @ frame)) / (2 * h))
        cols = np.array(cols)
        g = np.array([[m.inner(xi, a, b) for b in cols] for a in cols])
        _, logdet = np.linalg.slogdet(g)
        out[i] = prior_logpdf(coords) - 0.5 * logdet
    return out


def gaussian_logpdf(scale):
    def f(v):
        v = np.asarray(v, dtype=float)
        return -0.5 * np.sum(v * v) / scale**2 - 0.5 * v.size * math.log(2 * math.pi * scale**2)

    return f


# ---------------------------------------------------------------- solvers


@dataclass
class Euler:
    steps: int = 1000

    def describe(self):
        return {"solver": "euler", "steps": self.steps}


@dataclass
class Adaptive:
    rtol: float = 1e-7
    atol: float = 1e-7
    method: str = "RK45"

    def describe(self):
        return {"solver": "adaptive", "method": self.method, "rtol": self.rtol, "atol": self.atol}


def default_solver(space):
    """Tolerances per geometry: tight on the sphere, looser on tori and SPD; Euler on meshes."""
    if isinstance(space, TriangleMesh):
        return Euler(1000)
    if isinstance(space, Sphere):
        return Adaptive(1e-7, 1e-7)
    return Adaptive(1e-5, 1e-5)


@dataclass
class NLLResult:
    nll: np.ndarray  # per point, nats
    x0: object
    f0: np.ndarray
    stats: dict = field(default_factory=dict)

    def bits_per_dim(self, dim):
        return self.nll / (dim * math.log(2.0))


def _space_of(vf):
    ad = vf.adapter
    return getattr(ad, "mesh", None) or getattr(ad, "manifold", None)


def _check_on_manifold(space, raw):
    if isinstance(space, FlatTorus):
        return wrap_angle(raw), 0.0
    res = float(np.max(space.point_residual(raw))) if len(raw) else 0.0
    if not np.isfinite(res) or res > MANIFOLD_RESIDUAL_TOL:
        raise NumericError(f"ODE solution left the manifold (residual {res:.3e})")
    return space.projx(raw), res


def _integrate_simple(vf, params, x, t0, t1, solver, with_div):
    """Integrate dx/dt = v (and df/dt = -div v when ``with_div``) from t0 to t1."""
    space = _space_of(vf)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b, d = x.shape
    stats = {"nfev": 0, "steps": 0}
    if isinstance(solver, Euler):
        dt = (t1 - t0) / solver.steps
        f = np.zeros(b)
        for i in range(solver.steps):
            t = t0 + i * dt
            if with_div:
                div, v = vf.divergence(params, t, x, return_field=True)
                f -= dt * div
            else:
                v = vf(params, t, x)
            x = space.projx(x + dt * v)
            stats["nfev"] += 1
        stats["steps"] = solver.steps
        if isinstance(space, FlatTorus):
            x = wrap_angle(x)
        return x, f, stats

    def rhs(t, y):
        xs = y[: b * d].reshape(b, d)
        stats["nfev"] += 1
        if with_div:
            div, v = vf.divergence(params, t, xs, return_field=True)
            out = np.concatenate([v.ravel(), -div])
        else:
            out = vf(params, t, xs).ravel()
        if not np.all(np.isfinite(out)):
            raise SolverError(f"non-finite field at t={t:.6g}")
        return out

    y0 = np.concatenate([x.ravel(), np.zeros(b)]) if with_div else x.ravel()
    sol = solve_ivp(rhs, (t0, t1), y0, method=solver.method, rtol=solver.rtol, atol=solver.atol)
    if not sol.success:
        raise SolverError(f"adaptive solver failed: {sol.message} (last t={sol.t[-1]:.6g}, {sol.t.size} steps)")
    stats["steps"] = int(sol.t.size - 1)
    y = sol.y[:, -1]
    raw = y[: b * d].reshape(b, d)
    x_end, res = _check_on_manifold(space, raw)
    stats["residual"] = res
    f = y[b * d :] if with_div else np.zeros(b)
    return x_end, f, stats


def _integrate_mesh(vf, params, p: MeshPoint, t0, t1, steps, with_div, projector=None):
    mesh = vf.adapter.mesh
    projector = projector or MeshProjector(mesh)
    dt = (t1 - t0) / steps
    f = np.zeros(len(p))
    max_res = 0.0
    for i in range(steps):
        t = t0 + i * dt
        if with_div:
            div, v = vf.divergence(params, t, p, return_field=True)
            f -= dt * div
        else:
            v = vf(params, t, p)
        raw = p.positions(mesh) + dt * v
        p = projector.project(raw, p.face)
    return p, f, {"nfev": steps, "steps": steps, "residual": max_res, "fallbacks": projector.fallbacks}


def integrate(vf, params, x, t0, t1, solver=None, with_div=False):
    space = _space_of(vf)
    solver = solver or default_solver(space)
    if isinstance(space, TriangleMesh):
        steps = solver.steps if isinstance(solver, Euler) else 1000
        return _integrate_mesh(vf, params, x, t0, t1, steps, with_div)
    return _integrate_simple(vf, params, x, t0, t1, solver, with_div)


def nll(vf, params, base: BaseDistribution, x, solver=None, chunk: int = 2048) -> NLLResult:
    """Exact negative log-likelihood of ``x`` under the flow (nats per point)."""
    space = _space_of(vf)
    solver = solver or default_solver(space)
    n = len(x)
    out, f0_all, x0_parts = np.empty(n), np.empty(n), []
    stats = {"nfev": 0, "steps": 0, "chunks": 0, **solver.describe()}
    for a in range(0, n, chunk):
        sl = slice(a, min(n, a + chunk))
        xs = x[sl] if isinstance(x, MeshPoint) else np.atleast_2d(x)[sl]
        x0, f0, st = integrate(vf, params, xs, 1.0, 0.0, solver, with_div=True)
        if not np.all(np.isfinite(f0)):
            raise NumericError("non-finite divergence integral")
        lp = base.log_density(x0) - f0
        # -inf is a real answer: the point flows back to where the base has no mass
        if np.any(np.isnan(lp) | (lp == np.inf)):
            raise NumericError("non-finite log-likelihood")
        out[sl], f0_all[sl] = -lp, f0
        x0_parts.append(x0)
        stats["nfev"] += st["nfev"]
        stats["steps"] += st["steps"]
        stats["chunks"] += 1
    if isinstance(x, MeshPoint):
        x0_all = MeshPoint(np.concatenate([p.face for p in x0_parts]), np.concatenate([p.bary for p in x0_parts]))
    else:
        x0_all = np.concatenate(x0_parts) if x0_parts else np.zeros((0, vf.adapter.dim))
    return NLLResult(out, x0_all, f0_all, stats)


def sample(vf, params, base: BaseDistribution, n: int, rng, solver=None):
    """Draw from the base and push forward along the learned field from t=0 to t=1."""
    space = _space_of(vf)
    solver = solver or (Euler(1000) if isinstance(space, TriangleMesh) else default_solver(space))
    x0 = base.sample(rng, n)
    x1, _, stats = integrate(vf, params, x0, 0.0, 1.0, solver, with_div=False)
    return x1, stats


def base_for(space, kind: str = "uniform", center=None, scale: float = 0.2):
    if kind == "uniform":
        if isinstance(space, Sphere):
            return UniformSphere(space)
        if isinstance(space, FlatTorus):
            return UniformTorus(space)
        if isinstance(space, TriangleMesh):
            return UniformMesh(space)
        raise ContractViolation(f"no uniform base on {space!r}; use a wrapped Gaussian")
    if kind == "wrapped_gaussian":
        if center is None:
            center = _default_center(space)
        return WrappedGaussian(space, center, scale)
    raise ContractViolation(f"unknown base distribution {kind!r}")


def _default_center(m):
    if isinstance(m, Sphere):
        c = np.zeros(m.ambient_dim)
        c[-1] = 1.0
        return c
    if isinstance(m, FlatTorus):
        return np.full(m.n, math.pi)
    if isinstance(m, PoincareBall):
        return np.zeros(m.n)
    if isinstance(m, SPD):
        return np.eye(m.n).reshape(-1)
    raise ContractViolation(f"no default center on {m!r}")
