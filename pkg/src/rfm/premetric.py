"""Premetrics, the scheduler, and conditional flows.

A premetric ``d(x, y)`` and its gradient in the first argument define the
conditional vector field

    u_t(x | x1) = (dlog kappa / dt) * d * grad d / |grad d|_g^2,

which moves ``x`` so that ``d(x_t, x1) = kappa(t) d(x0, x1)``.  Geodesic
premetrics on simple manifolds admit the closed-form flow along geodesics;
every other premetric is integrated with projected Euler steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolation,
    CutLocusError,
    DegenerateGradientError,
    FlowStallError,
    UndefinedFieldError,
)
from .geometry import Manifold, Sphere
from .mesh import (
    MeshPoint,
    MeshProjector,
    TriangleMesh,
    closest_point,
    sample_uniform,
    spectral_distance,
    spectral_distance_gradient,
)

log = logging.getLogger(__name__)

EPS_T = 1e-5
COINCIDENT_TOL = 1e-12
DEGENERATE_GRAD_TOL = 1e-10
TRAIN_STEPS = 300
EVAL_STEPS = 1000


# ---------------------------------------------------------------- scheduler


class LinearScheduler:
    """kappa(t) = 1 - t."""

    kind = "linear"

    def __init__(self, eps: float = EPS_T):
        self.eps = float(eps)

    def kappa(self, t):
        return 1.0 - np.asarray(t, dtype=float)

    def dlogkappa(self, t):
        return -1.0 / (1.0 - np.asarray(t, dtype=float))

    def check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > 1.0 - self.eps + 1e-15):
            raise ContractViolation(f"t must lie in [0, 1 - {self.eps:g}]")
        return t

    def __repr__(self):
        return f"LinearScheduler(eps={self.eps:g})"


# ---------------------------------------------------------------- premetrics


class Premetric:
    """Base class.  ``value`` and ``gradient`` are vectorised over a batch."""

    kind = "abstract"

    def value(self, x, y):
        raise NotImplementedError

    def gradient(self, x, y):
        return self.value_and_gradient(x, y)[1]

    def value_and_gradient(self, x, y):
        raise NotImplementedError

    def sq_norm(self, x, v):
        """Squared Riemannian norm of tangent vectors v at x."""
        return np.sum(np.asarray(v) ** 2, axis=-1)

    # flow plumbing ---------------------------------------------------------
    def coords(self, x):
        """Ambient coordinates of a batch of points."""
        return np.asarray(x, dtype=float)

    def euler_step(self, x, u, dt):
        """Advance by dt * u and return the projected point and the projection correction size."""
        raw = self.coords(x) + dt[:, None] * u
        new = self.project(raw, x)
        return new, np.linalg.norm(self.coords(new) - raw, axis=1)

    def project(self, raw, previous):
        return raw

    def sample(self, rng, n):
        raise NotImplementedError

    def take(self, x, idx):
        return x[idx]


class EuclideanPremetric(Premetric):
    kind = "euclidean"

    def __init__(self, dim: int):
        self.dim = int(dim)

    def value(self, x, y):
        return np.linalg.norm(np.asarray(x, float) - np.asarray(y, float), axis=-1)

    def value_and_gradient(self, x, y):
        diff = np.asarray(x, float) - np.asarray(y, float)
        d = np.linalg.norm(diff, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = diff / d[..., None]
        return d, g

    def sample(self, rng, n):
        return rng.standard_normal((n, self.dim))


class GeodesicPremetric(Premetric):
    """Geodesic distance of a simple manifold; its gradient is -log_x(y) / d (unit g-norm)."""

    kind = "geodesic"

    def __init__(self, manifold: Manifold):
        self.manifold = manifold

    def value(self, x, y):
        return self.manifold.dist(x, y)

    def value_and_gradient(self, x, y):
        v = self.manifold.log(x, y)
        d = self.manifold.norm(x, v)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = -v / d[..., None]
        return d, g

    def sq_norm(self, x, v):
        return self.manifold.inner(x, v, v)

    def project(self, raw, previous):
        return self.manifold.projx(raw)

    def sample(self, rng, n):
        return self.manifold.random_point(rng, n)


class SpectralPremetric(Premetric):
    """Spectral distance on a triangle mesh; points are MeshPoint batches."""

    kind = "spectral"

    def __init__(self, mesh: TriangleMesh, basis, weighting):
        self.mesh = mesh
        self.basis = basis
        self.weighting = weighting
        self.projector = MeshProjector(mesh)

    def value(self, x, y):
        return spectral_distance(self.basis, self.mesh, x, y, self.weighting)

    def value_and_gradient(self, x, y):
        try:
            g, d = spectral_distance_gradient(self.basis, self.mesh, x, y, self.weighting, return_distance=True)
            return d, g
        except DegenerateGradientError:
            pass  # some pairs coincide; handle them separately below
        d = self.value(x, y)
        g = np.zeros((len(x), self.mesh.dim))
        ok = d >= COINCIDENT_TOL
        if np.any(ok):
            g[ok] = spectral_distance_gradient(self.basis, self.mesh, x[ok], y[ok], self.weighting)
        g[~ok] = np.nan
        return d, g

    def coords(self, x):
        return x.positions(self.mesh)

    def project(self, raw, previous):
        return self.projector.project(raw, previous.face)

    def sample(self, rng, n):
        return sample_uniform(self.mesh, n, rng)

    def take(self, x, idx):
        return x[idx]


class CallablePremetric(Premetric):
    """Premetric from user callables, mainly for audits and negative controls."""

    kind = "callable"

    def __init__(self, value_fn, grad_fn, sampler):
        self._value = value_fn
        self._grad = grad_fn
        self._sampler = sampler

    def value(self, x, y):
        return np.asarray(self._value(x, y), dtype=float)

    def value_and_gradient(self, x, y):
        return self.value(x, y), np.asarray(self._grad(x, y), dtype=float)

    def sample(self, rng, n):
        return self._sampler(rng, n)


# ---------------------------------------------------------------- conditional field


def _batch_time(t, n):
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(t, (n,)).copy() if t.ndim == 0 else t


def conditional_vector_field(pm: Premetric, sched, x, x1, t, return_distance=False):
    """Minimal-norm field decreasing ``pm`` at the rate set by ``sched``, shape (B, D)."""
    d, g = pm.value_and_gradient(x, x1)
    d = np.atleast_1d(d)
    g = np.atleast_2d(g)
    t = _batch_time(sched.check_time(t), len(d))
    if np.any(d < COINCIDENT_TOL):
        raise UndefinedFieldError("conditional field is undefined where x equals x1")
    gn2 = np.atleast_1d(pm.sq_norm(x, g))
    if np.any(~np.isfinite(gn2)) or np.any(gn2 < DEGENERATE_GRAD_TOL**2):
        raise DegenerateGradientError("premetric gradient vanishes away from the target")
    u = (sched.dlogkappa(t) * d / gn2)[:, None] * g
    return (u, d) if return_distance else u


# ---------------------------------------------------------------- conditional flows


@dataclass
class ConditionalFlowResult:
    x_t: object
    u_t: np.ndarray
    max_correction: np.ndarray | None = None  # largest projection correction per sample
    max_step: np.ndarray | None = None  # largest Euler step length per sample


def conditional_flow_closed_form(m: Manifold, x0, x1, t, sched) -> ConditionalFlowResult:
    """x_t = exp_{x1}(kappa(t) log_{x1}(x0)) with velocity -(dlog kappa/dt) log_{x_t}(x1)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    t = _batch_time(sched.check_time(t), len(x0))
    x_t = m.exp(x1, sched.kappa(t)[:, None] * m.log(x1, x0))
    # At t = 0 take x0 itself so the start point is reproduced bit-exactly.
    x_t = np.where((t == 0)[:, None], x0, x_t)
    u_t = -sched.dlogkappa(t)[:, None] * m.log(x_t, x1)
    return ConditionalFlowResult(x_t, u_t)


def conditional_flow_simulated(pm: Premetric, sched, x0, x1, t, steps: int = TRAIN_STEPS) -> ConditionalFlowResult:
    """Projected Euler integration of the conditional field from 0 to t (per-sample t allowed)."""
    n = len(x0) if isinstance(x0, MeshPoint) else len(np.atleast_2d(x0))
    if not isinstance(x0, MeshPoint):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    t = _batch_time(sched.check_time(t), n)
    dt = t / steps
    x = x0
    max_corr = np.zeros(n)
    max_step = np.zeros(n)
    for i in range(steps):
        s = i * dt
        try:
            u = conditional_vector_field(pm, sched, x, x1, s)
        except (DegenerateGradientError, UndefinedFieldError) as exc:
            coords = pm.coords(x)
            bad = _first_bad(pm, x, x1)
            raise FlowStallError(
                f"conditional flow stalled at step {i}: {exc}", t_fail=float(s[bad]), x_fail=coords[bad]
            ) from exc
        x, corr = pm.euler_step(x, u, dt)
        max_corr = np.maximum(max_corr, corr)
        max_step = np.maximum(max_step, dt * np.linalg.norm(u, axis=1))
    x = _restore(x, x0, t == 0)
    u = conditional_vector_field(pm, sched, x, x1, t)
    return ConditionalFlowResult(x, u, max_corr, max_step)


def _restore(x, x0, mask):
    """Put back the exact start point where no time elapsed (projection may perturb the last bits)."""
    if not np.any(mask):
        return x
    if isinstance(x, MeshPoint):
        face, bary = x.face.copy(), x.bary.copy()
        face[mask], bary[mask] = x0.face[mask], x0.bary[mask]
        return MeshPoint(face, bary)
    return np.where(mask[:, None], x0, x)


def _first_bad(pm, x, x1):
    d, g = pm.value_and_gradient(x, x1)
    gn2 = pm.sq_norm(x, g)
    bad = (d < COINCIDENT_TOL) | ~np.isfinite(gn2) | (gn2 < DEGENERATE_GRAD_TOL**2)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if len(idx) else 0


def conditional_path(pm: Premetric, sched, x0, x1, t, steps: int = TRAIN_STEPS) -> ConditionalFlowResult:
    """Closed form for geodesic premetrics on simple manifolds, simulation otherwise."""
    if isinstance(pm, GeodesicPremetric):
        return conditional_flow_closed_form(pm.manifold, x0, x1, t, sched)
    if isinstance(pm, EuclideanPremetric):
        x0 = np.atleast_2d(x0)
        x1 = np.atleast_2d(x1)
        t = _batch_time(sched.check_time(t), len(x0))
        k = sched.kappa(t)[:, None]
        x_t = x1 + k * (x0 - x1)
        return ConditionalFlowResult(x_t, -sched.dlogkappa(t)[:, None] * (x1 - x_t))
    return conditional_flow_simulated(pm, sched, x0, x1, t, steps)


# ---------------------------------------------------------------- audit


@dataclass
class AuditReport:
    pairs: int
    excluded: int
    min_distance: float
    min_self_distance_abs: float
    min_gradient_norm: float
    boundary_normal_range: tuple | None  # (min, max) of <grad d, inward normal> at boundary midpoints
    positive_violations: int
    degenerate_violations: int
    worst_pairs: list

    @property
    def passes(self) -> dict:
        out = {
            "non_negative": self.min_distance >= 0.0,
            "positive": self.positive_violations == 0 and self.min_self_distance_abs <= COINCIDENT_TOL,
            "non_degenerate": self.degenerate_violations == 0,
        }
        if self.boundary_normal_range is not None:
            lo, hi = self.boundary_normal_range
            out["boundary"] = lo >= -1e-6 and hi <= 1e-6
        return out

    def as_dict(self) -> dict:
        return {
            "pairs": self.pairs,
            "excluded": self.excluded,
            "min_distance": self.min_distance,
            "min_self_distance_abs": self.min_self_distance_abs,
            "min_gradient_norm": self.min_gradient_norm,
            "boundary_normal_range": None if self.boundary_normal_range is None else list(self.boundary_normal_range),
            "positive_violations": self.positive_violations,
            "degenerate_violations": self.degenerate_violations,
            "passes": self.passes,
        }


def _safe_value_and_gradient(pm, x, y):
    """Evaluate in one go; on a cut-locus failure retry pairwise and mark the bad pairs."""
    n = len(x)
    try:
        d, g = pm.value_and_gradient(x, y)
        return np.atleast_1d(d), np.atleast_2d(g), np.zeros(n, dtype=bool)
    except CutLocusError:
        pass
    d = np.full(n, np.nan)
    g = None
    cut = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            di, gi = pm.value_and_gradient(pm.take(x, slice(i, i + 1)), pm.take(y, slice(i, i + 1)))
        except CutLocusError:
            cut[i] = True
            continue
        if g is None:
            g = np.full((n, np.atleast_2d(gi).shape[1]), np.nan)
        d[i], g[i] = np.atleast_1d(di)[0], np.atleast_2d(gi)[0]
    return d, g, cut


def premetric_audit(pm: Premetric, sample_pairs: int = 10_000, seed: int = 0, boundary_targets: int = 100):
    """Check non-negativity, positivity and non-degeneracy on random pairs (plus the boundary condition on meshes)."""
    from .rng import make_rng

    rng = make_rng(seed, stream=11)
    x, y = pm.sample(rng, sample_pairs), pm.sample(rng, sample_pairs)
    if isinstance(pm, GeodesicPremetric) and isinstance(pm.manifold, Sphere):
        # Near-antipodal pairs lie on the cut locus: excluded and counted.
        keep = pm.manifold.dist(x, y) < np.pi - 1e-6
        x, y = x[keep], y[keep]
    d, g, cut = _safe_value_and_gradient(pm, x, y)
    excluded = sample_pairs - len(d) + int(cut.sum())
    ok = ~cut
    self_d = np.atleast_1d(pm.value(x, x))
    gn = np.sqrt(np.maximum(np.atleast_1d(pm.sq_norm(x, np.nan_to_num(g))), 0.0))
    pos_bad = ok & (d <= COINCIDENT_TOL)
    deg_bad = ok & ~pos_bad & (~np.isfinite(gn) | (gn <= DEGENERATE_GRAD_TOL))
    order = np.argsort(np.where(ok, gn, np.inf))[:5]
    coords_x, coords_y = pm.coords(x), pm.coords(y)
    worst = [
        {"x": coords_x[i].tolist(), "y": coords_y[i].tolist(), "d": float(d[i]), "grad_norm": float(gn[i])}
        for i in order
        if ok[i]
    ]
    for i in np.flatnonzero(pos_bad | deg_bad)[:20]:
        log.warning("premetric violation at pair %d: d=%.3g |grad|=%.3g", i, d[i], gn[i])

    boundary = None
    if isinstance(pm, SpectralPremetric) and pm.mesh.face_boundary_mask.any():
        boundary = boundary_normal_range(pm, boundary_targets, rng)
    return AuditReport(
        pairs=sample_pairs,
        excluded=excluded,
        min_distance=float(np.nanmin(np.where(ok, d, np.inf))) if ok.any() else float("nan"),
        min_self_distance_abs=float(np.max(np.abs(self_d))),
        min_gradient_norm=float(np.min(np.where(ok, gn, np.inf))) if ok.any() else float("nan"),
        boundary_normal_range=boundary,
        positive_violations=int(pos_bad.sum()),
        degenerate_violations=int(deg_bad.sum()),
        worst_pairs=worst,
    )


def boundary_midpoints(mesh: TriangleMesh):
    """MeshPoints at the midpoint of every boundary edge and the local edge index."""
    face, local = np.nonzero(mesh.face_boundary_mask)
    bary = np.full((len(face), 3), 0.5)
    bary[np.arange(len(face)), local] = 0.0
    return MeshPoint(face, bary), local


def boundary_normal_range(pm: SpectralPremetric, n_targets: int, rng):
    """Range of <grad d(x, y), n_in(x)> over boundary-edge midpoints x and random targets y.

    With the natural boundary condition the component vanishes, so the
    field -grad d neither leaves the mesh nor is pushed against the wall.
    """
    mesh = pm.mesh
    mids, local = boundary_midpoints(mesh)
    normals = mesh.edge_inward_normals[mids.face, local]
    targets = sample_uniform(mesh, n_targets, rng)
    lo, hi = np.inf, -np.inf
    for j in range(n_targets):
        y = MeshPoint(np.repeat(targets.face[j], len(mids)), np.repeat(targets.bary[j : j + 1], len(mids), axis=0))
        d, g = pm.value_and_gradient(mids, y)
        ok = d >= COINCIDENT_TOL
        comp = np.einsum("bd,bd->b", g[ok], normals[ok])
        if comp.size:
            lo, hi = min(lo, float(comp.min())), max(hi, float(comp.max()))
    return lo, hi


def projection_residual(mesh: TriangleMesh, p: MeshPoint) -> np.ndarray:
    """Distance between stored mesh points and their exact closest point (zero when on the mesh)."""
    pos = p.positions(mesh)
    return np.linalg.norm(closest_point(mesh, pos).positions(mesh) - pos, axis=1)
