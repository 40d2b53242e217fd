"""Tangent vector fields parameterised by an MLP.

The field at x is ``g(y)^{-1/2} P_y v_theta(t, y)`` with ``y = pi(x)`` the
projection onto the manifold and ``P_y`` the tangent projection.  Each
geometry supplies an adapter with the map ``w -> v``, its adjoint (for the
loss gradient), its derivative in ``y`` (for the divergence) and the metric
correction of the Riemannian divergence.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .geometry import SPD, FlatTorus, Manifold, PoincareBall, Sphere, sqrt_frechet, spd_sqrt, sym, wrap_angle
from .mesh import MeshPoint, TriangleMesh
from .nn import MLP, ParameterSet


class Adapter:
    """Identity geometry (Euclidean / flat); subclasses override as needed."""

    tag = "euclidean"
    periodic = False

    def __init__(self, dim):
        self.dim = int(dim)

    @property
    def feature_dim(self):
        return self.dim

    def project(self, x):
        """Return (y, ctx): coordinates on the manifold and geometry context."""
        return np.atleast_2d(np.asarray(x, dtype=float)), None

    def features(self, y):
        return y, None  # (features, d features / d y) ; None means identity

    def apply(self, y, ctx, w):
        return w

    def adjoint(self, y, ctx, cot):
        return cot

    def jacobian(self, y, ctx, w, jw):
        return jw

    def div_correction(self, y, v):
        return np.zeros(len(y))

    def sq_norm(self, y, v):
        return np.sum(v * v, axis=1)

    def lower(self, y, r):
        """Metric applied to tangent vectors (index lowering)."""
        return r

    def tangent_residual(self, y, ctx, v):
        return np.zeros(len(y))


class SphereAdapter(Adapter):
    def __init__(self, m: Sphere):
        super().__init__(m.ambient_dim)
        self.manifold = m
        self.tag = m.tag

    def project(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.manifold.projx(x), None

    def apply(self, y, ctx, w):
        return w - np.sum(y * w, axis=1, keepdims=True) * y

    adjoint = apply

    def jacobian(self, y, ctx, w, jw):
        eye = np.eye(self.dim)
        proj = eye - y[:, :, None] * y[:, None, :]
        yw = np.sum(y * w, axis=1)
        inner = proj @ jw - yw[:, None, None] * eye - y[:, :, None] * w[:, None, :]
        return inner @ proj

    def tangent_residual(self, y, ctx, v):
        return np.abs(np.sum(y * v, axis=1))


class TorusAdapter(Adapter):
    """Flat torus in angle coordinates; optional (cos, sin) input features."""

    def __init__(self, m: FlatTorus, periodic: bool = True):
        super().__init__(m.ambient_dim)
        self.manifold = m
        self.periodic = bool(periodic)
        self.tag = m.tag

    @property
    def feature_dim(self):
        return 2 * self.dim if self.periodic else self.dim

    def project(self, x):
        return wrap_angle(np.atleast_2d(np.asarray(x, dtype=float))), None

    def features(self, y):
        if not self.periodic:
            return y, None
        c, s = np.cos(y), np.sin(y)
        n = self.dim
        de = np.zeros((len(y), 2 * n, n))
        idx = np.arange(n)
        de[:, idx, idx] = -s
        de[:, n + idx, idx] = c
        return np.concatenate([c, s], axis=1), de


class BallAdapter(Adapter):
    def __init__(self, m: PoincareBall):
        super().__init__(m.ambient_dim)
        self.manifold = m
        self.tag = m.tag

    def project(self, x):
        return self.manifold.projx(np.atleast_2d(np.asarray(x, dtype=float))), None

    @staticmethod
    def _scale(y):
        return 0.5 * (1.0 - np.sum(y * y, axis=1))

    def apply(self, y, ctx, w):
        return self._scale(y)[:, None] * w

    adjoint = apply

    def jacobian(self, y, ctx, w, jw):
        return self._scale(y)[:, None, None] * jw - w[:, :, None] * y[:, None, :]

    def div_correction(self, y, v):
        return 0.5 * np.sum(v * self.manifold.grad_metric_log_det(y), axis=1)

    def sq_norm(self, y, v):
        return self.manifold.inner(y, v, v)

    def lower(self, y, r):
        return self.manifold.metric(y, r)


class SPDAdapter(Adapter):
    """SPD(n) in flattened n*n coordinates; v = X^{1/2} sym(W) X^{1/2}."""

    def __init__(self, m: SPD):
        super().__init__(m.ambient_dim)
        self.manifold = m
        self.n = m.n
        self.tag = m.tag
        n2 = self.n * self.n
        p = np.zeros((n2, n2))
        for i in range(self.n):
            for j in range(self.n):
                p[i * self.n + j, i * self.n + j] += 0.5
                p[i * self.n + j, j * self.n + i] += 0.5
        self._psym = p  # vec(sym(E)) = P vec(E)

    def project(self, x):
        y = self.manifold.projx(np.atleast_2d(np.asarray(x, dtype=float)))
        return y, spd_sqrt(self.manifold.mat(y))

    def _mat(self, a):
        return a.reshape(len(a), self.n, self.n)

    def apply(self, y, ctx, w):
        s = ctx
        return (s @ sym(self._mat(w)) @ s).reshape(len(y), -1)

    def adjoint(self, y, ctx, cot):
        s = ctx
        return sym(s @ self._mat(cot) @ s).reshape(len(y), -1)

    def jacobian(self, y, ctx, w, jw):
        s = ctx
        x = self._mat(y)
        wm = sym(self._mat(w))
        jw_sym = jw @ self._psym  # derivative along symmetrised directions
        n2 = self.n * self.n
        out = np.empty((len(y), n2, n2))
        for ab in range(n2):
            e = np.broadcast_to(self._psym[:, ab].reshape(self.n, self.n), x.shape)
            ds = sqrt_frechet(x, e)
            dw = sym(self._mat(jw_sym[:, :, ab]))
            dv = ds @ wm @ s + s @ wm @ ds + s @ dw @ s
            out[:, :, ab] = dv.reshape(len(y), -1)
        return out

    def div_correction(self, y, v):
        return 0.5 * np.sum(v * self.manifold.grad_metric_log_det(y), axis=1)

    def sq_norm(self, y, v):
        return self.manifold.inner(y, v, v)

    def lower(self, y, r):
        return self.manifold.metric(y, r)

    def tangent_residual(self, y, ctx, v):
        m = self._mat(v)
        return np.max(np.abs(m - np.swapaxes(m, 1, 2)).reshape(len(v), -1), axis=1)


class MeshAdapter(Adapter):
    """Piecewise-flat mesh: the field is the network output projected onto the point's face plane."""

    def __init__(self, mesh: TriangleMesh):
        super().__init__(mesh.dim)
        self.mesh = mesh
        self.tag = f"mesh:{mesh.digest().hex()[:16]}"

    def project(self, x):
        if not isinstance(x, MeshPoint):
            raise ContractViolation("mesh fields take MeshPoint inputs")
        return x.positions(self.mesh), x.face

    def _normals(self, face):
        return None if self.mesh.dim == 2 else self.mesh.face_normals[face]

    def apply(self, y, face, w):
        n = self._normals(face)
        return w if n is None else w - np.sum(w * n, axis=1, keepdims=True) * n

    adjoint = apply

    def jacobian(self, y, face, w, jw):
        n = self._normals(face)
        if n is None:
            return jw
        proj = np.eye(3) - n[:, :, None] * n[:, None, :]
        return proj @ jw @ proj

    def tangent_residual(self, y, face, v):
        n = self._normals(face)
        return np.zeros(len(y)) if n is None else np.abs(np.sum(v * n, axis=1))


def adapter_for(space, periodic_torus: bool = True) -> Adapter:
    if isinstance(space, TriangleMesh):
        return MeshAdapter(space)
    if isinstance(space, Sphere):
        return SphereAdapter(space)
    if isinstance(space, FlatTorus):
        return TorusAdapter(space, periodic=periodic_torus)
    if isinstance(space, PoincareBall):
        return BallAdapter(space)
    if isinstance(space, SPD):
        return SPDAdapter(space)
    if isinstance(space, Manifold):
        raise ContractViolation(f"no field adapter for {space!r}")
    return Adapter(int(space))


class VectorField:
    """MLP-backed tangent field on a manifold or mesh."""

    def __init__(self, adapter: Adapter, hidden=(64, 64, 64)):
        self.adapter = adapter
        self.net = MLP(adapter.feature_dim + 1, adapter.dim, hidden)

    @classmethod
    def for_space(cls, space, hidden=(64, 64, 64), periodic_torus=True):
        return cls(adapter_for(space, periodic_torus), hidden)

    def init(self, rng, final_scale=1e-2) -> ParameterSet:
        return self.net.init(rng, final_scale)

    def _inputs(self, t, y):
        feats, dfeat = self.adapter.features(y)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(y),))
        return np.concatenate([feats, t[:, None]], axis=1), dfeat

    # ------------------------------------------------------------ evaluation
    def raw(self, params, t, x):
        """Network output w = v_theta(t, pi(x)) before projection and metric scaling."""
        y, _ = self.adapter.project(x)
        z, _ = self._inputs(t, y)
        return self.net.forward(params, z)

    def __call__(self, params, t, x):
        y, ctx = self.adapter.project(x)
        z, _ = self._inputs(t, y)
        return self.adapter.apply(y, ctx, self.net.forward(params, z))

    def with_jacobian(self, params, t, x):
        """Field values (B, D) and ambient Jacobians d v / d x (B, D, D)."""
        y, ctx = self.adapter.project(x)
        z, dfeat = self._inputs(t, y)
        nf = self.adapter.feature_dim
        w, jz = self.net.input_jacobian(params, z, cols=np.arange(nf))
        jw = jz if dfeat is None else jz @ dfeat
        v = self.adapter.apply(y, ctx, w)
        return v, self.adapter.jacobian(y, ctx, w, jw)

    def input_jacobian(self, params, t, x):
        return self.with_jacobian(params, t, x)[1]

    def divergence(self, params, t, x, return_field=False):
        """Riemannian divergence: ambient trace plus 1/2 v . grad log det g."""
        y, _ = self.adapter.project(x)
        v, jac = self.with_jacobian(params, t, x)
        div = np.trace(jac, axis1=1, axis2=2) + self.adapter.div_correction(y, v)
        return (div, v) if return_field else div

    # ------------------------------------------------------------ gradients
    def loss_gradient(self, params, t, x, closure):
        """Loss and flat parameter gradient for ``closure(v, y) -> (loss, dloss/dv)``."""
        y, ctx = self.adapter.project(x)
        z, _ = self._inputs(t, y)
        w, cache = self.net.forward(params, z, return_cache=True)
        v = self.adapter.apply(y, ctx, w)
        out = closure(v, y)
        if not isinstance(out, tuple) or len(out) != 2:
            raise ContractViolation("loss closure must return (loss, gradient with respect to the field)")
        loss, dv = out
        dv = np.asarray(dv, dtype=float)
        if dv.shape != v.shape:
            raise ContractViolation("loss closure gradient has the wrong shape")
        grad = self.net.backward(params, cache, self.adapter.adjoint(y, ctx, dv))
        return float(loss), grad
