"""Triangle-mesh manifolds: I/O, cotangent Laplacian, Neumann eigenbasis,
spectral distances and closest-point projection.

Vertices may be 2-D (mazes) or 3-D.  Continuous points on the mesh are kept as
a face index plus barycentric coordinates; every routine is vectorised over a
batch of such points.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from .errors import (
    ContractViolation,
    DegenerateFaceError,
    DegenerateGradientError,
    MeshError,
    MeshParseError,
    NonManifoldEdgeError,
    NumericError,
)
from .io import atomic_write_bytes

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
COT_CLAMP = 1e6
BOUNDARY_BARY_TOL = 1e-9
BIHARMONIC_MIN_EIG = 1e-6


class TriangleMesh:
    """Immutable triangle mesh with derived incidence data.

    Parameters
    ----------
    vertices : (V, D) array, D in {2, 3}
    faces : (F, 3) integer array of vertex indices
    validate : run the manifold/orientation/degeneracy checks
    """

    def __init__(self, vertices, faces, validate=True):
        vertices = np.array(vertices, dtype=float)
        faces = np.array(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError(f"vertices must be (V, 2) or (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshParseError(f"faces must be (F, 3) triangles, got {faces.shape}")
        if len(faces) == 0:
            raise MeshError("mesh has no faces")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshParseError("face references a vertex index out of range")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        self.vertices = vertices
        self.faces = faces
        if validate:
            self.validate()

    # ------------------------------------------------------------ basics
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def corners(self):
        """(F, 3, D) vertex coordinates per face."""
        return self.vertices[self.faces]

    @cached_property
    def face_areas(self):
        c = self.corners
        e1, e2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
        g11 = np.einsum("ij,ij->i", e1, e1)
        g22 = np.einsum("ij,ij->i", e2, e2)
        g12 = np.einsum("ij,ij->i", e1, e2)
        return 0.5 * np.sqrt(np.maximum(g11 * g22 - g12**2, 0.0))

    @cached_property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def centroids(self):
        return self.corners.mean(axis=1)

    @cached_property
    def _edges(self):
        """Directed half-edges (F*3, 2): local edge i is opposite local vertex i."""
        f = self.faces
        return np.stack([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]], axis=1).reshape(-1, 2)

    @cached_property
    def _edge_keys(self):
        e = np.sort(self._edges, axis=1)
        _, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        return inverse.reshape(-1), counts

    @cached_property
    def boundary_edges(self):
        """(E_b, 2) directed boundary edges (edges with exactly one incident face)."""
        inverse, counts = self._edge_keys
        return self._edges[counts[inverse] == 1]

    @cached_property
    def face_boundary_mask(self):
        """(F, 3) bool: local edge i (opposite vertex i) lies on the boundary."""
        inverse, counts = self._edge_keys
        return (counts[inverse] == 1).reshape(-1, 3)

    @cached_property
    def bary_gradients(self):
        """(F, 3, D) gradients of the three barycentric hat functions inside each face."""
        c = self.corners
        e = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)  # (F, D, 2)
        gram = np.einsum("fdi,fdj->fij", e, e)
        g12 = np.einsum("fdi,fij->fdj", e, np.linalg.inv(gram))  # columns: grad b1, grad b2
        g1, g2 = g12[:, :, 0], g12[:, :, 1]
        return np.stack([-g1 - g2, g1, g2], axis=1)

    @cached_property
    def face_normals(self):
        if self.dim == 2:
            return np.tile([0.0, 0.0, 1.0], (self.n_faces, 1))
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def edge_inward_normals(self):
        """(F, 3, D) unit in-plane normals of local edge i pointing into the face."""
        g = self.bary_gradients
        return g / np.linalg.norm(g, axis=2, keepdims=True)

    @cached_property
    def face_rings(self):
        """(F, R) faces sharing at least one vertex with each face, padded with the face itself."""
        inc = sp.csr_matrix(
            (np.ones(3 * self.n_faces), (np.repeat(np.arange(self.n_faces), 3), self.faces.ravel())),
            shape=(self.n_faces, self.n_vertices),
        )
        adj = (inc @ inc.T).tocsr()
        adj.sort_indices()
        width = int(np.diff(adj.indptr).max())
        rings = np.repeat(np.arange(self.n_faces)[:, None], width, axis=1)
        for f in range(self.n_faces):
            nb = adj.indices[adj.indptr[f] : adj.indptr[f + 1]]
            rings[f, : len(nb)] = nb
        return rings

    @cached_property
    def _centroid_tree(self):
        return cKDTree(self.centroids)

    @cached_property
    def _face_radius(self):
        return float(np.max(np.linalg.norm(self.corners - self.centroids[:, None, :], axis=2)))

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.digest()

    # ------------------------------------------------------------ checks
    def validate(self):
        bad = np.flatnonzero(self.face_areas <= MIN_FACE_AREA)
        if len(bad):
            raise DegenerateFaceError(f"degenerate faces (area <= {MIN_FACE_AREA:g}): {bad[:10].tolist()}")
        inverse, counts = self._edge_keys
        if np.any(counts > 2):
            sorted_edges = np.sort(self._edges, axis=1)
            offenders = np.unique(sorted_edges[counts[inverse] > 2], axis=0)
            raise NonManifoldEdgeError(f"edges with more than two faces: {offenders[:10].tolist()}")
        # Consistent orientation: the two half-edges of an interior edge run in opposite directions.
        interior = counts[inverse] == 2
        directed = self._edges[interior]
        keys = inverse[interior]
        order = np.argsort(keys, kind="stable")
        pairs = directed[order].reshape(-1, 2, 2)
        if np.any(np.all(pairs[:, 0] == pairs[:, 1], axis=1)):
            raise NonManifoldEdgeError("inconsistent face orientation")

    def connected_components(self) -> int:
        inc = sp.csr_matrix(
            (np.ones(3 * self.n_faces), (np.repeat(np.arange(self.n_faces), 3), self.faces.ravel())),
            shape=(self.n_faces, self.n_vertices),
        )
        adj = inc @ inc.T  # faces sharing a vertex
        n, _ = connected_components(adj, directed=False)
        return int(n)

    # ------------------------------------------------------------ points
    def positions(self, face, bary):
        return np.einsum("bi,bid->bd", bary, self.corners[face])

    def normalized(self, lo=-1.0, hi=1.0, margin=1e-6) -> "TriangleMesh":
        """Uniformly rescale so every coordinate lies strictly inside (lo, hi)."""
        v = self.vertices
        vmin, vmax = v.min(axis=0), v.max(axis=0)
        center = 0.5 * (vmin + vmax)
        half = 0.5 * float(np.max(vmax - vmin))
        scale = 0.5 * (hi - lo) * (1.0 - margin) / half
        return TriangleMesh((v - center) * scale + 0.5 * (lo + hi), self.faces, validate=False)


# ---------------------------------------------------------------- I/O


def _parse_face(tokens, lineno, path):
    idx = [int(t.split("/")[0]) for t in tokens]
    if len(idx) != 3:
        raise MeshParseError(f"{path}:{lineno}: face with {len(idx)} vertices (triangles only): {' '.join(tokens)}")
    return idx


def load_mesh(path, normalize=True) -> TriangleMesh:
    """Read a triangle mesh from OFF or OBJ and (by default) rescale it into (-1, 1)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshParseError(f"cannot read {path}: {exc}") from exc
    suffix = path.suffix.lower()
    try:
        if suffix == ".off":
            verts, faces = _read_off(text, path)
        elif suffix == ".obj":
            verts, faces = _read_obj(text, path)
        else:
            raise MeshParseError(f"{path}: unsupported mesh format {suffix!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshParseError(f"{path}: {exc}") from exc
    mesh = TriangleMesh(verts, faces)
    return mesh.normalized() if normalize else mesh


def _read_off(text, path):
    lines = [(i + 1, ln.split("#")[0].strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines or not lines[0][1].upper().startswith("OFF"):
        raise MeshParseError(f"{path}: missing OFF header")
    rest = lines[0][1][3:].split()
    body = lines[1:]
    if not rest:
        rest = body[0][1].split()
        body = body[1:]
    nv, nf = int(rest[0]), int(rest[1])
    verts = [[float(t) for t in ln.split()[:3]] for _, ln in body[:nv]]
    faces = []
    for lineno, ln in body[nv : nv + nf]:
        tok = ln.split()
        count = int(tok[0])
        if count != 3:
            raise MeshParseError(f"{path}:{lineno}: face with {count} vertices (triangles only): {ln}")
        faces.append([int(t) for t in tok[1:4]])
    if len(verts) != nv or len(faces) != nf:
        raise MeshParseError(f"{path}: expected {nv} vertices and {nf} faces")
    return np.array(verts), np.array(faces)


def _read_obj(text, path):
    verts, faces = [], []
    for lineno, ln in enumerate(text.splitlines(), start=1):
        tok = ln.split("#")[0].split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            faces.append([i - 1 for i in _parse_face(tok[1:], lineno, path)])
    return np.array(verts), np.array(faces)


def off_bytes(mesh: TriangleMesh) -> bytes:
    out = [f"OFF\n{mesh.n_vertices} {mesh.n_faces} 0\n"]
    for v in mesh.vertices:
        out.append(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}\n")
    return "".join(out).encode()


def save_off(mesh: TriangleMesh, path):
    atomic_write_bytes(path, off_bytes(mesh))


# ---------------------------------------------------------------- generators


def icosphere(level: int) -> TriangleMesh:
    """Unit-sphere triangulation by repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    faces = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(level):
        verts, faces = _midpoint_subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriangleMesh(verts, faces)


def _midpoint_subdivide(verts, faces):
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    base = len(verts)
    nf = len(faces)
    m01, m12, m20 = (base + inverse[k * nf : (k + 1) * nf] for k in range(3))
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new = np.concatenate(
        [np.stack(s, axis=1) for s in ((a, m01, m20), (m01, b, m12), (m20, m12, c), (m01, m12, m20))]
    )
    return np.concatenate([verts, mids]), new


def subdivide(mesh: TriangleMesh, rounds: int = 1) -> TriangleMesh:
    """1-to-4 midpoint subdivision without smoothing (geometry stays piecewise linear)."""
    verts, faces = mesh.vertices, mesh.faces
    for _ in range(rounds):
        verts, faces = _midpoint_subdivide(verts, faces)
    return TriangleMesh(verts, faces, validate=False)


def square_grid(n: int, size: float = 1.0) -> TriangleMesh:
    """Planar n x n grid of squares over [0, size]^2, two triangles per square (alternating diagonals)."""
    xs = np.linspace(0.0, size, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    verts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    faces = []
    for j in range(n):
        for i in range(n):
            v00 = j * (n + 1) + i
            v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
            if (i + j) % 2 == 0:
                faces += [[v00, v10, v11], [v00, v11, v01]]
            else:
                faces += [[v00, v10, v01], [v10, v11, v01]]
    return TriangleMesh(verts, faces)


def blob(level: int = 4, amplitude: float = 0.25, seed: int = 0) -> TriangleMesh:
    """Genus-0 test surface: an icosphere with a smooth random radial bump field."""
    sphere = icosphere(level)
    rng = np.random.default_rng(seed)
    v = sphere.vertices
    centers = rng.standard_normal((4, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    weights = rng.uniform(-1.0, 1.0, 4)
    bump = np.exp(-np.sum((v[:, None, :] - centers[None]) ** 2, axis=2) / 0.4) @ weights
    verts = v * (1.0 + amplitude * bump)[:, None] * np.array([1.3, 1.0, 0.8])
    return TriangleMesh(verts, sphere.faces).normalized()


# ---------------------------------------------------------------- Laplacian


def cotangent_laplacian(mesh: TriangleMesh):
    """Linear-FEM stiffness matrix and lumped (one-third area) mass.

    Returns
    -------
    stiffness : csr_matrix, symmetric PSD, rows sum to zero
    mass : dia_matrix, diagonal, strictly positive
    """
    c = mesh.corners
    area2 = 2.0 * mesh.face_areas
    rows, cols, vals = [], [], []
    clamped = 0
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        u, v = c[:, j] - c[:, i], c[:, k] - c[:, i]
        cot = np.einsum("fd,fd->f", u, v) / area2
        clamped += int(np.sum(np.abs(cot) > COT_CLAMP))
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        # Angle at corner i weighs the opposite edge (j, k).
        rows += [mesh.faces[:, j], mesh.faces[:, k]]
        cols += [mesh.faces[:, k], mesh.faces[:, j]]
        vals += [-0.5 * cot, -0.5 * cot]
    if clamped:
        warnings.warn(f"clamped {clamped} cotangent weights to +/-{COT_CLAMP:g}", RuntimeWarning, stacklevel=2)
    n = mesh.n_vertices
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    stiffness = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    lumped = np.zeros(n)
    np.add.at(lumped, mesh.faces.ravel(), np.repeat(mesh.face_areas / 3.0, 3))
    return stiffness, sp.diags(lumped)


# ---------------------------------------------------------------- eigenbasis

SPEC_MAGIC = b"RFMSPEC\x00"
SPEC_VERSION = 1


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray  # (k,)
    eigenfunctions: np.ndarray  # (V, k)
    mass: np.ndarray  # (V,)
    mesh_digest: bytes = b""
    residuals: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def truncated(self, k: int) -> "SpectralBasis":
        if k > self.k:
            raise ContractViolation(f"requested {k} modes from a basis of {self.k}")
        res = None if self.residuals is None else self.residuals[:k]
        return SpectralBasis(self.eigenvalues[:k], self.eigenfunctions[:, :k], self.mass, self.mesh_digest, res)

    # cache -----------------------------------------------------------------
    def to_bytes(self) -> bytes:
        v, k = self.eigenfunctions.shape
        digest = self.mesh_digest.ljust(32, b"\x00")[:32]
        header = SPEC_MAGIC + struct.pack("<III", SPEC_VERSION, k, v) + digest
        res = self.residuals if self.residuals is not None else np.full(k, np.nan)
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.eigenvalues, self.eigenfunctions, self.mass, res)
        )
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpectralBasis":
        if data[:8] != SPEC_MAGIC:
            raise MeshError("not an eigenbasis cache (bad magic)")
        version, k, v = struct.unpack("<III", data[8:20])
        if version != SPEC_VERSION:
            raise MeshError(f"unsupported eigenbasis cache version {version}")
        digest = data[20:52]
        arr = np.frombuffer(data[52:], dtype="<f8")
        expected = k + v * k + v + k
        if arr.size != expected:
            raise MeshError("truncated eigenbasis cache")
        lam = arr[:k].copy()
        phi = arr[k : k + v * k].reshape(v, k).copy()
        mass = arr[k + v * k : k + v * k + v].copy()
        res = arr[k + v * k + v :].copy()
        return cls(lam, phi, mass, digest, res)

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path, mesh: TriangleMesh | None = None) -> "SpectralBasis":
        basis = cls.from_bytes(Path(path).read_bytes())
        if mesh is not None and basis.mesh_digest != mesh.digest():
            raise MeshError(f"eigenbasis cache {path} is stale for this mesh (hash mismatch)")
        return basis


def _fix_signs(phi):
    """Make the first clearly nonzero entry of each column positive."""
    phi = phi.copy()
    for j in range(phi.shape[1]):
        col = phi[:, j]
        idx = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if len(idx) and col[idx[0]] < 0:
            phi[:, j] = -col
    return phi


def solve_eigenbasis(stiffness, mass, k: int, mesh_digest: bytes = b"", tol: float = 1e-10) -> SpectralBasis:
    """Smallest-k generalized eigenpairs stiffness phi = lambda mass phi (Neumann; no boundary rows)."""
    n = stiffness.shape[0]
    if not 1 <= k < n:
        raise ContractViolation(f"k must satisfy 1 <= k < vertex count ({n}), got {k}")
    mass_diag = mass.diagonal()
    sigma = -0.1 / mass_diag.sum()
    v0 = np.random.default_rng(0).standard_normal(n)
    maxiter = int(10 * k * math.sqrt(n)) + 100
    # A few guard modes keep Lanczos from dropping one member of a degenerate pair at the cut.
    k_solve = min(n - 1, k + 10)
    try:
        lam, phi = eigsh(
            stiffness.tocsc(), k=k_solve, M=mass.tocsc(), sigma=sigma, which="LM", v0=v0, tol=tol, maxiter=maxiter
        )
    except ArpackNoConvergence as exc:
        found = len(exc.eigenvalues)
        raise NumericError(f"eigensolver did not converge after {maxiter} iterations: {found} of {k_solve} pairs") from exc
    order = np.argsort(lam)[:k]
    lam, phi = lam[order], phi[:, order]
    # Re-normalise against the lumped mass explicitly.
    norms = np.sqrt(np.einsum("vk,v,vk->k", phi, mass_diag, phi))
    phi = _fix_signs(phi / norms)
    lam = np.where(np.abs(lam) < 1e-12, 0.0, lam)
    # Residual in the M^{-1} norm (phi is M-normalised), relative to 1 + |lambda|.
    r = stiffness @ phi - lam * (mass_diag[:, None] * phi)
    residuals = np.sqrt(np.einsum("vk,v->k", r**2, 1.0 / mass_diag)) / (1.0 + np.abs(lam))
    return SpectralBasis(lam, phi, mass_diag.copy(), mesh_digest, residuals)


def mesh_eigenbasis(mesh: TriangleMesh, k: int) -> SpectralBasis:
    stiffness, mass = cotangent_laplacian(mesh)
    return solve_eigenbasis(stiffness, mass, k, mesh.digest())


# ---------------------------------------------------------------- mesh points


@dataclass
class MeshPoint:
    """Batch of points on a mesh: face indices (B,) and barycentric weights (B, 3)."""

    face: np.ndarray
    bary: np.ndarray

    def __post_init__(self):
        self.face = np.atleast_1d(np.asarray(self.face, dtype=np.int64))
        self.bary = np.atleast_2d(np.asarray(self.bary, dtype=float))

    def __len__(self):
        return len(self.face)

    def __getitem__(self, idx):
        return MeshPoint(self.face[idx], self.bary[idx])

    def validate(self, mesh: TriangleMesh, tol=1e-9):
        if np.any((self.face < 0) | (self.face >= mesh.n_faces)):
            raise ContractViolation("mesh point face index out of range")
        if np.any(self.bary < -tol) or np.any(np.abs(self.bary.sum(axis=1) - 1.0) > tol):
            raise ContractViolation("barycentric coordinates must be non-negative and sum to one")
        return self

    def positions(self, mesh):
        return mesh.positions(self.face, self.bary)


def vertex_point(mesh: TriangleMesh, vertex: int) -> MeshPoint:
    f, local = np.argwhere(mesh.faces == vertex)[0]
    bary = np.zeros(3)
    bary[local] = 1.0
    return MeshPoint([f], [bary])


def eval_eigenfunctions(basis: SpectralBasis, mesh: TriangleMesh, p: MeshPoint):
    """Barycentric-linear interpolation of all k eigenfunctions, shape (B, k)."""
    if np.any((p.face < 0) | (p.face >= mesh.n_faces)):
        raise ContractViolation("face index out of range")
    vals = basis.eigenfunctions[mesh.faces[p.face]]  # (B, 3, k)
    return np.matmul(p.bary[:, None, :], vals)[:, 0]


def eigenfunction_gradients(basis: SpectralBasis, mesh: TriangleMesh, face):
    """Per-face constant gradients of the interpolated eigenfunctions, shape (B, k, D)."""
    face = np.atleast_1d(face)
    if np.any((face < 0) | (face >= mesh.n_faces)):
        raise ContractViolation("face index out of range")
    vals = basis.eigenfunctions[mesh.faces[face]]  # (B, 3, k)
    return np.einsum("bid,bik->bkd", mesh.bary_gradients[face], vals)


# ---------------------------------------------------------------- spectral distances


class Biharmonic:
    name = "biharmonic"

    def weights(self, lam):
        lam = np.asarray(lam, dtype=float)
        return np.where(lam > BIHARMONIC_MIN_EIG, 1.0 / np.where(lam > BIHARMONIC_MIN_EIG, lam, 1.0) ** 2, 0.0)

    def __repr__(self):
        return "Biharmonic()"


class Diffusion:
    name = "diffusion"

    def __init__(self, tau: float = 0.25):
        if tau <= 0:
            raise ContractViolation("diffusion time must be positive")
        self.tau = float(tau)

    def weights(self, lam):
        return np.exp(-2.0 * self.tau * np.asarray(lam, dtype=float))

    def __repr__(self):
        return f"Diffusion(tau={self.tau:g})"


def weighting_from_name(name: str, tau: float = 0.25):
    name = name.lower()
    if name == "biharmonic":
        return Biharmonic()
    if name == "diffusion":
        return Diffusion(tau)
    raise ContractViolation(f"unknown spectral weighting {name!r}")


def spectral_distance(basis, mesh, x: MeshPoint, y: MeshPoint, weighting):
    w = weighting.weights(basis.eigenvalues)
    diff = eval_eigenfunctions(basis, mesh, x) - eval_eigenfunctions(basis, mesh, y)
    return np.sqrt(np.maximum(diff**2 @ w, 0.0))


def boundary_projector(mesh: TriangleMesh, p: MeshPoint, tol=BOUNDARY_BARY_TOL):
    """Inward normals of boundary edges that the points lie on, shape (B, 3, D) (zeros elsewhere)."""
    on_edge = (p.bary <= tol) & mesh.face_boundary_mask[p.face]
    return mesh.edge_inward_normals[p.face] * on_edge[..., None]


def impose_neumann(mesh: TriangleMesh, p: MeshPoint, vectors):
    """Remove normal components of ``vectors`` (B, ..., D) at points lying on boundary edges.

    Piecewise-linear eigenfunctions satisfy the natural boundary condition only
    weakly; at boundary points the zero normal derivative is enforced here.  At
    corners (two boundary edges) only inward-pointing parts are removed, which
    keeps the descent direction -grad d from exiting without zeroing it.
    """
    normals = boundary_projector(mesh, p)
    n_edges = np.count_nonzero(np.any(normals != 0, axis=2), axis=1)
    if not np.any(n_edges):
        return vectors
    out = np.array(vectors, dtype=float, copy=True)
    extra = out.ndim - 2
    for i in range(3):
        n = normals[:, i].reshape(len(p), *([1] * extra), -1)
        comp = np.sum(out * n, axis=-1, keepdims=True)
        single = (n_edges == 1).reshape(len(p), *([1] * (extra + 1)))
        # An inward-pointing gradient would send the flow -grad d out of the mesh.
        corner_comp = np.maximum(comp, 0.0)
        out -= np.where(single, comp, corner_comp) * n
    return out


def spectral_distance_gradient(basis, mesh, x: MeshPoint, y: MeshPoint, weighting, return_distance=False):
    """In-plane gradient of the spectral distance with respect to its first argument, shape (B, D)."""
    w = weighting.weights(basis.eigenvalues)
    diff = eval_eigenfunctions(basis, mesh, x) - eval_eigenfunctions(basis, mesh, y)
    d = np.sqrt(np.maximum(diff**2 @ w, 0.0))
    if np.any(d < 1e-12):
        raise DegenerateGradientError("spectral distance gradient undefined at coincident points")
    # contract over modes first: sum_k c_k grad phi_k = sum_i grad(bary_i) * sum_k c_k phi_k(v_i)
    vals = basis.eigenfunctions[mesh.faces[x.face]]  # (B, 3, k)
    per_corner = np.matmul(vals, (w * diff)[:, :, None])  # (B, 3, 1)
    combined = np.sum(mesh.bary_gradients[x.face] * per_corner, axis=1)
    g = impose_neumann(mesh, x, combined / d[:, None])
    return (g, d) if return_distance else g


# ---------------------------------------------------------------- closest points


def closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to p; returns barycentrics (N, 3) and points (N, D).

    Region classification follows the standard Voronoi-region test for a
    point against a triangle.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...d,...d->...", ab, ap)
    d2 = np.einsum("...d,...d->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...d,...d->...", ab, bp)
    d4 = np.einsum("...d,...d->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...d,...d->...", ab, cp)
    d6 = np.einsum("...d,...d->...", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_in, w_in = vb * denom, vc * denom

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    one, zero = np.ones_like(d1), np.zeros_like(d1)
    bv = np.select(conds, [zero, one, v_ab, zero, zero, 1 - w_bc], v_in)
    bw = np.select(conds, [zero, zero, zero, one, w_ac, w_bc], w_in)
    bu = 1.0 - bv - bw
    bary = np.stack([bu, bv, bw], axis=-1)
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=-1, keepdims=True)
    pts = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    return bary, pts


def _best_of_candidates(mesh, raw, cand):
    """Evaluate candidate faces (N, C) and keep the nearest; returns face, bary, point, distance."""
    corners = mesh.corners[cand]  # (N, C, 3, D)
    bary, pts = closest_on_triangles(raw[:, None, :], corners[:, :, 0], corners[:, :, 1], corners[:, :, 2])
    dist = np.linalg.norm(pts - raw[:, None, :], axis=-1)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(raw))
    return cand[rows, best], bary[rows, best], pts[rows, best], dist[rows, best]


def closest_point(mesh: TriangleMesh, raw, k_candidates: int = 16):
    """Exact closest point on the mesh (minimum over all faces) for each row of ``raw``.

    Returns a MeshPoint.  Candidate faces come from a centroid KD-tree; a
    bounding argument widens the search whenever the candidate list might
    miss the true minimiser.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if mesh.n_faces == 0:
        raise MeshError("empty mesh")
    if raw.shape[1] != mesh.dim:
        raise ContractViolation(f"expected {mesh.dim}-D coordinates, got {raw.shape[1]}")
    if not np.all(np.isfinite(raw)):
        raise ContractViolation("non-finite coordinates")
    k = min(k_candidates, mesh.n_faces)
    cdist, cand = mesh._centroid_tree.query(raw, k=k)
    cand = np.asarray(cand).reshape(len(raw), k)
    cdist = np.asarray(cdist).reshape(len(raw), k)
    face, bary, _, dist = _best_of_candidates(mesh, raw, cand)
    if k < mesh.n_faces:
        reach = dist + mesh._face_radius
        unsure = np.flatnonzero(cdist[:, -1] <= reach)
        for i in unsure:
            ball = np.array(mesh._centroid_tree.query_ball_point(raw[i], reach[i] + 1e-12), dtype=np.int64)
            if len(ball) == 0:
                continue
            f, b, _, dd = _best_of_candidates(mesh, raw[i : i + 1], ball[None, :])
            if dd[0] < dist[i]:
                face[i], bary[i], dist[i] = f[0], b[0], dd[0]
    return MeshPoint(face, bary)


class MeshProjector:
    """Projection onto the mesh with a face hint, for small steps along a trajectory.

    Searches the vertex one-ring of the hinted face, walks to the winning face
    a few times, and falls back to the global search when the walk does not
    settle or the jump is large compared with the local faces.
    """

    def __init__(self, mesh: TriangleMesh, max_walk: int = 4):
        self.mesh = mesh
        self.max_walk = max_walk
        self.fallbacks = 0
        edge = np.linalg.norm(mesh.corners - np.roll(mesh.corners, 1, axis=1), axis=2)
        self._face_scale = edge.min(axis=1)

    def project(self, raw, hint=None) -> MeshPoint:
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        if hint is None:
            return closest_point(self.mesh, raw)
        face = np.asarray(hint, dtype=np.int64).copy()
        settled = np.zeros(len(raw), dtype=bool)
        bary = np.zeros((len(raw), 3))
        dist = np.zeros(len(raw))
        active = np.arange(len(raw))
        for _ in range(self.max_walk):
            cand = self.mesh.face_rings[face[active]]
            f, b, _, d = _best_of_candidates(self.mesh, raw[active], cand)
            stay = f == face[active]
            bary[active], dist[active] = b, d
            settled[active[stay]] = True
            face[active] = f
            active = active[~stay]
            if len(active) == 0:
                break
        suspicious = ~settled | (dist > self._face_scale[face])
        if np.any(suspicious):
            idx = np.flatnonzero(suspicious)
            self.fallbacks += len(idx)
            exact = closest_point(self.mesh, raw[idx])
            face[idx], bary[idx] = exact.face, exact.bary
        return MeshPoint(face, bary)


def project_to_face_plane(mesh: TriangleMesh, face, vectors):
    """Orthogonal projection of ambient vectors (B, D) onto the plane of each face."""
    if mesh.dim == 2:
        return np.asarray(vectors, dtype=float)
    n = mesh.face_normals[face]
    return vectors - np.sum(vectors * n, axis=1, keepdims=True) * n


def sample_uniform(mesh: TriangleMesh, n: int, rng) -> MeshPoint:
    """Area-weighted face choice followed by a uniform barycentric draw."""
    prob = mesh.face_areas / mesh.total_area
    face = rng.choice(mesh.n_faces, size=n, p=prob)
    r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return MeshPoint(face, bary)
