"""Datasets: CSV ingestion, synthetic generators, mesh eigenfunction targets and maze tasks."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation, DataParseError, IOFailure, MeshError
from .geometry import FlatTorus, Manifold, Sphere, TWO_PI, manifold_from_tag, wrap_angle
from .io import atomic_write_bytes, canonical_json
from .likelihood import TruncatedMeshGaussian, WrappedGaussian
from .maze import Maze
from .mesh import MeshPoint, SpectralBasis, TriangleMesh, closest_point, mesh_eigenbasis, subdivide
from .rng import make_rng

DATA_MAGIC = b"RFMDATA\x00"
DATA_VERSION = 1
RESIDUAL_TOL = 1e-9


@dataclass
class Dataset:
    """Points on one space plus a provenance record."""

    tag: str
    points: object  # (N, D) array or MeshPoint
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.points) == 0:
            raise ContractViolation("a dataset needs at least one point")

    def __len__(self):
        return len(self.points)

    @property
    def is_mesh(self):
        return isinstance(self.points, MeshPoint)

    def take(self, idx) -> "Dataset":
        return Dataset(self.tag, self.points[np.asarray(idx)], dict(self.provenance))

    def check(self, space, tol=RESIDUAL_TOL):
        """Full invariant sweep: every point must lie on ``space``."""
        if isinstance(space, TriangleMesh):
            if not self.is_mesh:
                raise ContractViolation("mesh dataset must hold MeshPoint entries")
            self.points.validate(space)
            return
        res = space.point_residual(np.asarray(self.points))
        bad = np.flatnonzero(~(res <= tol))
        if len(bad):
            raise ContractViolation(f"{len(bad)} dataset points are off the manifold (first index {bad[0]})")

    # -------------------------------------------------------------- cache
    def to_bytes(self) -> bytes:
        if self.is_mesh:
            kind, arrays = "mesh", [self.points.face.astype("<i8"), self.points.bary.astype("<f8")]
            dim = 3
        else:
            pts = np.ascontiguousarray(self.points, dtype="<f8")
            kind, arrays, dim = "array", [pts], pts.shape[1]
        head = canonical_json(
            {"tag": self.tag, "count": len(self), "dim": dim, "kind": kind, "provenance": self.provenance}
        ).encode()
        return b"".join([DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(head)), head, *[a.tobytes() for a in arrays]])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if data[:8] != DATA_MAGIC:
            raise DataParseError("not a dataset cache (bad magic)")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != DATA_VERSION:
            raise DataParseError(f"unsupported dataset cache version {version}")
        head = json.loads(data[16 : 16 + hlen])
        body = data[16 + hlen :]
        n, dim = head["count"], head["dim"]
        if head["kind"] == "mesh":
            face = np.frombuffer(body[: 8 * n], dtype="<i8").copy()
            bary = np.frombuffer(body[8 * n :], dtype="<f8").reshape(n, 3).copy()
            pts = MeshPoint(face, bary)
        else:
            pts = np.frombuffer(body, dtype="<f8").reshape(n, dim).copy()
        return cls(head["tag"], pts, head["provenance"])

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IOFailure(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_bytes(data)


# ---------------------------------------------------------------- CSV ingestion


def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataParseError(f"{path}: no rows")
    header = None
    try:
        [float(c) for c in rows[0][1]]
    except ValueError:
        header = [c.strip().lower() for c in rows[0][1]]
        rows = rows[1:]
    return header, rows


def _floats(lineno, row, path):
    try:
        vals = [float(c) for c in row]
    except ValueError as exc:
        raise DataParseError(f"{path}:{lineno}: {exc}") from exc
    if not all(math.isfinite(v) for v in vals):
        raise DataParseError(f"{path}:{lineno}: non-finite value")
    return vals


def latlon_to_xyz(lat_deg, lon_deg):
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    xyz = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)
    return xyz / np.linalg.norm(xyz, axis=-1, keepdims=True)


def ingest_latlon_csv(path) -> Dataset:
    """``lat,lon`` rows in degrees to points on the unit 2-sphere (duplicates kept)."""
    header, rows = _read_rows(path)
    ilat, ilon = 0, 1
    if header is not None:
        names = {n: i for i, n in enumerate(header)}
        ilat = next((names[n] for n in ("lat", "latitude") if n in names), None)
        ilon = next((names[n] for n in ("lon", "lng", "long", "longitude") if n in names), None)
        if ilat is None or ilon is None:
            raise DataParseError(f"{path}: header needs lat and lon columns, got {header}")
    lat, lon = [], []
    for lineno, row in rows:
        if len(row) <= max(ilat, ilon):
            raise DataParseError(f"{path}:{lineno}: expected lat and lon columns")
        vals = _floats(lineno, [row[ilat], row[ilon]], path)
        if not -90.0 <= vals[0] <= 90.0:
            raise DataParseError(f"{path}:{lineno}: latitude {vals[0]} outside [-90, 90]")
        if not -360.0 <= vals[1] <= 360.0:
            raise DataParseError(f"{path}:{lineno}: longitude {vals[1]} outside [-360, 360]")
        lat.append(vals[0])
        lon.append(vals[1])
    pts = latlon_to_xyz(np.array(lat), np.array(lon))
    return Dataset(Sphere(2).tag, pts, {"source": str(path), "format": "latlon_csv"})


def ingest_angles_csv(path, dims: int, radians: bool = False) -> Dataset:
    """Angle rows (degrees unless ``radians``) wrapped into [0, 2 pi)^dims."""
    _, rows = _read_rows(path)
    out = []
    for lineno, row in rows:
        if len(row) != dims:
            raise DataParseError(f"{path}:{lineno}: expected {dims} columns, found {len(row)}")
        out.append(_floats(lineno, row, path))
    ang = np.array(out, dtype=float)
    if not radians:
        ang = np.radians(ang)
    return Dataset(FlatTorus(dims).tag, wrap_angle(ang), {"source": str(path), "format": "angles_csv", "radians": radians})


# ---------------------------------------------------------------- synthetic


def synth_wrapped_gaussian_tori(dim: int, n: int, seed: int = 0, scale: float = 0.2) -> Dataset:
    """Wrapped Gaussian on the flat ``dim``-torus with a uniformly drawn mean."""
    if dim < 1:
        raise ContractViolation("torus dimension must be at least 1")
    rng = make_rng(seed, stream=11)
    mean = rng.uniform(0.0, TWO_PI, dim)
    pts = wrap_angle(mean + scale * rng.standard_normal((n, dim)))
    return Dataset(
        FlatTorus(dim).tag,
        pts,
        {"generator": "wrapped_gaussian_tori", "seed": seed, "scale": scale, "mean": mean.tolist()},
    )


def synth_wrapped_gaussian(m: Manifold, n: int, seed: int = 0, scale: float = 0.2, center=None) -> Dataset:
    """Wrapped Gaussian at a random (or given) centre on any simple manifold; SPD data are made this way."""
    if isinstance(m, FlatTorus) and center is None:
        return synth_wrapped_gaussian_tori(m.n, n, seed, scale)
    rng = make_rng(seed, stream=12)
    if center is None:
        center = m.random_point(rng, 1)[0]
    wg = WrappedGaussian(m, center, scale)
    pts = wg.sample(rng, n)
    return Dataset(
        m.tag, pts, {"generator": "wrapped_gaussian", "seed": seed, "scale": scale, "mean": np.asarray(center).tolist()}
    )


def dataset_density(ds: Dataset, m: Manifold):
    """The generating density of a synthetic wrapped-Gaussian dataset."""
    prov = ds.provenance
    if prov.get("generator") not in ("wrapped_gaussian_tori", "wrapped_gaussian"):
        raise ContractViolation("dataset has no known generating density")
    return WrappedGaussian(m, prov["mean"], prov["scale"])


# ---------------------------------------------------------------- mesh targets


@dataclass
class MeshTargetSpec:
    mode: int = 5  # eigenfunction index, 0 is the constant mode
    upsample: int = 3  # midpoint subdivision rounds
    threshold: float = 0.0


class MeshTarget:
    """Density proportional to max(phi_k - threshold, 0) on a subdivided copy of a mesh.

    ``phi_k`` is the piecewise-linear interpolant on the fine mesh; per-face
    masses are integrated exactly by clipping each fine face to its positive
    region.  Samples are drawn on the fine mesh and mapped back to the
    working mesh by closest point, which is exact because midpoint
    subdivision preserves the geometry.
    """

    def __init__(self, mesh: TriangleMesh, spec: MeshTargetSpec = MeshTargetSpec(), basis_fine: SpectralBasis | None = None):
        if spec.mode < 1:
            raise ConfigError("the constant eigenfunction (mode 0) gives a degenerate thresholded target")
        self.mesh = mesh
        self.spec = spec
        self.fine = subdivide(mesh, spec.upsample)
        if basis_fine is None:
            basis_fine = mesh_eigenbasis(self.fine, spec.mode + 1)
        if spec.mode >= basis_fine.k:
            raise ConfigError(f"target mode {spec.mode} needs at least {spec.mode + 1} eigenfunctions")
        if basis_fine.mesh_digest and basis_fine.mesh_digest != self.fine.digest():
            raise MeshError("fine eigenbasis belongs to a different mesh (stale)")
        self.basis_fine = basis_fine
        self.phi = basis_fine.eigenfunctions[:, spec.mode] - spec.threshold  # per fine vertex
        self.fine_mass = self._face_masses()
        total = self.fine_mass.sum()
        if not total > 0:
            raise ConfigError("thresholded eigenfunction is non-positive everywhere")
        self.fine_prob = self.fine_mass / total
        nf = mesh.n_faces
        self.coarse_of_fine = np.arange(self.fine.n_faces) % nf  # child faces of f are f + j * nf
        self.coarse_prob = np.bincount(self.coarse_of_fine, weights=self.fine_prob, minlength=nf)

    def _face_masses(self):
        vals = self.phi[self.fine.faces]  # (F, 3)
        area = self.fine.face_areas
        pos = np.maximum(vals, 0.0)
        mass = area * pos.mean(axis=1)  # exact where no sign change
        mixed = np.flatnonzero((vals.max(axis=1) > 0) & (vals.min(axis=1) < 0))
        for f in mixed:
            mass[f] = area[f] * _positive_part_integral(vals[f])
        return mass

    def value_fine(self, p: MeshPoint):
        return np.sum(p.bary * self.phi[self.fine.faces[p.face]], axis=1)

    def to_fine(self, p: MeshPoint) -> MeshPoint:
        return closest_point(self.fine, p.positions(self.mesh))

    def in_support(self, p: MeshPoint):
        return self.value_fine(self.to_fine(p)) > 0

    def sample(self, rng, n):
        faces = rng.choice(self.fine.n_faces, size=n, p=self.fine_prob)
        vals = self.phi[self.fine.faces[faces]]
        bary = np.zeros((n, 3))
        todo = np.arange(n)
        pos = np.maximum(vals, 0.0)
        while len(todo):
            # proposal: density proportional to the interpolant of max(phi_i, 0), a Dirichlet mixture
            p = pos[todo] / pos[todo].sum(axis=1, keepdims=True)
            corner = (rng.uniform(size=len(todo))[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
            corner = np.minimum(corner, 2)
            g = rng.standard_gamma(np.where(np.arange(3)[None, :] == corner[:, None], 2.0, 1.0))
            b = g / g.sum(axis=1, keepdims=True)
            target = np.maximum(np.sum(b * vals[todo], axis=1), 0.0)
            proposal = np.sum(b * pos[todo], axis=1)
            accept = rng.uniform(size=len(todo)) * proposal < target
            bary[todo[accept]] = b[accept]
            todo = todo[~accept]
        fine_pts = MeshPoint(faces, bary)
        return closest_point(self.mesh, fine_pts.positions(self.fine)), fine_pts


def _positive_part_integral(v):
    """Mean over the reference triangle of max(linear interpolant of v, 0)."""
    v = np.asarray(v, dtype=float)
    pos = v > 0
    if pos.all():
        return v.mean()
    if not pos.any():
        return 0.0
    # one or two positive corners; the positive region is a triangle or a quad
    if pos.sum() == 1:
        i = int(np.flatnonzero(pos)[0])
        others = [j for j in range(3) if j != i]
        s = [v[i] / (v[i] - v[j]) for j in others]  # edge fractions where the interpolant hits zero
        # sub-triangle (corner i, two zero points) has relative area s0*s1 and mean v_i / 3
        return s[0] * s[1] * v[i] / 3.0
    neg = _positive_part_integral(-v)  # integral of max(-f, 0)
    return v.mean() + neg


def mesh_target_sampler(mesh, basis_fine, spec: MeshTargetSpec, n: int, seed: int = 0) -> Dataset:
    target = MeshTarget(mesh, spec, basis_fine)
    pts, _ = target.sample(make_rng(seed, stream=13), n)
    return Dataset(
        f"mesh:{mesh.digest().hex()[:16]}",
        pts,
        {"generator": "mesh_eigenfunction", "mode": spec.mode, "upsample": spec.upsample, "seed": seed},
    )


# ---------------------------------------------------------------- maze


def _cell_box(maze: Maze, cell, sigma):
    c = maze.cell_center(*cell)
    half = 0.5 * maze.cell_width + 3.0 * sigma
    return c, np.array([c - half, c + half])


def maze_task(maze: Maze, n: int, seed: int = 0, sigma_factor: float = 0.3):
    """Base: truncated Gaussian at the middle cell; target: equal mixture of corner-cell Gaussians."""
    if maze.mesh.connected_components() != 1:
        raise MeshError("maze corner cells are not all reachable from the centre")
    sigma = sigma_factor * maze.cell_width
    c0, b0 = _cell_box(maze, maze.center_cell, sigma)
    base = TruncatedMeshGaussian(maze.mesh, [c0], sigma, [b0])
    corners = [_cell_box(maze, cell, sigma) for cell in maze.corner_cells]
    target = TruncatedMeshGaussian(maze.mesh, [c for c, _ in corners], sigma, [b for _, b in corners])
    pts, comp = target.sample(make_rng(seed, stream=14), n, return_component=True)
    ds = Dataset(
        f"mesh:{maze.mesh.digest().hex()[:16]}",
        pts,
        {"generator": "maze", "rows": maze.rows, "cols": maze.cols, "maze_seed": maze.seed, "seed": seed, "sigma": sigma},
    )
    ds.provenance["component_counts"] = np.bincount(comp, minlength=len(corners)).tolist()
    return base, ds, target


__all__ = [
    "Dataset",
    "MeshTarget",
    "MeshTargetSpec",
    "dataset_density",
    "ingest_angles_csv",
    "ingest_latlon_csv",
    "latlon_to_xyz",
    "manifold_from_tag",
    "maze_task",
    "mesh_target_sampler",
    "synth_wrapped_gaussian",
    "synth_wrapped_gaussian_tori",
]
