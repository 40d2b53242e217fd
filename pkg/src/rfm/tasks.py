"""Turn a run config into a concrete task: space, premetric, base distribution and dataset."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    Dataset,
    MeshTarget,
    MeshTargetSpec,
    ingest_angles_csv,
    ingest_latlon_csv,
    maze_task,
    synth_wrapped_gaussian,
)
from .errors import ConfigError
from .geometry import FlatTorus, Sphere, manifold_from_tag
from .likelihood import base_for
from .maze import generate_maze
from .mesh import (
    SpectralBasis,
    TriangleMesh,
    blob,
    icosphere,
    load_mesh,
    mesh_eigenbasis,
    square_grid,
    weighting_from_name,
)
from .premetric import GeodesicPremetric, SpectralPremetric
from .rng import make_rng


@dataclass
class Task:
    space: object  # Manifold or TriangleMesh
    dataset: Dataset
    base: object
    premetric: object
    extra: dict = field(default_factory=dict)
    _split: tuple | None = None

    def splits(self, cfg):
        """(train, val, test) point batches, fixed by ``cfg.data_seed``."""
        if self._split is None:
            from .training import split_indices

            idx = split_indices(len(self.dataset), cfg.split, cfg.data_seed)
            self._split = tuple(self.dataset.points[i] for i in idx)
        return self._split

    def n_test(self, cfg):
        return len(self.splits(cfg)[2])

    def describe(self) -> dict:
        out = {"dataset": self.dataset.provenance, "n_points": len(self.dataset), "base": self.base.describe()}
        if isinstance(self.space, TriangleMesh):
            out["mesh_digest"] = self.space.digest().hex()
            out["modes"] = self.premetric.basis.k
        return out


_MAZE = re.compile(r"^maze:(\d+)x(\d+)(?::(\d+))?$")


def resolve_mesh(source: str):
    """Mesh from a file path or a generator spec; returns (mesh, maze-or-None)."""
    m = _MAZE.match(source)
    if m:
        maze = generate_maze(int(m.group(1)), int(m.group(2)), int(m.group(3) or 0))
        return maze.mesh, maze
    for prefix, fn in (("icosphere:", icosphere), ("grid:", square_grid), ("blob:", blob)):
        if source.startswith(prefix):
            try:
                arg = int(source[len(prefix) :])
            except ValueError as exc:
                raise ConfigError(f"bad mesh generator spec {source!r}") from exc
            return fn(arg), None
    return load_mesh(source), None


def load_basis(mesh: TriangleMesh, k: int, cache: str = "") -> SpectralBasis:
    """Eigenbasis from a ``.spec`` cache when given (digest-checked), computed otherwise."""
    if cache and Path(cache).exists():
        basis = SpectralBasis.load(cache, mesh)
    else:
        if k >= mesh.n_vertices:
            raise ConfigError(f"k={k} needs fewer modes than the {mesh.n_vertices} mesh vertices")
        basis = mesh_eigenbasis(mesh, k)
        if cache:
            basis.save(cache)
    if basis.k < k:
        raise ConfigError(f"eigenbasis cache holds {basis.k} modes, config asks for {k}")
    return basis.truncated(k) if basis.k > k else basis


def build_premetric(cfg):
    """The premetric a config trains with (no dataset is built)."""
    if cfg.is_mesh:
        mesh, _ = resolve_mesh(cfg.mesh)
        return _spectral(cfg, mesh)
    return GeodesicPremetric(manifold_from_tag(cfg.manifold))


def _spectral(cfg, mesh):
    basis = load_basis(mesh, cfg.k, cfg.spectral_cache)
    return SpectralPremetric(mesh, basis, weighting_from_name(cfg.premetric, cfg.tau))


def build_task(cfg) -> Task:
    extra = {}
    if cfg.is_mesh:
        mesh, maze = resolve_mesh(cfg.mesh)
        space = mesh
        pm = _spectral(cfg, mesh)
        if cfg.data == "maze":
            if maze is None:
                raise ConfigError("data = maze needs mesh = maze:RxC[:seed]")
            base, ds, target = maze_task(maze, cfg.n_points, cfg.data_seed, cfg.maze_sigma)
            extra.update(maze=maze, target=target)
        elif cfg.data == "mesh_eigen":
            target = MeshTarget(mesh, MeshTargetSpec(cfg.target_mode, cfg.upsample))
            pts, _ = target.sample(make_rng(cfg.data_seed, stream=13), cfg.n_points)
            ds = Dataset(
                f"mesh:{mesh.digest().hex()[:16]}",
                pts,
                {"generator": "mesh_eigenfunction", "mode": cfg.target_mode, "upsample": cfg.upsample, "seed": cfg.data_seed},
            )
            base = _base(cfg, space)
            extra["target"] = target
        elif cfg.data == "dataset":
            ds = Dataset.load(cfg.data_path)
            base = _base(cfg, space)
        else:
            raise ConfigError(f"data kind {cfg.data!r} is not available on meshes")
    else:
        space = manifold_from_tag(cfg.manifold)
        pm = GeodesicPremetric(space)
        if cfg.data == "wrapped_gaussian":
            ds = synth_wrapped_gaussian(space, cfg.n_points, cfg.data_seed, cfg.data_scale)
        elif cfg.data == "latlon_csv":
            if space != Sphere(2):
                raise ConfigError("latlon_csv data lives on sphere:2")
            ds = ingest_latlon_csv(cfg.data_path)
        elif cfg.data == "angles_csv":
            if not isinstance(space, FlatTorus):
                raise ConfigError("angles_csv data lives on a torus")
            ds = ingest_angles_csv(cfg.data_path, space.n, cfg.radians)
        elif cfg.data == "dataset":
            ds = Dataset.load(cfg.data_path)
        else:
            raise ConfigError(f"data kind {cfg.data!r} is not available on {cfg.manifold}")
        if ds.tag != space.tag:
            raise ConfigError(f"dataset lives on {ds.tag}, config says {space.tag}")
        base = _base(cfg, space)
    ds.check(space)
    return Task(space, ds, base, pm, extra)


def _base(cfg, space):
    if cfg.base == "maze":
        raise ConfigError("base = maze needs data = maze")
    try:
        return base_for(space, cfg.base, scale=cfg.base_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


__all__ = ["Task", "build_premetric", "build_task", "load_basis", "resolve_mesh"]
