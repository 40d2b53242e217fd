"""Command-line entry point: ``rfm <command> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 parse error, 3 numerical
failure, 4 I/O failure, 5 NaN loss, 6 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import CheckpointMismatch, ConfigError, IOFailure, NumericError, RFMError
from .geometry import FlatTorus, Sphere
from .io import atomic_write_text, canonical_json, jsonl
from .mesh import MeshPoint, TriangleMesh, save_off
from .rng import make_rng, resolve_seed

log = logging.getLogger("rfm")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 (code 2 is reserved for input parse errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- shared helpers


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_run(path, weights="best", config=None):
    """(config, task, field, params) for a checkpoint; ``config`` (a TrainConfig) must agree with it."""
    from .tasks import build_task
    from .training import TrainConfig, _RESUME_FREE
    from .vectorfield import VectorField

    ck = Checkpoint.load(path)
    stored = TrainConfig.from_dict(ck.config)
    if config is not None:
        mine, theirs = config.as_dict(), stored.as_dict()
        diff = sorted(k for k in mine if k not in _RESUME_FREE and mine[k] != theirs[k])
        if diff:
            raise CheckpointMismatch(f"{path} was trained with a different config ({', '.join(diff)})")
        stored = config
    task = build_task(stored)
    vf = VectorField.for_space(task.space, stored.hidden, stored.periodic_torus)
    ck.check_layout(vf.net.zeros())
    if vf.adapter.tag != ck.space_tag:
        raise CheckpointMismatch(f"{path} holds a field for {ck.space_tag}, config builds {vf.adapter.tag}")
    if weights == "live":
        params = ck.live
    elif weights == "ema":
        params = ck.ema
    else:
        best = ck.extra.get("best_params")
        params = ck.ema if best is None else ck.live.like(np.array(best, dtype=float))
    return stored, task, vf, params


def _solver(args, space):
    from .likelihood import Adaptive, Euler, default_solver

    if args.solver == "euler":
        return Euler(args.steps)
    if args.solver == "adaptive":
        d = default_solver(space)
        tol = args.tol if args.tol else getattr(d, "rtol", 1e-5)
        return Adaptive(tol, tol)
    return default_solver(space)


def _fmt(x):
    return repr(float(x))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_preprocess_mesh(args):
    from .mesh import subdivide
    from .tasks import load_basis, resolve_mesh

    mesh, _ = resolve_mesh(args.mesh)
    if args.upsample:
        mesh = subdivide(mesh, args.upsample)
    basis = load_basis(mesh, args.k)
    basis.save(args.out)
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces, digest {mesh.digest().hex()[:16]}")
    print(f"modes: {basis.k} (mode 0 is the constant eigenfunction)")
    res = basis.residuals if basis.residuals is not None else np.full(basis.k, np.nan)
    for i in range(min(10, basis.k)):
        print(f"  lambda_{i + 1:<2d} (mode {i:2d}) = {basis.eigenvalues[i]:.6f}   residual {res[i]:.2e}")
    print(f"wrote {args.out} sha256 {_sha256(args.out)}")


def cmd_gen_maze(args):
    from .maze import generate_maze

    maze = generate_maze(args.rows, args.cols, args.seed)
    out = Path(args.out)
    save_off(maze.mesh, out)
    side = out.with_suffix(".maze")
    atomic_write_text(side, maze.sidecar_text())
    print(f"maze {args.rows}x{args.cols} seed {args.seed}: {maze.mesh.n_vertices} vertices, {maze.mesh.n_faces} faces")
    print(f"wrote {out} and {side}")
    print(f"train with: mesh = maze:{args.rows}x{args.cols}:{args.seed}")


def cmd_train(args):
    from .tasks import build_task
    from .training import TrainConfig, train

    ov = _overrides(args.set)
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    if args.iterations is not None:
        ov["iterations"] = str(args.iterations)
    cfg = TrainConfig.load(args.config, ov)
    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    resume = Checkpoint.load(args.resume) if args.resume else None
    task = build_task(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.ini", cfg.to_ini())
    res = train(cfg, task, out, resume=resume)
    tail = res.losses[-min(len(res.losses), 100) :]
    print(f"iterations: {res.iteration}{' (early stop)' if res.stopped_early else ''}")
    if tail:
        print(f"final loss (last {len(tail)} mean): {np.mean(tail):.6g}")
    if res.val_trace:
        print(f"best validation NLL: {res.best_val:.6g} at iteration {res.best_iter}")
    print(f"gradient clip events: {res.clip_events}")
    print(f"wrote {out / 'checkpoint.rfmc'} and {out / 'manifest.jsonl'}")


def cmd_eval(args):
    from .likelihood import nll
    from .training import TrainConfig

    config = TrainConfig.load(args.config) if args.config else None
    records, per_ckpt = [], []
    for ci, path in enumerate(args.checkpoint):
        cfg, task, vf, params = _load_run(path, args.weights, config)
        pts = dict(zip(("train", "val", "test"), task.splits(cfg)))[args.split]
        if args.limit:
            pts = pts[np.arange(min(args.limit, len(pts)))]
        solver = _solver(args, task.space)
        res = nll(vf, params, task.base, pts, solver)
        dim = _intrinsic_dim(task.space)
        stats = {k: res.stats[k] for k in ("solver", "nfev", "steps", "chunks") if k in res.stats}
        for j, v in enumerate(res.nll):
            bpd = float(v / (dim * math.log(2)))
            records.append({"checkpoint": ci, "point": j, "nll": float(v), "bits_per_dim": bpd, "solver": stats})
        mean = float(np.mean(res.nll))
        per_ckpt.append(mean)
        print(f"{path}: {args.split} NLL {mean:.6f} nats ({mean / (dim * math.log(2)):.6f} bits/dim) over {len(pts)} points")
    summary = {
        "split": args.split,
        "checkpoints": [str(p) for p in args.checkpoint],
        "per_checkpoint": per_ckpt,
        "mean": float(np.mean(per_ckpt)),
        "std": float(np.std(per_ckpt, ddof=1)) if len(per_ckpt) > 1 else 0.0,
        "solver": solver.describe(),
    }
    if len(per_ckpt) > 1:
        print(f"mean over {len(per_ckpt)} checkpoints: {summary['mean']:.6f} +- {summary['std']:.6f}")
    if args.out:
        atomic_write_text(args.out, jsonl(records))
        atomic_write_text(Path(args.out).with_suffix(".summary.json"), canonical_json(summary) + "\n")
        print(f"wrote {args.out}")


def _intrinsic_dim(space):
    return 2 if isinstance(space, TriangleMesh) else space.intrinsic_dim


def cmd_sample(args):
    from .likelihood import Euler, sample

    cfg, task, vf, params = _load_run(args.checkpoint, args.weights)
    seed = resolve_seed(args.seed, cfg.seed)
    solver = Euler(args.steps) if args.steps else None
    x, _ = sample(vf, params, task.base, args.n, make_rng(seed, stream=9), solver)
    if isinstance(x, MeshPoint):
        pos = x.positions(task.space)
        cols = ["face", "b0", "b1", "b2"] + [f"x{i}" for i in range(pos.shape[1])]
        rows = [[str(int(f)), *map(_fmt, b), *map(_fmt, p)] for f, b, p in zip(x.face, x.bary, pos)]
    else:
        cols = [f"x{i}" for i in range(x.shape[1])]
        rows = [list(map(_fmt, r)) for r in x]
    text = ",".join(cols) + "\n" + "".join(",".join(r) + "\n" for r in rows)
    atomic_write_text(args.out, text)
    print(f"wrote {args.n} samples to {args.out}")


def cmd_export_density(args):
    from .likelihood import nll

    cfg, task, vf, params = _load_run(args.checkpoint, args.weights)
    space = task.space
    solver = _solver(args, space)
    r = args.grid
    if isinstance(space, TriangleMesh):
        cent = MeshPoint(np.arange(space.n_faces), np.full((space.n_faces, 3), 1.0 / 3.0))
        logp = -nll(vf, params, task.base, cent, solver).nll
        area = space.face_areas
        atomic_write_text(args.out, _vtk_text(space, logp, area))
        mass = float(np.sum(np.exp(logp) * area))
        if args.plot:
            from .plotting import plot_mesh

            plot_mesh(space, logp, args.plot)
    elif isinstance(space, FlatTorus) and space.n in (1, 2):
        g = (np.arange(r) + 0.5) * 2 * math.pi / r
        if space.n == 1:
            pts, header = g[:, None], "theta,logp,area"
            area = np.full(r, 2 * math.pi / r)
        else:
            th, ph = np.meshgrid(g, g, indexing="ij")
            pts, header = np.stack([th.ravel(), ph.ravel()], 1), "theta,phi,logp,area"
            area = np.full(len(pts), (2 * math.pi / r) ** 2)
        logp = -nll(vf, params, task.base, pts, solver).nll
        _write_grid(args.out, header, pts, logp, area)
        mass = float(np.sum(np.exp(logp) * area))
        if args.plot and space.n == 2:
            from .plotting import plot_grid

            plot_grid(logp.reshape(r, r).T, (0, 2 * math.pi, 0, 2 * math.pi), ("theta", "phi"), args.plot)
    elif isinstance(space, Sphere) and space.n == 2:
        # equirectangular: r latitude rows by 2r longitude columns, exact area of each cell recorded
        dlat, dlon = math.pi / r, math.pi / r
        lat = -math.pi / 2 + (np.arange(r) + 0.5) * dlat
        lon = -math.pi + (np.arange(2 * r) + 0.5) * dlon
        LA, LO = np.meshgrid(lat, lon, indexing="ij")
        xyz = np.stack([np.cos(LA) * np.cos(LO), np.cos(LA) * np.sin(LO), np.sin(LA)], -1).reshape(-1, 3)
        cell = dlon * (np.sin(LA + dlat / 2) - np.sin(LA - dlat / 2))
        logp = -nll(vf, params, task.base, xyz, solver).nll
        _write_grid(args.out, "lat,lon,logp,area", np.degrees(np.stack([LA.ravel(), LO.ravel()], 1)), logp, cell.ravel())
        mass = float(np.sum(np.exp(logp) * cell.ravel()))
        if args.plot:
            from .plotting import plot_grid

            plot_grid(logp.reshape(r, 2 * r), (-180, 180, -90, 90), ("longitude", "latitude"), args.plot)
    else:
        raise ConfigError(f"density export supports torus:1, torus:2, sphere:2 and meshes, not {space!r}")
    print(f"wrote {args.out}; quadrature of the density: {mass:.6f}")


def _write_grid(path, header, coords, logp, area):
    lines = [header + "\n"]
    for c, lp, a in zip(coords, logp, area):
        lines.append(",".join([*map(_fmt, c), _fmt(lp), _fmt(a)]) + "\n")
    atomic_write_text(path, "".join(lines))


def _vtk_text(mesh, logp, area):
    v = mesh.vertices if mesh.dim == 3 else np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    out = ["# vtk DataFile Version 3.0\n", "rfm per-face log density\n", "ASCII\n", "DATASET POLYDATA\n"]
    out.append(f"POINTS {mesh.n_vertices} double\n")
    out += [" ".join(map(_fmt, p)) + "\n" for p in v]
    out.append(f"POLYGONS {mesh.n_faces} {4 * mesh.n_faces}\n")
    out += [f"3 {a} {b} {c}\n" for a, b, c in mesh.faces]
    out.append(f"CELL_DATA {mesh.n_faces}\n")
    for name, vals in (("logp", logp), ("area", area)):
        out.append(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        out += [_fmt(x) + "\n" for x in vals]
    return "".join(out)


def cmd_audit_premetric(args):
    from .premetric import premetric_audit
    from .tasks import build_premetric
    from .training import TrainConfig

    if args.config:
        cfg = TrainConfig.load(args.config, _overrides(args.set))
    elif args.manifold == "mesh":
        cfg = TrainConfig(manifold="mesh", mesh=args.mesh, premetric=args.premetric, k=args.k)
    else:
        cfg = TrainConfig(manifold=args.manifold)
    pm = build_premetric(cfg)
    report = premetric_audit(pm, args.pairs, args.seed, args.targets)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    if args.out:
        atomic_write_text(args.out, canonical_json({**report.as_dict(), "worst_pairs": report.worst_pairs}) + "\n")
    failed = [k for k, ok in report.passes.items() if not ok]
    if failed:
        raise NumericError(f"premetric audit failed: {', '.join(failed)}")
    print("audit passed")


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="rfm", description="Flow matching on manifolds and meshes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess-mesh", help="compute and cache a Laplace-Beltrami eigenbasis")
    s.add_argument("--mesh", required=True, help="OFF/OBJ file or generator (icosphere:L, grid:N, blob:L, maze:RxC[:seed])")
    s.add_argument("--k", type=int, required=True, help="number of eigenpairs, including the constant mode")
    s.add_argument("--out", required=True, help="output .spec file")
    s.add_argument("--upsample", type=int, default=0, help="midpoint subdivision rounds applied first")
    s.set_defaults(func=cmd_preprocess_mesh)

    s = sub.add_parser("gen-maze", help="generate a random maze mesh (OFF) with a source/target sidecar")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_maze)

    s = sub.add_parser("train", help="train a vector field from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="run directory (default runs/<config stem>)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    s.set_defaults(func=cmd_train)

    for name, fn, hlp in (
        ("eval", cmd_eval, "negative log-likelihood of a data split"),
        ("sample", cmd_sample, "draw samples from a trained model"),
        ("export-density", cmd_export_density, "write the model density on a grid or per mesh face"),
    ):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--checkpoint", required=True, nargs="+" if name == "eval" else None)
        s.add_argument("--weights", choices=("best", "ema", "live"), default="best")
        s.add_argument("--out", required=name != "eval")
        if name != "sample":
            s.add_argument("--solver", choices=("auto", "euler", "adaptive"), default="auto")
            s.add_argument("--steps", type=int, default=1000, help="Euler steps")
            s.add_argument("--tol", type=float, default=0.0, help="adaptive rtol = atol")
        s.set_defaults(func=fn)
        if name == "eval":
            s.add_argument("--split", choices=("train", "val", "test"), default="test")
            s.add_argument("--config", help="config the checkpoints must agree with")
            s.add_argument("--limit", type=int, default=0, help="evaluate only the first N points")
        elif name == "sample":
            s.add_argument("--n", type=int, required=True)
            s.add_argument("--seed", type=int)
            s.add_argument("--steps", type=int, default=0, help="Euler steps (default: solver of the space)")
        else:
            s.add_argument("--grid", type=int, default=100, help="grid resolution R")
            s.add_argument("--plot", help="also write a PNG rendering")

    s = sub.add_parser("audit-premetric", help="check the premetric properties on random pairs")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--manifold", default="mesh")
    s.add_argument("--mesh", default="icosphere:2")
    s.add_argument("--premetric", default="biharmonic")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--pairs", type=int, default=10_000)
    s.add_argument("--targets", type=int, default=100, help="targets for the boundary check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_audit_premetric)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except RFMError as exc:
        print(f"rfm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rfm {args.command}: {IOFailure.__name__}: {exc}", file=sys.stderr)
        return IOFailure.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
