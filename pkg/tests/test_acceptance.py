"""End-to-end acceptance checks.  Each test records one PASS/FAIL line, listed in the terminal summary."""

import math
import time

import numpy as np
import pytest

from rfm.cli import main
from rfm.geometry import SPD, FlatTorus, PoincareBall, Sphere
from rfm.likelihood import Euler, nll, sample
from rfm.maze import generate_maze
from rfm.mesh import (
    Biharmonic,
    MeshPoint,
    blob,
    icosphere,
    mesh_eigenbasis,
    sample_uniform,
    spectral_distance_gradient,
    square_grid,
)
from rfm.nn import MLP
from rfm.premetric import (
    EuclideanPremetric,
    GeodesicPremetric,
    LinearScheduler,
    SpectralPremetric,
    boundary_midpoints,
    conditional_flow_simulated,
    conditional_path,
    conditional_vector_field,
    projection_residual,
)
from rfm.rng import make_rng
from rfm.tasks import build_task
from rfm.training import TrainConfig, train
from rfm.vectorfield import VectorField
from test_nn import _coordinate_divergence, _fd_param_grad, _rel

SCHED = LinearScheduler()
TWO_PI = 2 * math.pi


# ---------------------------------------------------------------- 1. geometry


def _geometry_points(m, rng, n):
    if isinstance(m, PoincareBall):
        return m.random_point(rng, n, max_dist=2.0)
    return m.random_point(rng, n)


def _segment_lengths(m, pts):
    if m.kind == "torus":
        return np.linalg.norm(m.log(pts[:-1], pts[1:]), axis=-1)
    mid = 0.5 * (pts[:-1] + pts[1:])
    if m.kind == "sphere":
        mid = m.projx(mid)
    delta = pts[1:] - pts[:-1]
    return np.sqrt(m.inner(mid, delta, delta))


@pytest.mark.criterion(1)
def test_geometry_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {}
    ok = True
    for m in (Sphere(2), FlatTorus(2), PoincareBall(2), SPD(2)):
        x = _geometry_points(m, rng, 1000)
        y = _geometry_points(m, rng, 1000)
        if m.kind == "sphere":
            # stay clear of the cut locus where log is undefined
            far = np.sum(x * y, axis=1) < -0.99
            y[far] = m.exp(x[far], 0.5 * m.random_tangent(rng, x[far]))
        roundtrip = np.max(np.abs(m.exp(x, m.log(x, y)) - y))
        tol = 1e-6 if m.kind == "spd" else 1e-9

        speed = 0.0
        for i in range(5):
            ts = np.linspace(0, 1, 1001)
            pts = m.geodesic(np.broadcast_to(x[i], (1001, x.shape[1])), np.broadcast_to(y[i], (1001, y.shape[1])), ts)
            seg = _segment_lengths(m, pts)
            speed = max(speed, float(np.max(np.abs(seg / seg.mean() - 1))))

        # grad_x (d^2 / 2) = -log_x(y), checked by central differences in an orthonormal frame
        mccann = 0.0
        h = 1e-5
        for i in range(20):
            xi = x[i]
            yi = m.exp(xi, m.random_tangent(rng, xi, 0.5))
            basis = m.tangent_basis(xi)
            comps = [(0.5 * m.dist(m.exp(xi, h * e), yi) ** 2 - 0.5 * m.dist(m.exp(xi, -h * e), yi) ** 2) / (2 * h) for e in basis]
            grad = np.einsum("i,ij->j", np.array(comps).ravel(), basis)
            mccann = max(mccann, float(m.norm(xi, grad + m.log(xi, yi))))

        worst[m.tag] = (roundtrip, speed, mccann)
        ok &= roundtrip <= tol and speed <= 1e-6 and mccann <= 1e-5
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30
    detail = "; ".join(f"{k} rt={v[0]:.1e} speed={v[1]:.1e} grad={v[2]:.1e}" for k, v in worst.items())
    criterion(1, ok, f"geometry {detail}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. decay law


def _decay_errors(pm, x0, x1, steps, times):
    d0 = pm.value(x0, x1)
    return [float(np.max(np.abs(pm.value(conditional_flow_simulated(pm, SCHED, x0, x1, t, steps).x_t, x1) / d0 / (1 - t) - 1))) for t in times]


@pytest.mark.criterion(2)
def test_decay_law(criterion):
    start = time.perf_counter()
    times = (0.25, 0.5, 0.75)
    s2 = Sphere(2)
    rng = np.random.default_rng(200)
    x0, x1 = s2.random_point(rng, 200), s2.random_point(rng, 200)
    pm_s = GeodesicPremetric(s2)
    mesh = blob(4)
    pm_m = SpectralPremetric(mesh, mesh_eigenbasis(mesh, 50), Biharmonic())
    y0, y1 = pm_m.sample(rng, 100), pm_m.sample(rng, 100)
    errs = {
        "sphere": (_decay_errors(pm_s, x0, x1, 300, times), _decay_errors(pm_s, x0, x1, 1000, times)),
        "mesh": (_decay_errors(pm_m, y0, y1, 300, times), _decay_errors(pm_m, y0, y1, 1000, times)),
    }
    elapsed = time.perf_counter() - start
    ok = all(max(e300) <= 0.02 and max(e1000) <= 0.01 for e300, e1000 in errs.values()) and elapsed < 120
    detail = "; ".join(f"{k} 300:{max(a):.1e} 1000:{max(b):.1e}" for k, (a, b) in errs.items())
    criterion(2, ok, f"decay law {detail}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. Euclidean reduction


@pytest.mark.criterion(3)
def test_euclidean_reduction(criterion):
    rng = np.random.default_rng(300)
    n, dim = 10_000, 3
    x, x1 = rng.standard_normal((n, dim)), rng.standard_normal((n, dim))
    t = rng.uniform(0, 1 - 1e-5, n)
    u = conditional_vector_field(EuclideanPremetric(dim), SCHED, x, x1, t)
    expect = (x1 - x) / (1 - t)[:, None]
    err = float(np.max(np.abs(u - expect) / np.abs(expect).max(axis=1, keepdims=True)))
    ok = err < 10 * np.finfo(float).eps
    criterion(3, ok, f"euclidean reduction max rel err {err:.1e} over {n} triples")
    assert ok


# ---------------------------------------------------------------- 4. spectra


@pytest.mark.criterion(4)
def test_spectral_correctness(criterion):
    start = time.perf_counter()
    square = square_grid(100)
    lam = mesh_eigenbasis(square, 6).eigenvalues[1:6]
    exact = sorted(math.pi**2 * (a * a + b * b) for a in range(4) for b in range(4))[1:6]
    sq_err = float(np.max(np.abs(lam - exact) / exact))
    t_square = time.perf_counter() - start

    start = time.perf_counter()
    sphere = icosphere(5)
    lam_s = mesh_eigenbasis(sphere, 5).eigenvalues
    ico_err = float(np.max(np.abs(lam_s[1:4] - 2.0) / 2.0))
    gap = float(lam_s[4])
    t_sphere = time.perf_counter() - start

    ok = sq_err <= 0.02 and ico_err <= 0.02 and gap > 2.0 * 1.5 and t_square < 60 and t_sphere < 60
    criterion(
        4,
        ok,
        f"square ({square.n_faces} faces) max rel {sq_err:.2e} in {t_square:.1f}s; "
        f"icosphere ({sphere.n_faces} faces) first band {ico_err:.2e}, next {gap:.2f}, {t_sphere:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- 5. tabular minimiser vs marginal field


ATOMS = np.array([1.0, 2.5, 4.8])
WEIGHTS = np.array([0.5, 0.3, 0.2])


def _tabular_minimiser(t, n_cells, n_quad):
    """Cell-wise argmin of the regression loss at time t, with x0 integrated by a midpoint rule.

    Per cell the loss is sum_j w_j E|v - u(x_t | x1_j)|^2 over the samples that land there, so the
    minimising table entry is the weighted mean of the conditional targets.
    """
    m = FlatTorus(1)
    pm = GeodesicPremetric(m)
    x0 = ((np.arange(n_quad) + 0.5) / n_quad * TWO_PI)[:, None]
    num = np.zeros(n_cells)
    den = np.zeros(n_cells)
    for a, w in zip(ATOMS, WEIGHTS):
        x1 = np.full((n_quad, 1), a)
        xt = conditional_path(pm, SCHED, x0, x1, t).x_t
        u = conditional_vector_field(pm, SCHED, xt, x1, t)[:, 0]
        cell = np.minimum((xt[:, 0] / TWO_PI * n_cells).astype(int), n_cells - 1)
        num += w * np.bincount(cell, u, n_cells) / n_quad
        den += w * np.bincount(cell, None, n_cells) / n_quad
    return num, den


def _marginal_cell_averages(t, n_cells):
    """Exact cell integrals of p_t and p_t * u_t for the uniform-base, atomic-target path.

    Given x1 the path density is uniform on the arc of half-width pi*kappa around x1 and the
    velocity there is (x1 - x) / kappa, so both integrals are polynomial on each arc piece.
    """
    k = 1.0 - t
    edges = np.linspace(0, TWO_PI, n_cells + 1)
    num = np.zeros(n_cells)
    den = np.zeros(n_cells)
    for a, w in zip(ATOMS, WEIGHTS):
        dens = w / (TWO_PI * k)
        for shift in (-TWO_PI, 0.0, TWO_PI):
            c = a + shift
            lo = np.maximum(edges[:-1], c - math.pi * k)
            hi = np.minimum(edges[1:], c + math.pi * k)
            hit = hi > lo
            lo, hi = np.where(hit, lo, 0.0), np.where(hit, hi, 0.0)
            den += dens * (hi - lo)
            num += dens * (c * (hi - lo) - 0.5 * (hi**2 - lo**2)) / k
    return num, den


@pytest.mark.criterion(5)
def test_tabular_minimiser_matches_marginal_field(criterion):
    start = time.perf_counter()
    n_cells, n_quad = 64, 200_000
    width = TWO_PI / n_cells
    worst, cells = 0.0, 0
    # the table only resolves the path while each arc spans several cells (kappa >= 0.1 here)
    for t in np.linspace(0, 0.9, 25):
        na, da = _tabular_minimiser(t, n_cells, n_quad)
        nb, db = _marginal_cell_averages(t, n_cells)
        p = db / width
        keep = (p > np.percentile(p, 10)) & (db > 0)
        fitted = na[keep] / da[keep]
        exact = nb[keep] / db[keep]
        # the field crosses zero at the atoms, so errors are taken relative to its size in this time slice
        rel = np.max(np.abs(fitted - exact)) / np.max(np.abs(exact))
        worst = max(worst, float(rel))
        cells += int(keep.sum())
    elapsed = time.perf_counter() - start
    ok = worst <= 5e-2 and elapsed < 120
    criterion(5, ok, f"tabular vs marginal field max rel err {worst:.2e} over {cells} cells; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6. maze boundary


@pytest.mark.criterion(6)
def test_maze_boundary_and_flows(criterion):
    maze = generate_maze(4, 4, seed=0)
    mesh = maze.mesh
    basis = mesh_eigenbasis(mesh, 30)
    pm = SpectralPremetric(mesh, basis, Biharmonic())
    mids, local = boundary_midpoints(mesh)
    normals = mesh.edge_inward_normals[mids.face, local]
    targets = sample_uniform(mesh, 100, np.random.default_rng(600))
    lowest = np.inf
    for j in range(100):
        y = MeshPoint(np.repeat(targets.face[j], len(mids)), np.repeat(targets.bary[j : j + 1], len(mids), axis=0))
        g = spectral_distance_gradient(basis, mesh, mids, y, Biharmonic())
        lowest = min(lowest, float(np.min(np.einsum("bd,bd->b", g, normals))))

    rng = np.random.default_rng(601)
    x, x1 = pm.sample(rng, 100), pm.sample(rng, 100)
    dt = np.full(100, (1 - 1e-5) / 300)
    residual = 0.0
    for i in range(300):
        u = conditional_vector_field(pm, SCHED, x, x1, i * dt)
        x, _ = pm.euler_step(x, u, dt)
        residual = max(residual, float(projection_residual(mesh, x).max()))
    ok = lowest >= -1e-6 and residual <= 1e-9
    criterion(
        6, ok, f"maze min inward component {lowest:.2e} over {len(mids)} midpoints x 100 targets; flow residual {residual:.1e}"
    )
    assert ok


# ---------------------------------------------------------------- 7. torus training


def _wrapped_gaussian_nll(x, mean, scale, windings=6):
    """-log density of an isotropic wrapped normal on the flat torus by direct winding sums."""
    k = np.arange(-windings, windings + 1) * TWO_PI
    logp = np.zeros(len(x))
    for i in range(x.shape[1]):
        z = (x[:, i : i + 1] - mean[i] + k[None, :]) / scale
        logp += np.log(np.sum(np.exp(-0.5 * z * z), axis=1)) - math.log(scale * math.sqrt(TWO_PI))
    return -logp


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_torus_training_end_to_end(criterion):
    start = time.perf_counter()
    cfg = TrainConfig(manifold="torus:2", data_scale=0.2, hidden=(64, 64, 64), iterations=5000, batch_size=256)
    task = build_task(cfg)
    res = train(cfg, task)
    params = res.eval_params
    _, _, test = task.splits(cfg)
    prov = task.dataset.provenance
    model = float(np.mean(nll(res.field, params, task.base, test).nll)) / 2
    truth = float(np.mean(_wrapped_gaussian_nll(test, np.asarray(prov["mean"]), prov["scale"]))) / 2

    g = (np.arange(200) + 0.5) * TWO_PI / 200
    gx, gy = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mass = float(np.sum(np.exp(-nll(res.field, params, task.base, grid).nll)) * (TWO_PI / 200) ** 2)
    elapsed = time.perf_counter() - start
    ok = abs(model - truth) <= 0.10 and abs(mass - 1) <= 0.01
    criterion(
        7, ok, f"torus test NLL {model:.4f} vs true {truth:.4f} nats/dim (gap {model - truth:+.4f}); mass {mass:.4f}; {elapsed:.0f}s"
    )
    assert ok


# ---------------------------------------------------------------- 8. mesh generative smoke test

MESH_CFG = dict(
    manifold="mesh",
    mesh="icosphere:2",
    premetric="biharmonic",
    k=100,
    data="mesh_eigen",
    target_mode=5,
    n_points=20000,
    iterations=10_000,
    batch_size=256,
    lr=1e-3,
    eval_every=0,
    log_every=100,
    bank_size=200_000,
    bank_snapshots=16,
)


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_mesh_generative_smoke(criterion):
    start = time.perf_counter()
    cfg = TrainConfig(**MESH_CFG)
    task = build_task(cfg)
    res = train(cfg, task)
    target = task.extra["target"]
    pts, _ = sample(res.field, res.eval_params, task.base, 10_000, make_rng(cfg.seed, 9), solver=Euler(300))
    support = float(np.mean(target.in_support(pts)))
    emp = np.bincount(pts.face, minlength=task.space.n_faces) / len(pts.face)
    tv = 0.5 * float(np.abs(emp - target.coarse_prob).sum())
    elapsed = time.perf_counter() - start
    ok = support >= 0.95 and tv <= 0.10 and elapsed < 1800
    criterion(8, ok, f"icosphere mode-5 target: support {support:.4f}, face TV {tv:.4f}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9. differentiation gates


@pytest.mark.criterion(9)
def test_differentiation_gates(criterion):
    rng = np.random.default_rng(900)
    worst_param = worst_jac = 0.0
    for _ in range(3):
        net = MLP(3, 2, (12, 10))
        p = net.init(rng, final_scale=1.0)
        for name in p.names:
            if name.startswith("beta"):
                p.data[p.slice_of(name)] = rng.uniform(0.5, 2.0)
        z, c = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))

        def loss(params):
            out = net.forward(params, z)
            return np.sum(c * out) + 0.5 * np.sum(out**2)

        out, cache = net.forward(p, z, return_cache=True)
        worst_param = max(worst_param, _rel(net.backward(p, cache, c + out).data, _fd_param_grad(loss, p)))
        _, jac = net.input_jacobian(p, z)
        h = 1e-6
        fd = np.stack([(net.forward(p, z + h * e) - net.forward(p, z - h * e)) / (2 * h) for e in np.eye(3)], axis=2)
        worst_jac = max(worst_jac, _rel(jac, fd))

    worst_div = 0.0
    for m in (PoincareBall(2), PoincareBall(3), SPD(2)):
        vf = VectorField.for_space(m, hidden=(16, 16))
        p = vf.init(np.random.default_rng(901), final_scale=1.0)
        for _ in range(20):
            x = m.random_point(rng, 1, max_dist=1.5) if isinstance(m, PoincareBall) else m.random_point(rng, 1)
            t = rng.uniform(0, 1)
            exact = _coordinate_divergence(m, vf, p, t, x)
            worst_div = max(worst_div, abs(vf.divergence(p, t, x)[0] - exact) / max(abs(exact), 1.0))
    ok = worst_param < 1e-4 and worst_jac < 1e-4 and worst_div < 1e-4
    criterion(9, ok, f"param grad {worst_param:.1e}, input jacobian {worst_jac:.1e}, ball/SPD divergence {worst_div:.1e}")
    assert ok


# ---------------------------------------------------------------- 10. determinism

DET_INI = """
[space]
manifold = sphere:2

[data]
n_points = 400

[model]
hidden = 16,16

[train]
iterations = 40
batch_size = 32
eval_every = 20
eval_points = 20
eval_steps = 10
lr = 1e-3
"""

MESH_DET_INI = """
[space]
manifold = mesh
mesh = maze:2x2:3
premetric = biharmonic
k = 20

[data]
data = maze
n_points = 300

[base]
base = maze

[model]
hidden = 8

[train]
iterations = 10
batch_size = 16
eval_every = 0
bank_size = 200
bank_snapshots = 4
"""


def _artifacts(root, capsys, monkeypatch):
    """Run every command once inside ``root`` (same relative command lines) and return the bytes written."""
    monkeypatch.chdir(root)
    for name, text in (("s.ini", DET_INI), ("m.ini", MESH_DET_INI)):
        (root / name).write_text(text)
    steps = [
        "preprocess-mesh --mesh icosphere:2 --k 12 --out ico.spec",
        "gen-maze --rows 3 --cols 3 --seed 5 --out maze.off",
        "train --config s.ini --out s --seed 7",
        "train --config m.ini --out m --seed 7",
        "eval --checkpoint s/checkpoint.rfmc --out eval.jsonl --limit 10 --steps 50 --solver euler",
        "sample --checkpoint s/checkpoint.rfmc --n 50 --seed 3 --out s.csv",
        "sample --checkpoint m/checkpoint.rfmc --n 20 --seed 3 --out m.csv",
        "export-density --checkpoint s/checkpoint.rfmc --grid 8 --out d.csv --plot d.png",
        "export-density --checkpoint m/checkpoint.rfmc --out m.vtk",
        "audit-premetric --mesh icosphere:1 --k 10 --pairs 200 --out audit.json",
    ]
    for argv in steps:
        assert main(argv.split()) == 0, argv
    capsys.readouterr()
    skip = {"manifest.timing.json"}  # wall-clock timings are reported separately on purpose
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.mark.criterion(10)
def test_determinism(criterion, tmp_path, capsys, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _artifacts(tmp_path / "a", capsys, monkeypatch)
    second = _artifacts(tmp_path / "b", capsys, monkeypatch)
    differ = sorted(k for k in first if first[k] != second.get(k))
    ok = not differ and first.keys() == second.keys() and len(first) >= 15
    criterion(10, ok, f"{len(first)} files byte-identical across reruns" if ok else f"differing files: {differ}")
    assert ok
