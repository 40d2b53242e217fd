import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rfm.training as training
from rfm.checkpoint import Checkpoint
from rfm.errors import CheckpointMismatch, ConfigError, ContractViolation, NaNLossError
from rfm.geometry import PoincareBall
from rfm.io import read_jsonl
from rfm.likelihood import Euler, UniformMesh, nll
from rfm.mesh import icosphere, mesh_eigenbasis, weighting_from_name
from rfm.premetric import EuclideanPremetric, LinearScheduler, SpectralPremetric
from rfm.rng import SEED_ENV, make_rng
from rfm.tasks import build_task
from rfm.training import (
    AdamState,
    PathBank,
    TrainConfig,
    adam_step,
    build_batch,
    clip_by_norm,
    rcfm_loss,
    regression_loss,
    split_dataset,
    split_indices,
    train,
)
from rfm.vectorfield import Adapter, VectorField


def small_cfg(**kw):
    base = dict(
        manifold="torus:2", n_points=300, iterations=40, batch_size=32, eval_every=20, eval_points=30,
        eval_steps=10, hidden=(16, 16), log_every=5,
    )  # fmt: skip
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- objective


def test_loss_zero_when_field_equals_target():
    space = PoincareBall(2)
    vf = VectorField.for_space(space, hidden=(8,))
    params = vf.init(np.random.default_rng(0), final_scale=1.0)
    x = space.random_point(make_rng(1), 5)
    t = np.linspace(0, 0.9, 5)
    loss, grad = regression_loss(vf, params, x, vf(params, t, x), t)
    assert loss == 0.0
    assert np.all(grad.data == 0.0)


def test_euclidean_zero_net_loss_is_one():
    vf = VectorField(Adapter(1), hidden=(4,))
    params = vf.init(np.random.default_rng(0), final_scale=0.0)
    loss, _, path = rcfm_loss(vf, params, EuclideanPremetric(1), LinearScheduler(), [[0.0]], [[1.0]], np.array([0.0]))
    np.testing.assert_allclose(path.u_t, [[1.0]])
    assert abs(loss - 1.0) < 1e-15


def test_ball_metric_weighting():
    space = PoincareBall(2)
    vf = VectorField.for_space(space, hidden=(4,))
    params = vf.init(np.random.default_rng(0), final_scale=0.0)
    x = np.array([[0.6, 0.0]])
    r = np.array([[0.3, -0.4]])
    loss, _ = regression_loss(vf, params, x, -r, np.array([0.5]))  # the zero field leaves residual r
    ratio = loss / np.sum(r**2)
    assert abs(ratio - 4 / 0.64**2) < 1e-12
    assert abs(ratio - 9.77) < 5e-3


def test_loss_gradient_matches_finite_differences():
    space = PoincareBall(2)
    vf = VectorField.for_space(space, hidden=(6,))
    params = vf.init(np.random.default_rng(2), final_scale=0.5)
    x = space.random_point(make_rng(3), 4)
    t = np.array([0.1, 0.3, 0.5, 0.7])
    u = np.random.default_rng(4).standard_normal((4, 2))
    _, grad = regression_loss(vf, params, x, u, t)
    rng = np.random.default_rng(5)
    for i in rng.choice(params.size, 8, replace=False):
        h = 1e-6
        a, b = params.copy(), params.copy()
        a.data[i] += h
        b.data[i] -= h
        fd = (regression_loss(vf, a, x, u, t)[0] - regression_loss(vf, b, x, u, t)[0]) / (2 * h)
        assert abs(fd - grad.data[i]) <= 1e-5 * max(1.0, abs(fd))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_parameters():
    p = np.array([1.0, -2.0])
    st0 = AdamState(np.array([0.5, 0.1]), np.array([0.2, 0.3]), 4)
    new, st1 = adam_step(p, np.zeros(2), st0, lr=1e-3)
    np.testing.assert_allclose(st1.m, 0.9 * st0.m)
    np.testing.assert_allclose(st1.v, 0.999 * st0.v)
    # fresh moments and a zero gradient: no movement at all
    new, _ = adam_step(p, np.zeros(2), AdamState.zeros(2), lr=1e-3)
    np.testing.assert_array_equal(new, p)


def test_adam_first_step():
    g = np.array([0.5, -3.0, 1e-3])
    new, st1 = adam_step(np.zeros(3), g, AdamState.zeros(3), lr=0.01)
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st1.step == 1


def test_adam_constant_gradient_step_tends_to_lr():
    p, s = np.zeros(2), AdamState.zeros(2)
    g = np.array([2.0, -0.01])
    for _ in range(3000):
        prev = p
        p, s = adam_step(p, g, s, lr=1e-3)
    np.testing.assert_allclose(np.abs(p - prev), 1e-3, rtol=1e-3)


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), 1e-3)


def test_clip_by_norm():
    g, n, c = clip_by_norm(np.array([30.0, 40.0]), 10.0)
    np.testing.assert_allclose(g, [6.0, 8.0])
    assert n == 50.0 and c
    g, _, c = clip_by_norm(np.array([3.0, 4.0]), 10.0)
    assert not c and g.tolist() == [3.0, 4.0]


# ---------------------------------------------------------------- splits


def test_split_ten_points():
    tr, va, te = split_indices(10)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    with pytest.raises(ConfigError):
        split_indices(9)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 500), st.integers(0, 100))
def test_split_partition_and_determinism(n, seed):
    pts = np.arange(n) * 1.5
    a = split_dataset(pts, seed=seed)
    b = split_dataset(pts, seed=seed)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    joined = np.concatenate(a)
    np.testing.assert_array_equal(np.sort(joined), pts)
    assert min(len(s) for s in a) >= 1


# ---------------------------------------------------------------- config


def test_config_ini_round_trip_and_precedence(monkeypatch):
    cfg = small_cfg(seed=3, lr=2.5e-4)
    text = cfg.to_ini()
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert TrainConfig.from_ini(text) == cfg
    monkeypatch.setenv(SEED_ENV, "11")
    assert TrainConfig.from_ini(text).seed == 11
    assert TrainConfig.from_ini(text, overrides={"seed": "5"}).seed == 5
    assert TrainConfig.from_ini(text, overrides={"hidden": "8,8"}).hidden == (8, 8)


@pytest.mark.parametrize(
    "text",
    [
        "[space]\nmanifold = mesh\nmesh = icosphere:2\npremetric = geodesic\n",
        "[space]\npremetric = biharmonic\n",
        "[train]\nsplit = 0.5,0.5,0.5\n",
        "[train]\nlr = -1\n",
        "[train]\nbogus = 1\n",
        "[nowhere]\nlr = 1\n",
        "[train]\nlr = fast\n",
        "not an ini",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_ini(text)


def test_geodesic_on_mesh_names_the_rule():
    with pytest.raises(ConfigError, match="biharmonic or diffusion"):
        TrainConfig(manifold="mesh", mesh="icosphere:2", premetric="geodesic")


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def torus_task():
    return build_task(small_cfg())


def test_zero_iterations_checkpoint_is_init(torus_task, tmp_path):
    cfg = small_cfg(iterations=0)
    res = train(cfg, torus_task, tmp_path)
    vf = VectorField.for_space(torus_task.space, cfg.hidden)
    init = vf.init(make_rng(cfg.seed, training.STREAM_INIT), cfg.final_scale)
    ck = Checkpoint.load(tmp_path / "checkpoint.rfmc")
    np.testing.assert_array_equal(ck.live.data, init.data)
    np.testing.assert_array_equal(ck.ema.data, init.data)
    assert ck.iteration == 0 and res.losses == []


def test_same_seed_same_run(torus_task, tmp_path):
    a = train(small_cfg(), torus_task, tmp_path / "a")
    b = train(small_cfg(), torus_task, tmp_path / "b")
    assert a.losses == b.losses
    for name in ("checkpoint.rfmc", "best.rfmc", "manifest.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = train(small_cfg(seed=1), torus_task)
    assert c.losses != a.losses


def test_manifest_contents(torus_task, tmp_path):
    res = train(small_cfg(), torus_task, tmp_path)
    recs = read_jsonl(tmp_path / "manifest.jsonl")
    events = [r["event"] for r in recs]
    assert events[0] == "config" and events[1] == "split" and events[-1] == "end"
    assert events.count("loss") == 40 // 5
    assert [r["iteration"] for r in recs if r["event"] == "val"] == [20, 40]
    assert all(math.isfinite(r["loss"]) for r in recs if r["event"] == "loss")
    assert (tmp_path / "manifest.timing.json").exists()
    assert res.best_iter in (20, 40)


def test_resume_continues_the_same_trajectory(torus_task, tmp_path):
    full = train(small_cfg(), torus_task, tmp_path / "full")
    train(small_cfg(iterations=20), torus_task, tmp_path / "half")
    ck = Checkpoint.load(tmp_path / "half" / "checkpoint.rfmc")
    rest = train(small_cfg(), torus_task, tmp_path / "half", resume=ck)
    assert rest.losses == full.losses
    np.testing.assert_array_equal(rest.live.data, full.live.data)
    assert (tmp_path / "half" / "checkpoint.rfmc").read_bytes() == (tmp_path / "full" / "checkpoint.rfmc").read_bytes()


def test_resume_with_changed_config_is_rejected(torus_task, tmp_path):
    train(small_cfg(iterations=5, eval_every=0), torus_task, tmp_path)
    ck = Checkpoint.load(tmp_path / "checkpoint.rfmc")
    with pytest.raises(CheckpointMismatch, match="lr"):
        train(small_cfg(iterations=10, eval_every=0, lr=1e-3), torus_task, resume=ck)


def test_nan_loss_aborts_with_dump(torus_task, tmp_path, monkeypatch):
    real = training.regression_loss

    def poisoned(vf, params, x_t, u_t, t):
        loss, grad = real(vf, params, x_t, u_t, t)
        return float("nan"), grad

    monkeypatch.setattr(training, "regression_loss", poisoned)
    with pytest.raises(NaNLossError) as info:
        train(small_cfg(), torus_task, tmp_path)
    assert info.value.exit_code == 5
    dump = np.load(tmp_path / "nan_batch.npz")
    assert dump["x0"].shape == (32, 2) and dump["u_t"].shape == (32, 2)
    assert read_jsonl(tmp_path / "manifest.jsonl")[-1]["event"] == "nan"


def test_early_stopping(torus_task, monkeypatch):
    scripted = iter([3.0, 2.0, 2.5, 2.1, 2.2, 1.0])
    monkeypatch.setattr(training, "_validation_nll", lambda *a: next(scripted))
    res = train(small_cfg(iterations=400, eval_every=10, patience=3), torus_task)
    assert res.stopped_early
    assert res.iteration == 50
    assert res.best_iter == 20 and res.best_val == 2.0
    assert res.manifest[-2]["event"] == "early_stop"


def test_training_improves_validation_nll():
    cfg = TrainConfig(manifold="torus:2", n_points=2000, iterations=1500, lr=1e-3, eval_every=500, eval_points=200)
    task = build_task(cfg)
    res = train(cfg, task)
    _, val, _ = task.splits(cfg)
    base_nll = float(np.mean(-task.base.log_density(val)))
    assert res.best_val <= base_nll - 1.0
    early = np.mean(res.losses[:10])
    late = np.mean(res.losses[-200:])
    assert late < early / 2


# ---------------------------------------------------------------- batches on meshes


@pytest.fixture(scope="module")
def sphere_mesh_pm():
    mesh = icosphere(2)
    return mesh, SpectralPremetric(mesh, mesh_eigenbasis(mesh, 40), weighting_from_name("biharmonic"))


def test_build_batch_on_mesh(sphere_mesh_pm):
    mesh, pm = sphere_mesh_pm
    base = UniformMesh(mesh)
    rng = make_rng(0)
    x1 = base.sample(rng, 16)
    t = rng.uniform(0, 0.9, 16)
    path, x0, _ = build_batch(pm, LinearScheduler(), base, x1, t, rng, steps=50)
    path.x_t.validate(mesh)
    assert np.all(np.isfinite(path.u_t))
    assert np.all(pm.value(x0, x1) > 1e-10)


def test_path_bank_snapshots_follow_the_flow(sphere_mesh_pm):
    mesh, pm = sphere_mesh_pm
    base = UniformMesh(mesh)
    sched = LinearScheduler()
    pool = base.sample(make_rng(1), 50)
    bank = PathBank(pm, sched, base, pool, 400, 4, 100, make_rng(2))
    assert 0 < bank.size <= 400
    bank.x_t.validate(mesh)
    assert np.all((bank.t >= 0) & (bank.t < 1))
    t, x, u = bank.draw(make_rng(3), 64)
    assert len(t) == 64 and u.shape == (64, 3)
    # targets are tangent to the faces they sit on
    normals = mesh.face_normals[x.face]
    assert np.max(np.abs(np.sum(normals * u, axis=1))) < 1e-9


def test_mesh_training_with_bank_runs(tmp_path):
    cfg = TrainConfig(
        manifold="mesh", mesh="icosphere:1", premetric="biharmonic", k=20, data="mesh_eigen", target_mode=3,
        upsample=1, n_points=200, iterations=20, batch_size=16, eval_every=10, eval_points=10, eval_steps=5,
        hidden=(8, 8), bank_size=500, bank_snapshots=5, flow_steps=40, log_every=5,
    )  # fmt: skip
    task = build_task(cfg)
    res = train(cfg, task, tmp_path)
    assert any(r["event"] == "bank" for r in res.manifest)
    assert np.all(np.isfinite(res.losses))
    _, val, _ = task.splits(cfg)
    out = nll(res.field, res.best, task.base, val, Euler(5))
    assert np.all(np.isfinite(out.nll))
