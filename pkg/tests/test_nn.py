import numpy as np
import pytest

from rfm.errors import ContractViolation, NumericError
from rfm.geometry import SPD, FlatTorus, PoincareBall, Sphere
from rfm.mesh import MeshPoint, blob
from rfm.nn import MLP, ParameterSet, ema_update, swish
from rfm.vectorfield import VectorField, adapter_for

MANIFOLDS = [Sphere(2), Sphere(3), FlatTorus(2), PoincareBall(2), PoincareBall(3), SPD(2), SPD(3)]


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# ---------------------------------------------------------------- parameters


def test_parameter_segments_partition():
    net = MLP(3, 2, (5, 4))
    p = net.init(np.random.default_rng(0))
    covered = np.zeros(p.size, dtype=int)
    for name in p.names:
        covered[p.slice_of(name)] += 1
    assert np.all(covered == 1)
    assert p.size == (5 * 3 + 5 + 1) + (4 * 5 + 4 + 1) + (2 * 4 + 2)
    with pytest.raises(ContractViolation):
        ParameterSet(net.layout(), np.zeros(p.size + 1))


def test_init_deterministic_and_small_output():
    net = MLP(4, 3)
    a = net.init(np.random.default_rng(5))
    b = net.init(np.random.default_rng(5))
    np.testing.assert_array_equal(a.data, b.data)
    out = net.forward(a, np.random.default_rng(1).standard_normal((64, 4)))
    assert np.abs(out).max() < 0.1
    for i in range(3):
        assert a.view(f"beta{i}") == 1.0


# ---------------------------------------------------------------- forward


def test_zero_net_outputs_zero():
    net = MLP(3, 3, (8, 8))
    p = ParameterSet(net.layout())
    np.testing.assert_array_equal(net.forward(p, np.ones((4, 3))), 0.0)


def test_swish_large_beta_approximates_relu():
    z = np.concatenate([np.linspace(-3, -0.2, 50), np.linspace(0.2, 3, 50)])
    assert np.max(np.abs(swish(z, 50.0) - np.maximum(z, 0))) < 1e-3


def test_batch_equals_single_calls():
    net = MLP(3, 2, (16, 16))
    p = net.init(np.random.default_rng(2), final_scale=1.0)
    z = np.random.default_rng(3).standard_normal((7, 3))
    batch = net.forward(p, z)
    for i in range(7):
        # equal up to BLAS summation order
        np.testing.assert_allclose(net.forward(p, z[i : i + 1])[0], batch[i], rtol=1e-14, atol=1e-16)


def test_forward_rejects_bad_input():
    net = MLP(2, 2, (4,))
    p = net.init(np.random.default_rng(0))
    with pytest.raises(NumericError):
        net.forward(p, np.array([[np.nan, 0.0]]))
    with pytest.raises(ContractViolation):
        net.forward(p, np.zeros((1, 3)))


# ---------------------------------------------------------------- parameter gradients


def _fd_param_grad(f, p, h=1e-6):
    g = np.zeros(p.size)
    for i in range(p.size):
        old = p.data[i]
        p.data[i] = old + h
        fp = f(p)
        p.data[i] = old - h
        fm = f(p)
        p.data[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_parameter_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    net = MLP(3, 2, (16, 12))
    p = net.init(rng, final_scale=1.0)
    for name in p.names:
        if name.startswith("beta"):
            p.data[p.slice_of(name)] = rng.uniform(0.5, 2.0)
    z = rng.standard_normal((6, 3))
    c = rng.standard_normal((6, 2))

    def loss(params):
        out = net.forward(params, z)
        return np.sum(c * out) + 0.5 * np.sum(out**2)

    out, cache = net.forward(p, z, return_cache=True)
    grad = net.backward(p, cache, c + out)
    assert _rel(grad.data, _fd_param_grad(loss, p)) < 1e-4


def test_zero_weights_give_zero_gradient_for_half_norm_loss():
    net = MLP(3, 3, (8, 8))
    p = net.zeros()
    out, cache = net.forward(p, np.ones((2, 3)), return_cache=True)
    grad = net.backward(p, cache, out)  # d(|v|^2 / 2)/dv = v = 0
    np.testing.assert_array_equal(grad.data, 0.0)


def test_independent_segment_has_exactly_zero_gradient():
    net = MLP(3, 2, (8, 8))
    p = net.init(np.random.default_rng(0), final_scale=1.0)
    p.view("W2")[...] = 0.0  # output ignores all earlier layers
    out, cache = net.forward(p, np.ones((3, 3)), return_cache=True)
    grad = net.backward(p, cache, np.ones_like(out))
    for name in ("W0", "b0", "beta0", "W1", "b1", "beta1"):
        np.testing.assert_array_equal(grad.view(name), 0.0)
    assert np.any(grad.view("W2") != 0)


def test_duplicated_batch_doubles_gradient():
    net = MLP(3, 2, (8,))
    p = net.init(np.random.default_rng(1), final_scale=1.0)
    z = np.random.default_rng(2).standard_normal((1, 3))
    single = net.backward(p, net.forward(p, z, return_cache=True)[1], np.ones((1, 2)))
    double = net.backward(p, net.forward(p, np.repeat(z, 2, 0), return_cache=True)[1], np.ones((2, 2)))
    np.testing.assert_allclose(double.data, 2 * single.data, rtol=1e-14, atol=1e-15)


def test_network_input_jacobian_matches_fd():
    rng = np.random.default_rng(4)
    net = MLP(4, 3, (16, 16))
    p = net.init(rng, final_scale=1.0)
    z = rng.standard_normal((5, 4))
    _, jac = net.input_jacobian(p, z)
    h = 1e-6
    fd = np.stack([(net.forward(p, z + h * e) - net.forward(p, z - h * e)) / (2 * h) for e in np.eye(4)], axis=2)
    assert _rel(jac, fd) < 1e-4
    _, grad_in = net.backward(p, net.forward(p, z, return_cache=True)[1], np.ones((5, 3)), want_input=True)
    np.testing.assert_allclose(grad_in, jac.sum(axis=1), rtol=1e-10)


# ---------------------------------------------------------------- parameterized field


def _field(m, seed=0, hidden=(16, 16), scale=1.0):
    vf = VectorField.for_space(m, hidden=hidden)
    return vf, vf.init(np.random.default_rng(seed), final_scale=scale)


def _points(m, rng, n):
    if isinstance(m, PoincareBall):
        return m.random_point(rng, n, max_dist=1.5)
    return m.random_point(rng, n)


@pytest.mark.parametrize("m", MANIFOLDS, ids=str)
def test_tangency_invariant(m):
    vf, p = _field(m)
    rng = np.random.default_rng(1)
    x = _points(m, rng, 1000)
    t = rng.uniform(0, 1, 1000)
    v = vf(p, t, x)
    assert m.tangent_residual(x, v).max() <= 1e-10


def test_sphere_orthogonal_and_identity_metric():
    m = Sphere(2)
    vf, p = _field(m)
    rng = np.random.default_rng(2)
    x = m.random_point(rng, 100)
    v = vf(p, 0.3, x)
    assert np.abs(np.sum(v * x, axis=1)).max() <= 1e-12
    w = vf.raw(p, 0.3, x)
    np.testing.assert_allclose(v, w - np.sum(w * x, axis=1, keepdims=True) * x, atol=1e-15)


def test_torus_field_is_raw_output():
    m = FlatTorus(2)
    vf, p = _field(m)
    x = m.random_point(np.random.default_rng(3), 10)
    np.testing.assert_array_equal(vf(p, 0.5, x), vf.raw(p, 0.5, x))


def test_ball_scaling_example():
    m = PoincareBall(2)
    vf, p = _field(m)
    x = np.array([[0.6, 0.0], [0.0, -0.6], [0.36, 0.48]])
    np.testing.assert_allclose(vf(p, 0.2, x), 0.32 * vf.raw(p, 0.2, x), rtol=1e-14)


@pytest.mark.parametrize("m", [PoincareBall(2), PoincareBall(3), SPD(2), SPD(3)], ids=str)
def test_metric_normalisation_identity(m):
    vf, p = _field(m)
    rng = np.random.default_rng(4)
    x = _points(m, rng, 200)
    v = vf(p, 0.7, x)
    w = vf.raw(p, 0.7, x)
    pw = m.proju(x, w)
    np.testing.assert_allclose(m.norm(x, v), np.linalg.norm(pw, axis=1), rtol=1e-9)


# ---------------------------------------------------------------- field Jacobians


@pytest.mark.parametrize("m", MANIFOLDS, ids=str)
def test_field_jacobian_matches_fd(m):
    vf, p = _field(m, seed=5)
    rng = np.random.default_rng(6)
    x = _points(m, rng, 8)
    t = rng.uniform(0, 1, 8)
    jac = vf.input_jacobian(p, t, x)
    h = 1e-6
    # Differentiate along tangent directions only (the field is defined on M).
    basis = [m.tangent_basis(xi) for xi in x]
    for i in range(len(x)):
        for e in basis[i]:
            fd = (vf(p, t[i : i + 1], x[i : i + 1] + h * e) - vf(p, t[i : i + 1], x[i : i + 1] - h * e))[0] / (2 * h)
            assert _rel(jac[i] @ e, fd) < 1e-4


def test_mesh_field_jacobian_and_tangency():
    mesh = blob(2)
    vf = VectorField.for_space(mesh, hidden=(16, 16))
    p = vf.init(np.random.default_rng(0), final_scale=1.0)
    rng = np.random.default_rng(1)
    x = MeshPoint(rng.integers(0, mesh.n_faces, 6), rng.dirichlet([4, 4, 4], 6))
    v, jac = vf.with_jacobian(p, 0.4, x)
    np.testing.assert_allclose(np.sum(v * mesh.face_normals[x.face], axis=1), 0.0, atol=1e-15)
    h = 1e-7
    for i in range(6):
        a, b, c = mesh.corners[x.face[i]]
        for e in (b - a, c - a):
            db = np.linalg.lstsq(np.stack([b - a, c - a], 1), e * h, rcond=None)[0]
            dbary = np.array([-db.sum(), db[0], db[1]])
            plus = MeshPoint(x.face[i : i + 1], x.bary[i : i + 1] + dbary)
            minus = MeshPoint(x.face[i : i + 1], x.bary[i : i + 1] - dbary)
            fd = (vf(p, 0.4, plus) - vf(p, 0.4, minus))[0] / (2 * h)
            assert _rel(jac[i] @ e, fd) < 1e-4


def test_zero_net_zero_jacobian():
    for m in MANIFOLDS:
        vf = VectorField.for_space(m, hidden=(8,))
        p = vf.net.zeros()
        x = _points(m, np.random.default_rng(0), 3)
        np.testing.assert_array_equal(vf.input_jacobian(p, 0.5, x), 0.0)


def test_linear_net_on_torus():
    m = FlatTorus(2)
    vf = VectorField(adapter_for(m, periodic_torus=False), hidden=())
    p = vf.net.zeros()
    a = np.array([[0.5, -1.0], [2.0, 0.25]])
    p.view("W0")[:, :2] = a
    x = m.random_point(np.random.default_rng(1), 4)
    np.testing.assert_allclose(vf.input_jacobian(p, 0.3, x), np.broadcast_to(a, (4, 2, 2)))
    p.view("W0")[:, :2] = np.eye(2)
    np.testing.assert_allclose(vf.divergence(p, 0.3, x), 2.0)


# ---------------------------------------------------------------- divergence oracle


def _coordinate_divergence(m, vf, p, t, x, h=1e-5):
    """(1/sqrt|G|) sum_a d_a (sqrt|G| v^a) in a chart, metric assembled from the manifold inner product."""
    if isinstance(m, SPD):
        n = m.n
        idx = [(i, j) for i in range(n) for j in range(i, n)]

        def chart(xi):
            a = np.zeros((n, n))
            for k, (i, j) in enumerate(idx):
                a[i, j] = a[j, i] = xi[k]
            return a.reshape(1, -1)

        def coords(v):
            vm = v.reshape(n, n)
            return np.array([vm[i, j] for i, j in idx])

        def frame(xi):
            out = []
            for i, j in idx:
                e = np.zeros((n, n))
                e[i, j] = e[j, i] = 1.0
                out.append(e.reshape(-1))
            return np.array(out)

        xi0 = coords(x[0])
    elif isinstance(m, Sphere):
        basis = m.tangent_basis(x[0])

        def chart(xi):
            return m.exp(x[0:1], (xi @ basis)[None])

        def frame(xi):
            return np.stack([(chart(xi + h * e) - chart(xi - h * e))[0] / (2 * h) for e in np.eye(len(xi))])

        def coords(v):
            return np.linalg.lstsq(frame_cache[0].T, v, rcond=None)[0]

        xi0 = np.zeros(m.n)
    else:

        def chart(xi):
            return xi[None]

        def frame(xi):
            return np.eye(len(xi))

        def coords(v):
            return v

        xi0 = x[0].copy()

    def density_times_v(xi):
        pt = chart(xi)
        f = frame(xi)
        if isinstance(m, Sphere):
            frame_cache[0] = f
        g = np.array([[m.inner(pt[0], a, b) for b in f] for a in f])
        return np.sqrt(np.linalg.det(g)) * coords(vf(p, t, pt)[0])

    frame_cache = [None]
    k = len(xi0)
    total = 0.0
    for a in range(k):
        e = np.zeros(k)
        e[a] = h
        total += (density_times_v(xi0 + e)[a] - density_times_v(xi0 - e)[a]) / (2 * h)
    pt = chart(xi0)
    f = frame(xi0)
    g = np.array([[m.inner(pt[0], a, b) for b in f] for a in f])
    return total / np.sqrt(np.linalg.det(g))


@pytest.mark.parametrize("m", [PoincareBall(2), PoincareBall(3), SPD(2), SPD(3), Sphere(2), FlatTorus(3)], ids=str)
def test_divergence_matches_coordinate_fd(m):
    vf, p = _field(m, seed=7)
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100 if m.ambient_dim <= 4 else 25):
        x = _points(m, rng, 1)
        t = rng.uniform(0, 1)
        analytic = vf.divergence(p, t, x)[0]
        oracle = _coordinate_divergence(m, vf, p, t, x)
        worst = max(worst, abs(analytic - oracle) / max(abs(oracle), 1.0))
    assert worst < 1e-4


def test_ball_constant_raw_field_divergence():
    m = PoincareBall(2)
    vf = VectorField.for_space(m, hidden=(4,))
    p = vf.net.zeros()
    p.view("b1")[...] = [0.3, -0.7]  # constant raw output c
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = m.random_point(rng, 1, max_dist=2.0)
        assert abs(vf.divergence(p, 0.0, x)[0] - _coordinate_divergence(m, vf, p, 0.0, x)) < 1e-4


def test_divergence_zero_field():
    for m in MANIFOLDS:
        vf = VectorField.for_space(m, hidden=(4,))
        x = _points(m, np.random.default_rng(0), 3)
        np.testing.assert_array_equal(vf.divergence(vf.net.zeros(), 0.1, x), 0.0)


# ---------------------------------------------------------------- loss gradient through the field


@pytest.mark.parametrize("m", [Sphere(2), PoincareBall(2), SPD(2), FlatTorus(2)], ids=str)
def test_field_loss_gradient_matches_fd(m):
    vf, p = _field(m, seed=10, hidden=(8, 8))
    rng = np.random.default_rng(11)
    x = _points(m, rng, 5)
    t = rng.uniform(0, 1, 5)
    target = m.proju(x, rng.standard_normal(x.shape))
    adapter = vf.adapter

    def closure(v, y):
        r = v - target
        return np.mean(adapter.sq_norm(y, r)), 2 * adapter.lower(y, r) / len(v)

    loss, grad = vf.loss_gradient(p, t, x, closure)

    def f(params):
        v = vf(params, t, x)
        return np.mean(m.inner(x, v - target, v - target))

    assert loss == pytest.approx(f(p), rel=1e-12)
    assert _rel(grad.data, _fd_param_grad(f, p)) < 1e-4


def test_loss_closure_contract():
    vf, p = _field(Sphere(2))
    x = Sphere(2).random_point(np.random.default_rng(0), 2)
    with pytest.raises(ContractViolation):
        vf.loss_gradient(p, 0.1, x, lambda v, y: 1.0)
    with pytest.raises(ContractViolation):
        vf.loss_gradient(p, 0.1, x, lambda v, y: (1.0, np.zeros(3)))


# ---------------------------------------------------------------- EMA


def test_ema_examples():
    net = MLP(1, 1, ())
    live = net.zeros()
    live.data[...] = 1.0
    ema = live.like()
    ema_update(ema, live, 0.999)
    np.testing.assert_allclose(ema.data, 0.001)
    before = ema.data.copy()
    ema_update(ema, live, 1.0)
    np.testing.assert_array_equal(ema.data, before)
    ema_update(ema, live, 0.0)
    np.testing.assert_array_equal(ema.data, live.data)
    with pytest.raises(ContractViolation):
        ema_update(MLP(2, 1, ()).zeros(), live, 0.5)
