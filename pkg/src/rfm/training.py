"""Training: configuration, the regression objective, Adam, EMA, splits and the loop.

Each iteration draws data points x1, base points x0 and times t, builds the
conditional point x_t and its target velocity u_t (closed form for geodesic
premetrics, projected Euler otherwise) and regresses the field onto u_t in
the metric norm.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import (
    CheckpointMismatch,
    ConfigError,
    ContractViolation,
    CutLocusError,
    DegenerateGradientError,
    FlowStallError,
    NaNLossError,
    UndefinedFieldError,
)
from .io import atomic_write_bytes, atomic_write_text, canonical_json
from .mesh import MeshPoint, TriangleMesh
from .nn import ParameterSet, ema_update
from .premetric import (
    EPS_T,
    COINCIDENT_TOL,
    LinearScheduler,
    conditional_path,
    conditional_vector_field,
)
from .rng import make_rng, resolve_seed, rng_from_state, rng_state
from .vectorfield import VectorField

log = logging.getLogger(__name__)

DEGENERATE_PAIR_TOL = 1e-10
MAX_RESAMPLE = 20

# rng streams
STREAM_INIT, STREAM_TRAIN, STREAM_BANK, STREAM_SPLIT = 1, 2, 3, 4


# ---------------------------------------------------------------- configuration

_SECTIONS = {
    "space": ("manifold", "mesh", "spectral_cache", "premetric", "k", "tau"),
    "data": ("data", "data_path", "n_points", "data_scale", "data_seed", "target_mode", "upsample", "radians", "maze_sigma"),
    "base": ("base", "base_scale"),
    "model": ("hidden", "periodic_torus", "final_scale"),
    "train": (
        "seed", "batch_size", "iterations", "lr", "beta1", "beta2", "adam_eps", "ema_decay", "grad_clip",
        "split", "eval_every", "eval_points", "eval_steps", "patience", "flow_steps", "bank_size",
        "bank_snapshots", "bank_refresh", "log_every", "use_ema",
    ),
}  # fmt: skip


@dataclass
class TrainConfig:
    """Run configuration; read from an INI file with [space] [data] [base] [model] [train] sections."""

    # space
    manifold: str = "torus:2"  # manifold tag, or "mesh"
    mesh: str = ""  # mesh file, or generator: icosphere:L, grid:N, blob:L, maze:RxC[:seed]
    spectral_cache: str = ""
    premetric: str = "geodesic"  # geodesic | biharmonic | diffusion
    k: int = 100
    tau: float = 0.25
    # data
    data: str = "wrapped_gaussian"  # wrapped_gaussian | latlon_csv | angles_csv | dataset | mesh_eigen | maze
    data_path: str = ""
    n_points: int = 10000
    data_scale: float = 0.2
    data_seed: int = 0
    target_mode: int = 5
    upsample: int = 3
    radians: bool = False
    maze_sigma: float = 0.3
    # base
    base: str = "uniform"  # uniform | wrapped_gaussian | maze
    base_scale: float = 1.0
    # model
    hidden: tuple = (64, 64, 64)
    periodic_torus: bool = True
    final_scale: float = 1e-2
    # optimisation
    seed: int = 0
    batch_size: int = 256
    iterations: int = 5000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    grad_clip: float = 100.0
    split: tuple = (0.8, 0.1, 0.1)
    eval_every: int = 500
    eval_points: int = 512
    eval_steps: int = 100
    patience: int = 0  # evaluations without improvement before stopping; 0 disables early stopping
    flow_steps: int = 300
    bank_size: int = 0  # > 0: precomputed simulated (x_t, u_t) pairs for non-closed-form premetrics
    bank_snapshots: int = 16
    bank_refresh: int = 0
    log_every: int = 10
    use_ema: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.split = tuple(float(s) for s in self.split)
        self.validate()

    # -------------------------------------------------------------- checks
    @property
    def is_mesh(self) -> bool:
        return self.manifold == "mesh"

    def validate(self):
        if self.is_mesh:
            if self.premetric not in ("biharmonic", "diffusion"):
                raise ConfigError(
                    f"premetric {self.premetric!r} is not available on meshes: "
                    "geodesics have no closed form there, use biharmonic or diffusion"
                )
            if not self.mesh:
                raise ConfigError("mesh spaces need a 'mesh' source")
        elif self.premetric != "geodesic":
            raise ConfigError(f"premetric {self.premetric!r} needs a mesh; simple manifolds use geodesic")
        if len(self.split) != 3 or any(s <= 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three positive numbers summing to 1")
        for name in ("batch_size", "lr", "adam_eps", "grad_clip", "flow_steps", "eval_steps", "k", "tau", "log_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("iterations", "eval_every", "patience", "bank_size", "bank_refresh", "eval_points"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.ema_decay <= 1):
            raise ConfigError("beta1, beta2 must lie in [0, 1) and ema_decay in [0, 1]")
        if self.data == "maze" and self.base != "maze":
            raise ConfigError("maze data comes with its own base distribution: set base = maze")
        if self.base == "maze" and self.data != "maze":
            raise ConfigError("base = maze needs data = maze")
        if not self.hidden:
            raise ConfigError("the network needs at least one hidden layer")

    # -------------------------------------------------------------- (de)serialisation
    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.as_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = self.as_dict()
        for sec, keys in _SECTIONS.items():
            cp[sec] = {k: _fmt(d[k]) for k in keys}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, overrides: dict | None = None, env_seed: bool = True) -> "TrainConfig":
        """Parse INI text; ``overrides`` (field -> value or string) win, then RFM_SEED for the seed."""
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        raw = {}
        known = {k: sec for sec, keys in _SECTIONS.items() for k in keys}
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            for k, v in cp[sec].items():
                if known.get(k) != sec:
                    raise ConfigError(f"unknown key {k!r} in section [{sec}]")
                raw[k] = v
        for k, v in (overrides or {}).items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            raw[k] = v
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for k, v in raw.items():
            values[k] = _parse(k, v, types[k].default)
        if env_seed and "seed" not in (overrides or {}):
            # RFM_SEED beats the file, an explicit override beats both
            values["seed"] = resolve_seed(None, values.get("seed", types["seed"].default))
        return cls(**values)

    @classmethod
    def load(cls, path, overrides=None) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, overrides)


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name, value, default):
    if not isinstance(value, str):
        return value
    s = value.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            items = [x for x in s.replace(" ", "").split(",") if x]
            return tuple((int if isinstance(default[0], int) else float)(x) for x in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return s


# ---------------------------------------------------------------- objective


def regression_loss(vf, params, x_t, u_t, t):
    """Mean squared g-norm of ``v(t, x_t) - u_t`` and its parameter gradient (targets are constants)."""
    u_t = np.asarray(u_t, dtype=float)

    def closure(v, y):
        r = v - u_t
        b = len(r)
        return float(np.mean(vf.adapter.sq_norm(y, r))), 2.0 * vf.adapter.lower(y, r) / b

    return vf.loss_gradient(params, t, x_t, closure)


def rcfm_loss(vf, params, pm, sched, x0, x1, t, steps: int = 300):
    """RCFM objective on one batch of (x0, x1, t); returns (loss, gradient, conditional path)."""
    path = conditional_path(pm, sched, x0, x1, t, steps)
    loss, grad = regression_loss(vf, params, path.x_t, path.u_t, t)
    return loss, grad, path


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new params and state (inputs are not modified)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ContractViolation("Adam parameters, gradients and moments must share one shape")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


def clip_by_norm(grads, max_norm):
    """Rescale to global norm ``max_norm`` if larger; returns (grads, norm, clipped)."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm), norm, True
    return grads, norm, False


# ---------------------------------------------------------------- splits


def split_indices(n, fractions=(0.8, 0.1, 0.1), seed=0):
    if n < 10:
        raise ConfigError("need at least 10 points to split into train/val/test")
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 3 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError("split fractions must be three positive numbers summing to 1")
    n_val = int(math.floor(fr[1] * n + 1e-9))
    n_test = int(math.floor(fr[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("a split would be empty")
    perm = make_rng(seed, STREAM_SPLIT).permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split_dataset(points, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle and split into disjoint train / val / test parts."""
    tr, va, te = split_indices(len(points), fractions, seed)
    take = points.take if hasattr(points, "take") else (lambda i: points[i])
    return take(tr), take(va), take(te)


# ---------------------------------------------------------------- batches


def _take(x, idx):
    return x[idx]


def _concat(parts):
    if isinstance(parts[0], MeshPoint):
        return MeshPoint(np.concatenate([p.face for p in parts]), np.concatenate([p.bary for p in parts]))
    return np.concatenate(parts)


def _replace_rows(x, idx, new):
    if isinstance(x, MeshPoint):
        face, bary = x.face.copy(), x.bary.copy()
        face[idx], bary[idx] = new.face, new.bary
        return MeshPoint(face, bary)
    x = x.copy()
    x[idx] = new
    return x


def draw_pairs(pm, base, x1, rng):
    """Base points paired with ``x1``; pairs closer than the degeneracy tolerance get a fresh x0."""
    x0 = base.sample(rng, len(x1))
    for _ in range(MAX_RESAMPLE):
        bad = np.flatnonzero(~(np.asarray(pm.value(x0, x1)) >= DEGENERATE_PAIR_TOL))
        if len(bad) == 0:
            return x0
        x0 = _replace_rows(x0, bad, base.sample(rng, len(bad)))
    raise FlowStallError("could not draw non-degenerate (x0, x1) pairs")


def build_batch(pm, sched, base, x1, t, rng, steps):
    """Conditional path for one batch; a failure on some pair redraws its x0 and retries."""
    x0 = draw_pairs(pm, base, x1, rng)
    resampled = 0
    for _ in range(MAX_RESAMPLE):
        try:
            return conditional_path(pm, sched, x0, x1, t, steps), x0, resampled
        except (CutLocusError, DegenerateGradientError, UndefinedFieldError, FlowStallError):
            resampled += 1
            x0 = draw_pairs(pm, base, x1, rng)
    raise FlowStallError("conditional paths kept failing after resampling")


class PathBank:
    """Precomputed (t, x_t, u_t) triples from simulated conditional flows.

    Each trajectory runs ``steps`` projected Euler steps of size (1 - eps) / steps
    from x0 towards x1; ``snapshots`` uniform times per trajectory are read off
    by a partial step from the preceding grid point, so one simulation yields
    several training pairs.
    """

    def __init__(self, pm, sched, base, x1_pool, size, snapshots, steps, rng):
        self.t, self.x_t, self.u_t = self._build(pm, sched, base, x1_pool, size, snapshots, steps, rng)
        self.size = len(self.t)

    @staticmethod
    def _build(pm, sched, base, x1_pool, size, snapshots, steps, rng, chunk=4096):
        n_traj = max(1, -(-size // snapshots))
        ts, xs, us = [], [], []
        t_end = 1.0 - sched.eps
        dt = t_end / steps
        for a in range(0, n_traj, chunk):
            b = min(n_traj, a + chunk)
            x1 = _take(x1_pool, rng.integers(0, len(x1_pool), b - a))
            x0 = draw_pairs(pm, base, x1, rng)
            t_snap = np.sort(rng.uniform(0.0, t_end, (b - a, snapshots)), axis=1)
            grid = np.minimum((t_snap / dt).astype(np.int64), steps - 1)
            x = x0
            alive = np.ones(b - a, dtype=bool)
            got_t, got_x, got_u = [], [], []
            for i in range(steps):
                s = np.full(b - a, i * dt)
                live = np.flatnonzero(alive)
                if len(live) == 0:
                    break
                xl, x1l = _take(x, live), _take(x1, live)
                try:
                    u = conditional_vector_field(pm, sched, xl, x1l, s[live])
                except (DegenerateGradientError, UndefinedFieldError):
                    d, g = pm.value_and_gradient(xl, x1l)
                    ok = (d >= COINCIDENT_TOL) & np.all(np.isfinite(g), axis=1)
                    alive[live[~ok]] = False
                    live, xl, x1l = live[ok], _take(xl, np.flatnonzero(ok)), _take(x1l, np.flatnonzero(ok))
                    if len(live) == 0:
                        break
                    u = conditional_vector_field(pm, sched, xl, x1l, s[live])
                # read off the snapshots that fall in [i dt, (i+1) dt)
                rows, cols = np.nonzero(grid[live] == i)
                if len(rows):
                    tau = t_snap[live[rows], cols] - i * dt
                    xp, _ = pm.euler_step(_take(xl, rows), u[rows], tau)
                    try:
                        up = conditional_vector_field(pm, sched, xp, _take(x1l, rows), t_snap[live[rows], cols])
                        got_t.append(t_snap[live[rows], cols])
                        got_x.append(xp)
                        got_u.append(up)
                    except (DegenerateGradientError, UndefinedFieldError):
                        pass
                xn, _ = pm.euler_step(xl, u, np.full(len(live), dt))
                x = _replace_rows(x, live, xn) if len(live) < (b - a) else xn
            if got_t:
                ts.append(np.concatenate(got_t))
                xs.append(_concat(got_x))
                us.append(np.concatenate(got_u))
        if not ts:
            raise FlowStallError("path bank is empty: every simulated trajectory stalled")
        return np.concatenate(ts), _concat(xs), np.concatenate(us)

    def draw(self, rng, n):
        idx = rng.integers(0, self.size, n)
        return self.t[idx], _take(self.x_t, idx), self.u_t[idx]


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    config: TrainConfig
    field: VectorField
    live: ParameterSet
    ema: ParameterSet
    best: ParameterSet
    best_val: float
    best_iter: int
    iteration: int
    losses: list
    val_trace: list
    clip_events: int
    stopped_early: bool
    manifest: list
    checkpoint: Checkpoint
    timings: dict = field(default_factory=dict)

    @property
    def eval_params(self) -> ParameterSet:
        return self.best


class Manifest:
    """Append-only run record (one JSON object per line); timings go to a sidecar file."""

    def __init__(self, path=None, records=None):
        self.path = Path(path) if path else None
        self.records = list(records or [])
        self.timings = {}

    def add(self, **rec):
        self.records.append(rec)

    def time(self, phase, seconds):
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds

    def flush(self):
        if self.path is None:
            return
        atomic_write_text(self.path, "".join(canonical_json(r) + "\n" for r in self.records))
        timing_path = self.path.with_name(self.path.stem + ".timing.json")
        atomic_write_text(timing_path, canonical_json(self.timings) + "\n")


def _validation_nll(vf, params, base, val_points, cfg):
    from .likelihood import Euler, nll

    return float(np.mean(nll(vf, params, base, val_points, solver=Euler(cfg.eval_steps)).nll))


def _dump_batch(out_dir, it, x0, x1, t, path):
    if out_dir is None:
        return None
    import io as _io

    buf = _io.BytesIO()
    arrays = {"iteration": np.array(it), "t": np.asarray(t)}
    for name, val in (("x0", x0), ("x1", x1), ("x_t", getattr(path, "x_t", None))):
        if isinstance(val, MeshPoint):
            arrays[name + "_face"], arrays[name + "_bary"] = val.face, val.bary
        elif val is not None:
            arrays[name] = np.asarray(val)
    if getattr(path, "u_t", None) is not None:
        arrays["u_t"] = np.asarray(path.u_t)
    np.savez(buf, **arrays)
    dump = Path(out_dir) / "nan_batch.npz"
    atomic_write_bytes(dump, buf.getvalue())
    return str(dump)


def train(cfg: TrainConfig, task, out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Run the training loop on ``task`` (built by :func:`rfm.tasks.build_task`).

    Writes ``checkpoint.rfmc``, ``best.rfmc`` and ``manifest.jsonl`` to
    ``out_dir`` when given.  ``resume`` continues from a checkpoint taken
    with a compatible config (only ``iterations`` may differ).
    """
    t_setup = time.perf_counter()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    sched = LinearScheduler(EPS_T)
    vf = VectorField.for_space(task.space, cfg.hidden, cfg.periodic_torus)
    pm, base = task.premetric, task.base
    train_pts, val_pts, _ = task.splits(cfg)
    manifest = Manifest(out / "manifest.jsonl" if out else None)
    if len(val_pts) > cfg.eval_points > 0:
        val_eval = val_pts[np.arange(cfg.eval_points)]
    else:
        val_eval = val_pts

    if resume is None:
        live = vf.init(make_rng(cfg.seed, STREAM_INIT), cfg.final_scale)
        ema = live.copy()
        adam = AdamState.zeros(live.size)
        rng = make_rng(cfg.seed, STREAM_TRAIN)
        start, best_val, best_iter, clip_events, stale = 0, math.inf, 0, 0, 0
        best = ema.copy()
        losses, val_trace = [], []
        manifest.add(event="config", config=cfg.as_dict(), space=vf.adapter.tag, task=task.describe())
        manifest.add(event="split", train=len(train_pts), val=len(val_pts), test=task.n_test(cfg))
    else:
        _check_resume(cfg, resume)
        live, ema = resume.live.copy(), resume.ema.copy()
        live_expected = vf.net.zeros()
        resume.check_layout(live_expected)
        adam = AdamState(resume.adam_m.copy(), resume.adam_v.copy(), resume.adam_step)
        rng = rng_from_state(resume.rng_state)
        ex = resume.extra
        start, best_val, best_iter = resume.iteration, ex["best_val"], ex["best_iter"]
        clip_events, stale = ex["clip_events"], ex["stale"]
        losses, val_trace = list(ex.get("losses", [])), [tuple(v) for v in ex.get("val_trace", [])]
        best = ParameterSet([(n, tuple(s)) for n, s in resume.live.layout()], np.array(ex["best_params"]))
        if out and (out / "manifest.jsonl").exists():
            from .io import read_jsonl

            manifest.records = read_jsonl(out / "manifest.jsonl")
        manifest.add(event="resume", iteration=start)

    bank = None
    needs_sim = isinstance(task.space, TriangleMesh)
    manifest.time("setup", time.perf_counter() - t_setup)
    if needs_sim and cfg.bank_size > 0:
        bank = _make_bank(cfg, pm, sched, base, train_pts, start, manifest)

    t_loop = time.perf_counter()
    stopped = False
    window = []
    done = start
    for it in range(start, cfg.iterations):
        if bank is not None and cfg.bank_refresh and it > start and it % cfg.bank_refresh == 0:
            bank = _make_bank(cfg, pm, sched, base, train_pts, it, manifest)
        if bank is not None:
            t, x_t, u_t = bank.draw(rng, cfg.batch_size)
            x0 = x1 = path = None
            loss, grad = regression_loss(vf, live, x_t, u_t, t)
        else:
            x1 = _take(train_pts, rng.integers(0, len(train_pts), cfg.batch_size))
            t = rng.uniform(0.0, 1.0 - sched.eps, cfg.batch_size)
            path, x0, _ = build_batch(pm, sched, base, x1, t, rng, cfg.flow_steps)
            loss, grad = regression_loss(vf, live, path.x_t, path.u_t, t)
        g = grad.data
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            dump = _dump_batch(out, it, x0, x1, t, path)
            manifest.add(event="nan", iteration=it, loss=loss, dump=dump)
            manifest.flush()
            raise NaNLossError(f"non-finite loss or gradient at iteration {it} (batch dump: {dump})")
        g, _, clipped = clip_by_norm(g, cfg.grad_clip)
        clip_events += int(clipped)
        new, adam = adam_step(live.data, g, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        live = live.like(new)
        ema = ema_update(ema, live, cfg.ema_decay)
        losses.append(loss)
        window.append(loss)
        done = it + 1
        if done % cfg.log_every == 0:
            manifest.add(event="loss", iteration=done, loss=float(np.mean(window)), clip_events=clip_events)
            window = []
        if cfg.eval_every and done % cfg.eval_every == 0:
            te = time.perf_counter()
            params = ema if cfg.use_ema else live
            val = _validation_nll(vf, params, base, val_eval, cfg)
            manifest.time("validation", time.perf_counter() - te)
            val_trace.append((done, val))
            manifest.add(event="val", iteration=done, nll=val)
            if val < best_val:
                best_val, best_iter, stale = val, done, 0
                best = params.copy()
                manifest.add(event="best", iteration=done, nll=val, path="best.rfmc" if out else None)
                if out:
                    _make_checkpoint(cfg, vf, live, ema, adam, done, rng, best, best_val, best_iter,
                                     clip_events, stale, losses, val_trace).save(out / "best.rfmc")  # fmt: skip
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    manifest.add(event="early_stop", iteration=done, best_iteration=best_iter)
                    stopped = True
                    break
    it = done
    manifest.time("train", time.perf_counter() - t_loop)

    if not val_trace or best_val == math.inf:
        # no validation yet: the current EMA (or live) weights are the best we have
        best = (ema if cfg.use_ema else live).copy()
    ckpt = _make_checkpoint(cfg, vf, live, ema, adam, it, rng, best, best_val, best_iter, clip_events, stale, losses, val_trace)
    manifest.add(
        event="end",
        iteration=it,
        best_iteration=best_iter,
        best_val=None if best_val == math.inf else best_val,
        clip_events=clip_events,
        eval_weights="ema" if cfg.use_ema else "live",
        checkpoint="checkpoint.rfmc" if out else None,
    )
    if out:
        ckpt.save(out / "checkpoint.rfmc")
    manifest.flush()
    return TrainResult(
        cfg, vf, live, ema, best, best_val, best_iter, it, losses, val_trace, clip_events, stopped,
        manifest.records, ckpt, manifest.timings,
    )  # fmt: skip


def _make_bank(cfg, pm, sched, base, train_pts, it, manifest):
    tb = time.perf_counter()
    rng = make_rng(cfg.seed, STREAM_BANK * 1_000_003 + it)
    bank = PathBank(pm, sched, base, train_pts, cfg.bank_size, cfg.bank_snapshots, cfg.flow_steps, rng)
    manifest.add(event="bank", iteration=it, size=bank.size)
    manifest.time("bank", time.perf_counter() - tb)
    return bank


def _make_checkpoint(cfg, vf, live, ema, adam, it, rng, best, best_val, best_iter, clip_events, stale, losses, val_trace):
    return Checkpoint(
        config=cfg.as_dict(),
        space_tag=vf.adapter.tag,
        live=live,
        ema=ema,
        adam_m=adam.m,
        adam_v=adam.v,
        iteration=it,
        adam_step=adam.step,
        rng_state=rng_state(rng),
        extra={
            "best_val": best_val if best_val != math.inf else None,
            "best_iter": best_iter,
            "clip_events": clip_events,
            "stale": stale,
            "losses": [float(x) for x in losses],
            "val_trace": [list(v) for v in val_trace],
            "best_params": best.data.tolist(),
        },
    )


_RESUME_FREE = {"iterations", "patience"}


def _check_resume(cfg: TrainConfig, ckpt: Checkpoint):
    mine = cfg.as_dict()
    theirs = dict(ckpt.config)
    diff = sorted(k for k in mine if k not in _RESUME_FREE and mine[k] != theirs.get(k))
    if diff:
        raise CheckpointMismatch(f"checkpoint was written with a different config ({', '.join(diff)})")
    if ckpt.extra.get("best_val") is None:
        ckpt.extra["best_val"] = math.inf
