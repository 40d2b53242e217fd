"""Small numpy MLP with hand-written reverse-mode and forward-mode derivatives.

Hidden layers use Swish ``z * sigmoid(beta * z)`` with one learnable ``beta``
per layer.  All parameters live in one flat vector (``ParameterSet``) so the
optimiser, EMA and checkpoints work on a single array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericError


class ParameterSet:
    """Flat float64 vector plus an ordered index of named segments."""

    def __init__(self, segments, data=None):
        # segments: list of (name, shape)
        self.segments = []
        offset = 0
        for name, shape in segments:
            size = int(np.prod(shape)) if len(shape) else 1
            self.segments.append((name, tuple(shape), offset, offset + size))
            offset += size
        self.size = offset
        if data is None:
            data = np.zeros(offset)
        data = np.asarray(data, dtype=float)
        if data.shape != (offset,):
            raise ContractViolation(f"parameter vector has {data.size} entries, index expects {offset}")
        self.data = data

    @property
    def names(self):
        return [s[0] for s in self.segments]

    def _segment(self, name):
        for seg in self.segments:
            if seg[0] == name:
                return seg
        raise KeyError(name)

    def view(self, name):
        _, shape, a, b = self._segment(name)
        return self.data[a:b].reshape(shape)

    def slice_of(self, name):
        _, _, a, b = self._segment(name)
        return slice(a, b)

    def like(self, data=None) -> "ParameterSet":
        spec = [(n, s) for n, s, _, _ in self.segments]
        return ParameterSet(spec, np.zeros(self.size) if data is None else data)

    def copy(self) -> "ParameterSet":
        return self.like(self.data.copy())

    def same_layout(self, other) -> bool:
        return [(n, s) for n, s, _, _ in self.segments] == [(n, s) for n, s, _, _ in other.segments]

    def layout(self):
        return [[n, list(s)] for n, s, _, _ in self.segments]


def swish(z, beta):
    return z * expit(beta * z)


@dataclass
class _Cache:
    inputs: list  # input to each layer
    pre: list  # pre-activations of hidden layers
    sig: list  # sigmoid(beta * pre)


class MLP:
    """Fully connected net ``in_dim -> hidden... -> out_dim``.

    Parameters
    ----------
    in_dim, out_dim : int
    hidden : sequence of int, default (64, 64, 64)
    """

    def __init__(self, in_dim: int, out_dim: int, hidden=(64, 64, 64)):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.widths = (self.in_dim, *self.hidden, self.out_dim)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def layout(self):
        spec = []
        for i in range(self.n_layers):
            spec.append((f"W{i}", (self.widths[i + 1], self.widths[i])))
            spec.append((f"b{i}", (self.widths[i + 1],)))
            if i < self.n_layers - 1:
                spec.append((f"beta{i}", ()))
        return spec

    def init(self, rng, final_scale: float = 1e-2) -> ParameterSet:
        """Uniform fan-in initialisation; the last layer is shrunk so the initial field is near zero."""
        params = ParameterSet(self.layout())
        for i in range(self.n_layers):
            bound = 1.0 / np.sqrt(self.widths[i])
            scale = final_scale if i == self.n_layers - 1 else 1.0
            params.view(f"W{i}")[...] = scale * rng.uniform(-bound, bound, (self.widths[i + 1], self.widths[i]))
            params.view(f"b{i}")[...] = scale * rng.uniform(-bound, bound, self.widths[i + 1])
            if i < self.n_layers - 1:
                params.data[params.slice_of(f"beta{i}")] = 1.0
        return params

    def zeros(self) -> ParameterSet:
        params = ParameterSet(self.layout())
        for i in range(self.n_layers - 1):
            params.data[params.slice_of(f"beta{i}")] = 1.0
        return params

    # ------------------------------------------------------------ forward
    def forward(self, params: ParameterSet, z, return_cache=False):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.in_dim:
            raise ContractViolation(f"expected input width {self.in_dim}, got {z.shape[1]}")
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite network input")
        cache = _Cache([], [], [])
        h = z
        for i in range(self.n_layers):
            cache.inputs.append(h)
            a = h @ params.view(f"W{i}").T + params.view(f"b{i}")
            if i < self.n_layers - 1:
                beta = params.view(f"beta{i}")
                s = expit(beta * a)
                cache.pre.append(a)
                cache.sig.append(s)
                h = a * s
            else:
                h = a
        return (h, cache) if return_cache else h

    # ------------------------------------------------------------ reverse mode
    def backward(self, params: ParameterSet, cache: _Cache, grad_out, want_input=False):
        """Gradient of ``sum(grad_out * output)`` with respect to all parameters (and optionally the input)."""
        grad = params.like()
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                a, s = cache.pre[i], cache.sig[i]
                beta = params.view(f"beta{i}")
                ds = s * (1.0 - s)
                grad.data[grad.slice_of(f"beta{i}")] = np.sum(g * a * a * ds)
                g = g * (s + beta * a * ds)
            grad.view(f"W{i}")[...] = g.T @ cache.inputs[i]
            grad.view(f"b{i}")[...] = g.sum(axis=0)
            if i > 0 or want_input:
                g = g @ params.view(f"W{i}")
        return (grad, g) if want_input else grad

    # ------------------------------------------------------------ forward mode
    def input_jacobian(self, params: ParameterSet, z, cols=None):
        """Output value and Jacobian d(out)/d(z[:, cols]), shapes (B, out) and (B, out, len(cols))."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        cols = np.arange(self.in_dim) if cols is None else np.asarray(cols)
        h = z
        # tangents laid out (n_cols, B, width) so every layer is one BLAS matmul
        dh = np.zeros((len(cols), len(z), self.in_dim))
        dh[np.arange(len(cols)), :, cols] = 1.0
        for i in range(self.n_layers):
            w = params.view(f"W{i}")
            a = h @ w.T + params.view(f"b{i}")
            da = dh @ w.T
            if i < self.n_layers - 1:
                beta = params.view(f"beta{i}")
                s = expit(beta * a)
                deriv = s + beta * a * s * (1.0 - s)
                h = a * s
                dh = deriv * da
            else:
                h, dh = a, da
        return h, np.transpose(dh, (1, 2, 0))


def ema_update(ema: ParameterSet, live: ParameterSet, decay: float) -> ParameterSet:
    """ema <- decay * ema + (1 - decay) * live (in place, also returned)."""
    if not ema.same_layout(live):
        raise ContractViolation("EMA and live parameters have different layouts")
    if not 0.0 <= decay <= 1.0:
        raise ContractViolation("EMA decay must lie in [0, 1]")
    if decay == 1.0:
        return ema
    if decay == 0.0:
        ema.data[...] = live.data
        return ema
    ema.data *= decay
    ema.data += (1.0 - decay) * live.data
    return ema
