"""Fully connected tanh networks with hand-written derivatives.

The network maps a raw input vector to a raw output vector through

    u = (x - in_shift) / in_scale
    h = tanh(u W0^T + b0) ... tanh(. W_{L-2}^T + b_{L-2})
    y = out_shift + out_scale * (h W_{L-1}^T + b_{L-1})

Input derivatives are propagated forward as dual numbers (a value channel
and a tangent channel per layer).  Weight gradients are accumulated in
reverse through both channels, so a loss may depend on the output and on
its derivative along one input direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATION = "tanh"


class NonFiniteLossError(FloatingPointError):
    """Raised when a training loss or its output gradient is not finite."""

    def __init__(self, index: int, message: str = "non-finite loss"):
        super().__init__(f"{message} (batch index {index})")
        self.index = index


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Weights and biases interleaved: [W0, b0, W1, b1, ...]."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights = [np.asarray(p, dtype=float) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=float) for p in params[1::2]]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.in_shift.copy(),
            self.in_scale.copy(),
            self.out_shift.copy(),
            self.out_scale.copy(),
        )

    def __call__(self, x):
        return forward(self, x)


def init(layer_sizes, seed, in_shift=None, in_scale=None, out_shift=None, out_scale=None) -> Mlp:
    """Glorot-uniform weights, zero biases, reproducible for a given seed."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if min(sizes) < 1:
        raise ValueError("layer sizes must be >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))

    def _vec(v, n, default):
        return np.full(n, default, dtype=float) if v is None else np.array(v, dtype=float).reshape(n)

    return Mlp(
        sizes,
        weights,
        biases,
        _vec(in_shift, sizes[0], 0.0),
        _vec(in_scale, sizes[0], 1.0),
        _vec(out_shift, sizes[-1], 0.0),
        _vec(out_scale, sizes[-1], 1.0),
    )


def _as_batch(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"expected input of length {net.n_in}, got shape {x.shape}")
    return X, single


def forward(net: Mlp, x) -> np.ndarray:
    X, single = _as_batch(net, x)
    h = (X - net.in_shift) / net.in_scale
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.tanh(h @ W.T + b)
    y = net.out_shift + net.out_scale * (h @ net.weights[-1].T + net.biases[-1])
    return y[0] if single else y


def grad_input(net: Mlp, x) -> np.ndarray:
    """Jacobian of the output with respect to the raw input.

    Every input direction is carried as a tangent channel at once, so the
    result is exact up to rounding.  Returns shape (n_out, n_in) for a
    single input and (B, n_out, n_in) for a batch.
    """
    X, single = _as_batch(net, x)
    h = (X - net.in_shift) / net.in_scale
    # tangent block T[b, j, :] = d h[b, :] / d x_j
    T = np.broadcast_to(np.diag(1.0 / net.in_scale), (X.shape[0], net.n_in, net.n_in))
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.tanh(h @ W.T + b)
        T = (T @ W.T) * (1.0 - h * h)[:, None, :]
    J = (T @ net.weights[-1].T) * net.out_scale
    J = np.swapaxes(J, 1, 2)
    return J[0] if single else J


@dataclass
class Trace:
    """Activations kept by :func:`forward_trace` for the reverse pass."""

    hs: list[np.ndarray]
    dhs: list[np.ndarray] | None
    das: list[np.ndarray] | None
    y: np.ndarray
    dy: np.ndarray | None


def forward_trace(net: Mlp, X, direction=None) -> Trace:
    """Batch forward pass that remembers what the reverse pass needs.

    With ``direction`` set (a raw-input vector), the tangent of the output
    along that direction is returned in ``trace.dy``.
    """
    X, _ = _as_batch(net, X)
    h = (X - net.in_shift) / net.in_scale
    hs = [h]
    dhs = das = None
    dh = None
    if direction is not None:
        d = np.asarray(direction, dtype=float) / net.in_scale
        dh = np.broadcast_to(d, h.shape)
        dhs, das = [dh], [None]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.tanh(h @ W.T + b)
        hs.append(h)
        if dh is not None:
            da = dh @ W.T
            dh = da * (1.0 - h * h)
            das.append(da)
            dhs.append(dh)
    W, b = net.weights[-1], net.biases[-1]
    y = net.out_shift + net.out_scale * (h @ W.T + b)
    dy = None if dh is None else net.out_scale * (dh @ W.T)
    return Trace(hs, dhs, das, y, dy)


def backward(net: Mlp, trace: Trace, gy, gdy=None) -> list[np.ndarray]:
    """Reverse accumulation of d(loss)/d(params) from output cotangents.

    ``gy`` is dL/dy and ``gdy`` is dL/d(dy) for the tangent channel, both of
    shape (B, n_out).  Gradients are returned in :meth:`Mlp.params` order.
    """
    L = len(net.weights)
    tangent = gdy is not None and trace.dhs is not None
    g = np.asarray(gy, dtype=float) * net.out_scale
    gd = np.asarray(gdy, dtype=float) * net.out_scale if tangent else None
    grads: list[np.ndarray] = [None] * (2 * L)
    for k in range(L - 1, -1, -1):
        W = net.weights[k]
        h_in = trace.hs[k]
        gW = g.T @ h_in
        if tangent:
            gW = gW + gd.T @ trace.dhs[k]
        grads[2 * k] = gW
        grads[2 * k + 1] = g.sum(axis=0)
        if k == 0:
            break
        gh = g @ W
        # h_in = tanh(a), dh_in = s * da with s = 1 - h_in^2
        s = 1.0 - h_in * h_in
        if tangent:
            gdh = gd @ W
            da = trace.das[k]
            g = gh * s - 2.0 * gdh * da * h_in * s
            gd = gdh * s
        else:
            g = gh * s
    return grads


def _first_bad_row(*arrays) -> int:
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        if a is not None:
            bad |= ~np.isfinite(a).reshape(a.shape[0], -1).all(axis=1)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else -1


def grad_weights(net: Mlp, X, loss, direction=None):
    """Loss value and weight gradients for one batch.

    ``loss`` receives ``(y, dy)`` (``dy`` is None without a direction) and
    returns ``(value, dL/dy, dL/ddy)``.
    """
    trace = forward_trace(net, X, direction)
    value, gy, gdy = loss(trace.y, trace.dy)
    if not np.isfinite(value):
        raise NonFiniteLossError(max(_first_bad_row(trace.y, trace.dy, gy, gdy), 0))
    bad = _first_bad_row(gy, gdy)
    if bad >= 0:
        raise NonFiniteLossError(bad, "non-finite loss gradient")
    return float(value), backward(net, trace, gy, gdy)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def like(cls, params, **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam update.  Mutates ``state`` and returns new params."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(p) != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}: {np.shape(p)} vs {np.shape(g)}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        new.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return new


# -- checkpoint text format -------------------------------------------------


def _fmt(obj) -> str:
    """JSON text with every float written at 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    x = float(obj)
    if not np.isfinite(x):
        return json.dumps(x)
    return format(x, ".17g")


def dumps_json17(obj) -> str:
    return _fmt(obj) + "\n"


def net_to_dict(net: Mlp) -> dict:
    return {
        "layer_sizes": list(net.layer_sizes),
        "activation": ACTIVATION,
        "in_shift": net.in_shift,
        "in_scale": net.in_scale,
        "out_shift": net.out_shift,
        "out_scale": net.out_scale,
        # row-major: W[k] is (fan_out, fan_in)
        "weights": [W for W in net.weights],
        "biases": [b for b in net.biases],
    }


def net_from_dict(d: dict) -> Mlp:
    if d.get("activation", ACTIVATION) != ACTIVATION:
        raise ValueError(f"unsupported activation {d['activation']!r}")
    sizes = [int(s) for s in d["layer_sizes"]]
    weights = [np.array(W, dtype=float).reshape(o, i) for W, i, o in zip(d["weights"], sizes[:-1], sizes[1:])]
    biases = [np.array(b, dtype=float).reshape(o) for b, o in zip(d["biases"], sizes[1:])]
    return Mlp(
        sizes,
        weights,
        biases,
        np.array(d["in_shift"], dtype=float),
        np.array(d["in_scale"], dtype=float),
        np.array(d["out_shift"], dtype=float),
        np.array(d["out_scale"], dtype=float),
    )


def save(net: Mlp, path) -> None:
    Path(path).write_text(dumps_json17(net_to_dict(net)))


def load(path) -> Mlp:
    return net_from_dict(json.loads(Path(path).read_text()))
