"""Small dense networks with exact reverse-mode gradients.

A network is a :class:`NetSpec` (layer widths and activations) plus a flat
parameter vector. Layer ``i`` computes ``act(X @ W_i + b_i)`` with ``W_i`` of
shape ``(n_in, n_out)``. ``forward`` records a tape; ``backward`` consumes it
and returns vector-Jacobian products for the parameters and the input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")
PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetSpec:
    widths: tuple
    activations: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2:
            raise ConfigError("a network needs an input and an output width")
        if any(w < 1 for w in widths):
            raise ConfigError("layer widths must be positive")
        if len(acts) != len(widths) - 1:
            raise ConfigError("need one activation per layer")
        for i, act in enumerate(acts):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
            if act == "softmax" and i != len(acts) - 1:
                raise ConfigError("softmax is only allowed on the output layer")

    @classmethod
    def mlp(cls, n_in, hidden, n_out, hidden_act="relu", out_act="identity"):
        hidden = tuple(hidden)
        widths = (n_in, *hidden, n_out)
        return cls(widths, (hidden_act,) * len(hidden) + (out_act,))

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    @property
    def n_layers(self):
        return len(self.activations)

    def layout(self):
        """``(offset_W, shape_W, offset_b, size_b)`` for every layer."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            out.append((pos, (fan_in, fan_out), pos + fan_in * fan_out, fan_out))
            pos += fan_in * fan_out + fan_out
        return out

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), tuple(d["activations"]))


@dataclass
class ParamStore:
    """Flat parameter vector with a paired gradient accumulator."""

    spec: NetSpec
    values: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.values.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @classmethod
    def init(cls, spec, rng):
        values = np.zeros(spec.n_params)
        for off_w, (fan_in, fan_out), _, _ in spec.layout():
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values[off_w : off_w + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
        return cls(spec, values)

    def layer(self, i):
        off_w, shape, off_b, size_b = self.spec.layout()[i]
        W = self.values[off_w : off_w + shape[0] * shape[1]].reshape(shape)
        b = self.values[off_b : off_b + size_b]
        return W, b

    def copy(self):
        return ParamStore(self.spec, self.values.copy(), self.grad.copy())

    def zero_grad(self):
        self.grad[:] = 0.0


@dataclass
class Tape:
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def _activate(act, a):
    if act == "relu":
        return np.maximum(a, 0.0)
    if act == "tanh":
        return np.tanh(a)
    if act == "softmax":
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return a


def _activate_vjp(act, out, g):
    if act == "relu":
        return g * (out > 0)
    if act == "tanh":
        return g * (1.0 - out * out)
    if act == "softmax":
        return out * (g - np.sum(out * g, axis=1, keepdims=True))
    return g


def forward(params, X):
    """Forward pass; returns ``(output, tape)``."""
    spec = params.spec
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise ValueError(f"input width {X.shape[-1] if X.ndim else None} != {spec.n_in}")
    tape = Tape()
    h = X
    for i, act in enumerate(spec.activations):
        W, b = params.layer(i)
        tape.inputs.append(h)
        h = _activate(act, h @ W + b)
        tape.outputs.append(h)
    return h, tape


def backward(params, tape, cotangents):
    """Vector-Jacobian product of a recorded forward pass.

    Returns ``(grad_params, grad_input)``; ``grad_params`` is a flat vector
    laid out like ``params.values``.
    """
    spec = params.spec
    g = np.asarray(cotangents, dtype=np.float64)
    if len(tape.outputs) != spec.n_layers:
        raise ValueError("tape does not match network")
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {tape.outputs[-1].shape}")
    grad = np.zeros_like(params.values)
    layout = spec.layout()
    for i in range(spec.n_layers - 1, -1, -1):
        off_w, shape, off_b, size_b = layout[i]
        W, _ = params.layer(i)
        g = _activate_vjp(spec.activations[i], tape.outputs[i], g)
        grad[off_w : off_w + shape[0] * shape[1]] = (tape.inputs[i].T @ g).ravel()
        grad[off_b : off_b + size_b] = g.sum(axis=0)
        g = g @ W.T
    return grad, g


def class_weights(counts):
    """Inverse class-proportion weights normalised to sum to one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise DataError("every class needs at least one example")
    raw = counts.sum() / counts
    return raw / raw.sum()


def _check_ce_inputs(probs, y, w):
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != y.shape[0]:
        raise ValueError("probs must be N x C matching labels")
    if w.shape != (probs.shape[1],):
        raise ValueError("one weight per class required")
    picked = probs[np.arange(y.size), y]
    if np.any(picked < 0):
        raise NumericalError("negative probability at the true label")
    return probs, y, w, picked


def weighted_ce(probs, y, w):
    """``(1/N) sum_i C w_{y_i} (-log p_i[y_i])``.

    Scaling by the class count ``C`` makes a class-balanced batch reproduce
    the unweighted cross entropy.
    """
    probs, y, w, picked = _check_ce_inputs(probs, y, w)
    C = probs.shape[1]
    return float(np.mean(C * w[y] * -np.log(np.maximum(picked, PROB_FLOOR))))


def weighted_ce_grad(probs, y, w):
    """Gradient of :func:`weighted_ce` with respect to ``probs``."""
    probs, y, w, picked = _check_ce_inputs(probs, y, w)
    N, C = probs.shape
    g = np.zeros_like(probs)
    safe = np.maximum(picked, PROB_FLOOR)
    g[np.arange(N), y] = np.where(picked > PROB_FLOOR, -C * w[y] / (N * safe), 0.0)
    return g


@dataclass
class OptimState:
    """AdamW state with an inverse-square-root epoch schedule."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    @classmethod
    def like(cls, params, **kw):
        n = params.values.size
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)

    def rate(self, epoch):
        return self.lr / math.sqrt(epoch)


def optim_step(params, grads, state, epoch):
    """One decoupled-weight-decay Adam update at rate ``lr / sqrt(epoch)``."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    lr = state.rate(epoch)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.values *= 1.0 - lr * state.weight_decay
    params.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def save_checkpoint(path, models, states=None, meta=None):
    """Write named parameter stores (and optimiser states) to an ``.npz`` file."""
    states = states or {}
    header = {
        "version": CHECKPOINT_VERSION,
        "models": {name: p.spec.to_dict() for name, p in models.items()},
        "states": {
            name: {k: getattr(s, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")}
            for name, s in states.items()
        },
        "meta": meta or {},
    }
    arrays = {"header": np.array(json.dumps(header))}
    for name, p in models.items():
        arrays[f"param__{name}"] = p.values
    for name, s in states.items():
        arrays[f"m__{name}"] = s.m
        arrays[f"v__{name}"] = s.v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(models, states, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('version')}")
        models = {
            name: ParamStore(NetSpec.from_dict(spec), data[f"param__{name}"].copy())
            for name, spec in header["models"].items()
        }
        states = {}
        for name, fields in header["states"].items():
            states[name] = OptimState(
                m=data[f"m__{name}"].copy(), v=data[f"v__{name}"].copy(), **fields
            )
    return models, states, header["meta"]
