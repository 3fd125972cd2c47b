"""Neural-network building blocks on the tensor tape.

Affine layers, an MLP with hand-rolled input gradients (needed so that
gradient-descent inner loops stay differentiable end to end), an LSTM cell,
the Adam optimizer with a piecewise-constant learning-rate schedule, and the
squared / Huber losses.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor


def _act(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation '{name}'") from None


_ACTIVATIONS = {
    "identity": lambda t: t,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
}

# Derivatives expressed through on-graph ops of the pre-activation, so an
# explicit input-gradient remains differentiable w.r.t. the weights.
_ACT_DERIVS = {
    "identity": None,
    "tanh": lambda z: 1.0 - T.square(T.tanh(z)),
    "sigmoid": lambda z: T.sigmoid(z) * (1.0 - T.sigmoid(z)),
    "softplus": T.sigmoid,
}


class Linear:
    """Affine map y = x W^T + b with uniform +-sqrt(1/fan_in) init."""

    def __init__(self, in_dim: int, out_dim: int, rng: RngStream, name: str = "linear"):
        bound = math.sqrt(1.0 / in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)), grad_enabled=True)
        self.bias = Tensor(rng.uniform(-bound, bound, (out_dim,)), grad_enabled=True)
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError(
                f"{self.name}: input dim {x.shape[-1]} does not match weight fan-in {self.in_dim}"
            )
        flat = x.reshape((-1, self.in_dim)) if x.ndim != 2 else x
        out = T.matmul(flat, self.weight.transpose()) + self.bias
        if x.ndim != 2:
            out = out.reshape(lead + (self.out_dim,))
        return out

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class MLP:
    """Stack of affine layers with per-layer activations."""

    def __init__(self, dims: Sequence[int], activations: Sequence[str], rng: RngStream, name: str = "mlp"):
        if len(activations) != len(dims) - 1:
            raise ValueError(
                f"activation list length {len(activations)} != layer count {len(dims) - 1}"
            )
        self.layers = [
            Linear(dims[i], dims[i + 1], rng.child(i), name=f"{name}.{i}")
            for i in range(len(dims) - 1)
        ]
        self.activations = list(activations)
        for a in self.activations:
            _act(a)

    def __call__(self, x: Tensor) -> Tensor:
        for layer, act in zip(self.layers, self.activations):
            x = _act(act)(layer(x))
        return x

    def value_and_input_grad(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Forward pass plus d(output)/d(input), both on the tape.

        Requires a scalar output head (last width 1).  The returned gradient
        has the shape of ``x`` and, being built from primitive ops, can itself
        be differentiated w.r.t. the layer weights.
        """
        if self.layers[-1].out_dim != 1:
            raise T.ShapeError("value_and_input_grad requires a scalar output head")
        lead = x.shape[:-1]
        h = x.reshape((-1, self.layers[0].in_dim)) if x.ndim != 2 else x
        pre = []
        for layer, act in zip(self.layers, self.activations):
            z = T.matmul(h, layer.weight.transpose()) + layer.bias
            pre.append(z)
            h = _act(act)(z)
        value = h
        rows = value.shape[0]
        g = Tensor(np.ones((rows, 1)))
        for layer, act, z in zip(reversed(self.layers), reversed(self.activations), reversed(pre)):
            deriv = _ACT_DERIVS[act]
            if deriv is not None:
                g = g * deriv(z)
            g = T.matmul(g, layer.weight)
        if x.ndim != 2:
            value = value.reshape(lead + (1,))
            g = g.reshape(x.shape)
        return value, g

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


def mlp_forward(layers: Sequence[Linear], activations: Sequence[str], x: Tensor) -> Tensor:
    """Functional MLP application over pre-built layers."""
    if len(layers) != len(activations):
        raise ValueError(f"{len(layers)} layers but {len(activations)} activations")
    for layer, act in zip(layers, activations):
        x = _act(act)(layer(x))
    return x


class LSTMCell:
    """Single LSTM layer: sigmoid input/forget/output gates, tanh candidate.

    Gate weights act on the concatenated [input, hidden] vector.  The forget
    gate bias starts at +1.  Hidden/cell states live on the cell and must be
    reset at the start of every rollout.
    """

    GATES = ("i", "f", "g", "o")

    def __init__(self, input_dim: int, hidden_dim: int, rng: RngStream, name: str = "lstm"):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.name = name
        bound = math.sqrt(1.0 / (input_dim + hidden_dim))
        self.w = {}
        self.b = {}
        for gi, gate in enumerate(self.GATES):
            self.w[gate] = Tensor(
                rng.child(gi).uniform(-bound, bound, (hidden_dim, input_dim + hidden_dim)),
                grad_enabled=True,
            )
            bias = rng.child(gi + 8).uniform(-bound, bound, (hidden_dim,))
            if gate == "f":
                bias = bias + 1.0
            self.b[gate] = Tensor(bias, grad_enabled=True)
        self.h: Tensor | None = None
        self.c: Tensor | None = None

    def reset(self, batch: int) -> None:
        self.h = Tensor(np.zeros((batch, self.hidden_dim)))
        self.c = Tensor(np.zeros((batch, self.hidden_dim)))

    def step(self, x: Tensor) -> Tensor:
        if self.h is None or self.c is None:
            raise RuntimeError(f"{self.name}: step() before reset(); states are uninitialized")
        if x.shape[-1] != self.input_dim:
            raise T.ShapeError(
                f"{self.name}: input dim {x.shape[-1]} != expected {self.input_dim}"
            )
        z = T.concat([x, self.h], axis=1)
        i = T.sigmoid(T.matmul(z, self.w["i"].transpose()) + self.b["i"])
        f = T.sigmoid(T.matmul(z, self.w["f"].transpose()) + self.b["f"])
        g = T.tanh(T.matmul(z, self.w["g"].transpose()) + self.b["g"])
        o = T.sigmoid(T.matmul(z, self.w["o"].transpose()) + self.b["o"])
        self.c = f * self.c + i * g
        self.h = o * T.tanh(self.c)
        return self.h

    def parameters(self):
        out = []
        for gate in self.GATES:
            out.append((f"{self.name}.w_{gate}", self.w[gate]))
            out.append((f"{self.name}.b_{gate}", self.b[gate]))
        return out


class LrSchedule:
    """Piecewise-constant decay: lr(step) = initial * factor^(#milestones passed)."""

    def __init__(self, initial: float, decay_steps: Sequence[int] = (), factor: float = 0.1):
        self.initial = float(initial)
        self.decay_steps = sorted(int(s) for s in decay_steps)
        self.factor = float(factor)

    def value(self, step: int) -> float:
        lr = self.initial
        for milestone in self.decay_steps:
            if step > milestone:
                lr *= self.factor
        return lr


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float = 1e-3,
        schedule: LrSchedule | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        seen = set()
        for name, p in params:
            if id(p) in seen:
                raise ValueError(f"parameter '{name}' registered twice with the optimizer")
            seen.add(id(p))
        self.params = list(params)
        self.schedule = schedule if schedule is not None else LrSchedule(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule.value(self.step_count)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        lr = self.schedule.value(self.step_count)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient for parameter '{name}'")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i, (name, _) in enumerate(self.params):
            self.m[i][...] = arrays[f"adam.m.{name}"]
            self.v[i][...] = arrays[f"adam.v.{name}"]
        self.step_count = int(step_count)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    return T.square(pred - target).mean()


def huber(a: Tensor, delta: float) -> Tensor:
    """Elementwise Huber-style penalty, averaged over all entries.

    a^2 where |a| < delta, otherwise delta*(2|a| - delta); the two branches
    meet at delta^2.
    """
    if delta <= 0:
        raise ValueError(f"huber delta must be positive, got {delta}")
    mag = T.absolute(a)
    clipped = T.minimum(mag, delta)
    elem = T.square(clipped) + 2.0 * delta * (mag - clipped)
    return elem.mean()
