"""Differentiable non-convex optimization by Gaussian adaptive stochastic search.

The optimizer maintains a diagonal Gaussian search distribution per batch row
and iterates: sample M candidates, score them, map scores through a shape
function into normalized weights, then move the mean toward the weighted
sample average and refit the per-dimension standard deviation as a weighted
empirical spread (with an additive variance floor that prevents collapse).

Two graph modes are supported:

* ``detached`` - the first N-1 iterations run without gradient recording and
  only the final iteration is on the tape.  Outer gradients reach the
  objective's parameters and context solely through the final iteration's
  weight computation; the sampled perturbations are recorded as constants.
  The tape cost is therefore independent of N.
* ``unrolled`` - every iteration is recorded, so the tape grows linearly
  with N.  Both modes produce bit-identical outputs for the same seed.

A cross-entropy-method step (equally weighted top-k refit; never recorded)
and an unrolled gradient-descent loop are provided as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "NovasConfig",
    "GaussianSearchState",
    "shape_weights",
    "novas_step",
    "novas_optimize",
    "cem_step",
    "cem_optimize",
    "unrolled_gd",
]


@dataclass
class NovasConfig:
    """Hyper-parameters of the search layer.

    ``shape`` selects how scores become weights: ``exp`` applies a softmax at
    temperature ``kappa`` (normalization fused in); ``sigmoid`` applies
    (y - y_min) / (1 + exp(-kappa (y - gamma))) with gamma the n_elite-th
    largest score, a smooth stand-in for a top-k indicator.
    """

    samples: int = 100
    iters: int = 10
    lr: float = 1.0
    shape: str = "exp"  # "exp" | "sigmoid"
    kappa: float = 1.0
    elite_frac: float = 0.1
    epsilon: float = 1e-3
    normalize: bool = True
    mode: str = "detached"  # "detached" | "unrolled"
    maximize: bool = False
    sigma_post_update: bool = True  # refit sigma around the updated mean

    def validate(self) -> "NovasConfig":
        if self.samples < 2:
            raise ValueError(f"samples must be >= 2, got {self.samples}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if not 0.0 < self.lr <= 1.0:
            raise ValueError(f"lr must lie in (0, 1], got {self.lr}")
        if self.shape not in ("exp", "sigmoid"):
            raise ValueError(f"unknown shape function '{self.shape}'")
        if self.mode not in ("detached", "unrolled"):
            raise ValueError(f"unknown graph mode '{self.mode}'")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ValueError(f"elite_frac must lie in (0, 1], got {self.elite_frac}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        return self

    def with_(self, **kw) -> "NovasConfig":
        return replace(self, **kw)

    @property
    def n_elite(self) -> int:
        return math.ceil(self.elite_frac * self.samples)


@dataclass
class GaussianSearchState:
    """Per-batch-row sampling mean and standard deviation, [batch, dim] each."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise T.ShapeError(
                f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}"
            )

    @staticmethod
    def initial(mu0: np.ndarray, sigma0, batch: int, dim: int) -> "GaussianSearchState":
        """Constant starting state; scalars are broadcast to [batch, dim]."""
        mu = np.broadcast_to(np.asarray(mu0, dtype=np.float64), (batch, dim)).copy()
        sig = np.broadcast_to(np.asarray(sigma0, dtype=np.float64), (batch, dim)).copy()
        if np.any(sig <= 0):
            raise ValueError("sigma0 must be strictly positive")
        return GaussianSearchState(Tensor(mu), Tensor(sig))


def shape_weights(values: Tensor, cfg: NovasConfig) -> Tensor:
    """Map per-sample scores [batch, M] to simplex weights [batch, M].

    Scores must already be oriented so that larger is better.  With
    ``cfg.normalize`` each row is min-max rescaled to [0, 1] first, which
    makes the weights invariant to positive affine maps of the objective.
    Rows whose scores are all equal get uniform weights.
    """
    if values.ndim != 2:
        raise T.ShapeError(f"shape_weights expects [batch, M] values, got {values.shape}")
    if np.isnan(values.data).any():
        raise ValueError("shape_weights: objective values contain NaN")
    batch, m = values.shape
    lo = T.amin(values, axis=1).reshape((batch, 1))
    hi = T.amax(values, axis=1).reshape((batch, 1))
    span = hi - lo
    flat_rows = span.data <= 0.0
    y = values
    if cfg.normalize:
        # Guarded denominator; degenerate rows are overridden to uniform below.
        safe = span + Tensor(flat_rows.astype(np.float64))
        y = (values - lo) / safe

    if cfg.shape == "exp":
        w = T.softmax(y * cfg.kappa, axis=1)
    else:
        n_elite = cfg.n_elite
        if n_elite > m:
            raise ValueError(f"n_elite {n_elite} exceeds sample count {m}")
        order = np.argsort(y.data, axis=1)
        gamma = T.take_along(y, order[:, m - n_elite : m - n_elite + 1], axis=1)
        y_min = T.amin(y, axis=1).reshape((batch, 1))
        s = (y - y_min) * T.sigmoid((y - gamma) * cfg.kappa)
        total = s.sum(axis=1).reshape((batch, 1))
        zero_rows = total.data <= 0.0
        w = s / (total + Tensor(zero_rows.astype(np.float64)))
        flat_rows = flat_rows | zero_rows

    if flat_rows.any():
        mask = Tensor(flat_rows.astype(np.float64))
        w = w * (1.0 - mask) + mask * (1.0 / m)
    return w


def _draw(state: GaussianSearchState, m: int, rng) -> Tensor:
    batch, dim = state.mu.shape
    z = rng.standard_normal((batch, m, dim))
    return Tensor(z)


def _evaluate(obj, x: Tensor, batch: int, m: int) -> Tensor:
    values = obj(x)
    if not isinstance(values, Tensor) or values.shape != (batch, m):
        got = values.shape if isinstance(values, Tensor) else type(values)
        raise T.ShapeError(
            f"objective must return a [{batch}, {m}] tensor, got {got}"
        )
    if np.isnan(values.data).all():
        raise FloatingPointError("objective returned all-NaN values")
    return values


def novas_step(state: GaussianSearchState, obj, cfg: NovasConfig, rng) -> GaussianSearchState:
    """One sample/score/reweight/update iteration of the search distribution.

    Candidates are reparameterized as x = mu + sigma * z with z standard
    normal, so the update stays differentiable in mu and sigma; the mean
    moves by ``lr`` times the weighted perturbation average and sigma is
    refit as sqrt(weighted squared deviation + epsilon).
    """
    batch, dim = state.mu.shape
    m = cfg.samples
    mu_e = state.mu.reshape((batch, 1, dim))
    sigma_e = state.sigma.reshape((batch, 1, dim))
    z = _draw(state, m, rng)
    x = mu_e + sigma_e * z
    values = _evaluate(obj, x, batch, m)
    scores = values if cfg.maximize else -values
    w = shape_weights(scores, cfg).reshape((batch, m, 1))
    mu_new = state.mu + cfg.lr * (w * (x - mu_e)).sum(axis=1)
    center = mu_new if cfg.sigma_post_update else state.mu
    dev = x - center.reshape((batch, 1, dim))
    sigma_new = T.sqrt((w * dev * dev).sum(axis=1) + cfg.epsilon)
    return GaussianSearchState(mu_new, sigma_new)


def novas_optimize(obj, init: GaussianSearchState, cfg: NovasConfig, rng) -> Tensor:
    """Run ``cfg.iters`` search iterations and return the final mean [batch, dim].

    In detached mode the first N-1 iterations run under no_grad and only the
    final one records onto the tape; in unrolled mode all N do.  The numeric
    result is identical either way for a given ``rng``.
    """
    cfg.validate()
    state = init
    if cfg.mode == "detached":
        if cfg.iters > 1:
            with T.no_grad():
                for _ in range(cfg.iters - 1):
                    state = novas_step(state, obj, cfg, rng)
        state = novas_step(state, obj, cfg, rng)
    else:
        for _ in range(cfg.iters):
            state = novas_step(state, obj, cfg, rng)
    return state.mu


def cem_step(state: GaussianSearchState, obj, cfg: NovasConfig, rng) -> GaussianSearchState:
    """Cross-entropy-method iteration: refit to the equally weighted top-k.

    The eliteness threshold is a hard selection, so this never records tape
    nodes; with k = M it reduces exactly to a uniform-weight search step at
    lr = 1.
    """
    batch, dim = state.mu.shape
    m = cfg.samples
    k = cfg.n_elite
    if k > m:
        raise ValueError(f"elite count {k} exceeds sample count {m}")
    with T.no_grad():
        mu_e = state.mu.reshape((batch, 1, dim))
        sigma_e = state.sigma.reshape((batch, 1, dim))
        z = _draw(state, m, rng)
        x = mu_e + sigma_e * z
        values = _evaluate(obj, x, batch, m)
        scores = values.data if cfg.maximize else -values.data
        if np.isnan(scores).any():
            raise ValueError("cem_step: objective values contain NaN")
        order = np.argsort(scores, axis=1)
        elite_idx = order[:, m - k :]
        w = np.zeros((batch, m))
        np.put_along_axis(w, elite_idx, 1.0 / k, axis=1)
        w = w[:, :, None]
        xd = x.data
        mu_new = state.mu.data + ((xd - mu_e.data) * w).sum(axis=1)
        center = mu_new if cfg.sigma_post_update else state.mu.data
        dev = xd - center[:, None, :]
        sigma_new = np.sqrt((w * dev * dev).sum(axis=1) + cfg.epsilon)
    return GaussianSearchState(Tensor(mu_new), Tensor(sigma_new))


def cem_optimize(obj, init: GaussianSearchState, cfg: NovasConfig, rng) -> Tensor:
    cfg.validate()
    state = init
    for _ in range(cfg.iters):
        state = cem_step(state, obj, cfg, rng)
    return state.mu


def unrolled_gd(obj, y0: Tensor, steps: int, lr: float, rng=None) -> Tensor:
    """Plain gradient descent on the inner variable, every step on the tape.

    ``obj`` must expose ``gradient(y)`` returning d(obj)/dy as an on-graph
    tensor of y's shape; outer backward then differentiates through all
    ``steps`` updates.
    """
    if not hasattr(obj, "gradient"):
        raise TypeError("unrolled_gd requires an objective with a gradient(y) method")
    y = y0
    for _ in range(steps):
        g = obj.gradient(y)
        if not np.isfinite(g.data).all():
            raise FloatingPointError("unrolled_gd: inner gradient is not finite")
        y = y - lr * g
    return y
