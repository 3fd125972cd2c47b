"""Deep forward-backward SDE solver for stochastic optimal control.

The value function's gradient is predicted by an LSTM at every time step;
the control is obtained by minimizing the Hamiltonian with the sampling
search layer; state and value are propagated forward with Euler-Maruyama
shooting (the same Brownian increment drives both), and training penalizes
the mismatch between the propagated terminal value and the terminal cost.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import LSTMCell, Linear, LrSchedule, Adam, huber
from .rng import RngStream, DOMAIN_TRAIN, DOMAIN_VAL
from .search import GaussianSearchState, NovasConfig, novas_optimize
from .tensor import Tensor

# rng child tags inside a rollout; keeping noise separate from the search
# draws lets different controllers face identical Brownian paths.
_NOISE = 0
_SEARCH = 1
_POLICY = 2
_INIT = 3


@dataclass
class SocProblem:
    """A controlled diffusion with running and terminal costs.

    All maps are pure, built from tensor ops, and must broadcast over leading
    batch/sample axes: ``drift(x, u) -> [..., n]``, ``diffusion(x, u) ->
    [..., n, v]``, ``running_cost(x, u) -> [...]``.  The terminal cost comes
    with its analytic gradient and one designated Hessian column.
    ``hamiltonian_trace`` supplies the control-dependent part of
    (1/2) tr(V_xx Sigma Sigma^T) when the diffusion depends on the control;
    leave it None when the trace term is constant in u.
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    horizon: float
    steps: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    terminal_grad: Callable
    terminal_hess_col: Callable
    initial_state: Callable  # (batch, RngStream) -> ndarray [batch, n]
    hamiltonian_trace: Optional[Callable] = None
    closed_form_control: Optional[Callable] = None
    control_sigma0: float = 1.0
    name: str = "soc"

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.dt <= 0:
            raise ValueError("time step must be positive")


class HamiltonianObjective:
    """Batched Hamiltonian H(x_k, u, V_x) as a search objective over u.

    Candidates arrive as [batch, M, m]; state and value-gradient context are
    broadcast along the sample axis.
    """

    def __init__(self, problem: SocProblem, x: Tensor, v_x: Tensor, hess_col: Tensor | None):
        batch, n = x.shape
        self.problem = problem
        self.x = x.reshape((batch, 1, n))
        self.v_x = v_x.reshape((batch, 1, n))
        self.hess_col = None if hess_col is None else hess_col.reshape((batch, 1, n))

    def __call__(self, u: Tensor) -> Tensor:
        return hamiltonian(self.problem, self.x, u, self.v_x, self.hess_col)


def hamiltonian(problem: SocProblem, x: Tensor, u: Tensor, v_x: Tensor, hess_col: Tensor | None = None) -> Tensor:
    """V_x . f(x, u) + l(x, u), plus the control-dependent trace part if any."""
    f = problem.drift(x, u)
    h = (v_x * f).sum(axis=-1) + problem.running_cost(x, u)
    if problem.hamiltonian_trace is not None:
        if hess_col is None:
            raise ValueError(
                f"{problem.name}: Hamiltonian trace term requires a predicted Hessian column"
            )
        h = h + problem.hamiltonian_trace(x, u, hess_col)
    return h


class FbsdeNetwork:
    """LSTM trunk predicting the value gradient (and optionally one Hessian
    column) along the trajectory, plus the trainable initial value."""

    def __init__(
        self,
        state_dim: int,
        rng: RngStream,
        hidden_dim: int = 16,
        num_layers: int = 2,
        predict_hessian_column: bool = False,
        trainable_vx0: bool = False,
        state_shift: Sequence[float] | None = None,
        state_scale: Sequence[float] | None = None,
    ):
        self.state_dim = state_dim
        self.cells = []
        in_dim = state_dim
        for i in range(num_layers):
            self.cells.append(LSTMCell(in_dim, hidden_dim, rng.child(i), name=f"lstm{i}"))
            in_dim = hidden_dim
        self.vx_head = Linear(hidden_dim, state_dim, rng.child(100), name="vx_head")
        self.hess_head = (
            Linear(hidden_dim, state_dim, rng.child(101), name="hess_head")
            if predict_hessian_column
            else None
        )
        self.v0 = Tensor(np.zeros(1), grad_enabled=True)
        self.vx0 = Tensor(np.zeros(state_dim), grad_enabled=True) if trainable_vx0 else None
        shift = np.zeros(state_dim) if state_shift is None else np.asarray(state_shift, dtype=np.float64)
        scale = np.ones(state_dim) if state_scale is None else np.asarray(state_scale, dtype=np.float64)
        self._shift = Tensor(shift)
        self._scale = Tensor(scale)

    def reset(self, batch: int) -> None:
        for cell in self.cells:
            cell.reset(batch)

    def predict(self, x: Tensor, step: int) -> tuple[Tensor, Tensor | None]:
        h = (x - self._shift) * self._scale
        for cell in self.cells:
            h = cell.step(h)
        v_x = self.vx_head(h)
        if step == 0 and self.vx0 is not None:
            ones = Tensor(np.ones((x.shape[0], 1)))
            v_x = ones * self.vx0.reshape((1, self.state_dim))
        hess_col = self.hess_head(h) if self.hess_head is not None else None
        return v_x, hess_col

    def parameters(self):
        out = [("v0", self.v0)]
        if self.vx0 is not None:
            out.append(("vx0", self.vx0))
        for cell in self.cells:
            out.extend(cell.parameters())
        out.extend(self.vx_head.parameters())
        if self.hess_head is not None:
            out.extend(self.hess_head.parameters())
        return out


@dataclass
class RolloutBatch:
    """One forward shooting pass: on-graph terminal quantities plus detached
    trajectory arrays for diagnostics."""

    terminal_state: Tensor
    terminal_value: Tensor
    terminal_vx: Tensor
    terminal_hess_col: Tensor | None
    states: np.ndarray  # [batch, K+1, n]
    controls: np.ndarray  # [batch, K, m]
    values: np.ndarray  # [batch, K+1]
    value_increments: np.ndarray  # [batch, K]
    vx_predictions: np.ndarray  # [batch, K+1, n]
    noises: np.ndarray  # [batch, K, v]


def fbsde_rollout(
    problem: SocProblem,
    net: FbsdeNetwork,
    novas_cfg: NovasConfig,
    rng: RngStream,
    batch: int,
    control_fn: Callable | None = None,
) -> RolloutBatch:
    """Forward-propagate state and value for ``batch`` trajectories.

    Per step: the network emits V_x (and optionally a Hessian column), the
    control minimizes the Hamiltonian via the search layer (warm-started at
    the previous control), then one Euler-Maruyama step advances the state
    and the value equation with the same noise increment, N(0, dt) per entry.
    ``control_fn(k, x, v_x) -> Tensor`` overrides the minimizer (baselines,
    closed-form oracles).
    """
    k_steps = problem.steps
    dt = problem.dt
    sqrt_dt = math.sqrt(dt)
    n, m, v = problem.state_dim, problem.control_dim, problem.noise_dim

    x = Tensor(problem.initial_state(batch, rng.child(_INIT)))
    net.reset(batch)
    value = Tensor(np.ones(batch)) * net.v0
    noise_gen = rng.child(_NOISE).generator
    search_gen = rng.child(_SEARCH).generator

    states = [x.numpy()]
    values = [value.numpy()]
    controls, increments, noises, vx_preds = [], [], [], []
    prev_u = np.zeros((batch, m))

    for k in range(k_steps):
        v_x, hess_col = net.predict(x, k)
        if control_fn is not None:
            u = control_fn(k, x, v_x)
        else:
            objective = HamiltonianObjective(problem, x, v_x, hess_col)
            init = GaussianSearchState(
                Tensor(prev_u), Tensor(np.full((batch, m), problem.control_sigma0))
            )
            u = novas_optimize(objective, init, novas_cfg, search_gen)
        prev_u = u.numpy()

        f = problem.drift(x, u)
        sig = problem.diffusion(x, u)
        cost = problem.running_cost(x, u)
        dw = Tensor(noise_gen.standard_normal((batch, v)) * sqrt_dt)
        diffused = T.bmv(sig, dw)
        x_next = x + f * dt + diffused
        if not np.isfinite(x_next.data).all():
            raise FloatingPointError(
                f"{problem.name}: non-finite state at step {k + 1}"
            )
        increment = (v_x * diffused).sum(axis=-1) - cost * dt
        value = value + increment
        x = x_next

        states.append(x.numpy())
        values.append(value.numpy())
        controls.append(prev_u)
        increments.append(increment.numpy())
        noises.append(dw.numpy())
        vx_preds.append(v_x.numpy())

    v_x_T, hess_T = net.predict(x, k_steps)
    vx_preds.append(v_x_T.numpy())
    return RolloutBatch(
        terminal_state=x,
        terminal_value=value,
        terminal_vx=v_x_T,
        terminal_hess_col=hess_T,
        states=np.stack(states, axis=1),
        controls=np.stack(controls, axis=1),
        values=np.stack(values, axis=1),
        value_increments=np.stack(increments, axis=1),
        vx_predictions=np.stack(vx_preds, axis=1),
        noises=np.stack(noises, axis=1),
    )


def fbsde_loss(rollout: RolloutBatch, problem: SocProblem, weights: Sequence[float], delta: float) -> Tensor:
    """Terminal-condition training loss.

    Huber penalties on the propagated value, its gradient and the Hessian
    column against the terminal cost's value/gradient/column, plus direct
    squared terms that push the terminal state itself toward low cost.
    """
    if len(weights) != 6:
        raise ValueError(f"expected 6 loss weights, got {len(weights)}")
    l1, l2, l3, l4, l5, l6 = (float(w) for w in weights)
    x_T = rollout.terminal_state
    phi = problem.terminal_cost(x_T)
    total = Tensor(np.zeros(()))
    if l1:
        total = total + l1 * huber(rollout.terminal_value - phi, delta)
    if l2 or l5:
        phi_x = problem.terminal_grad(x_T)
        if l2:
            total = total + l2 * huber(rollout.terminal_vx - phi_x, delta)
        if l5:
            total = total + l5 * T.square(phi_x).mean()
    if l3 or l6:
        phi_xx = problem.terminal_hess_col(x_T)
        if l3:
            if rollout.terminal_hess_col is None:
                raise ValueError("loss weight l3 set but the network predicts no Hessian column")
            total = total + l3 * huber(rollout.terminal_hess_col - phi_xx, delta)
        if l6:
            total = total + l6 * T.square(phi_xx).mean()
    if l4:
        total = total + l4 * T.square(phi).mean()
    return total


@dataclass
class FbsdeTrainConfig:
    iterations: int = 1000
    batch_size: int = 128
    lr: float = 5e-3
    lr_decay_steps: tuple = ()
    lr_decay_factor: float = 0.1
    loss_weights: tuple = (1.0, 1.0, 0.0, 1.0, 1.0, 0.0)
    huber_delta: float = 50.0
    val_every: int = 100
    val_batch: int = 64
    log_every: int = 10


def train_fbsde(
    problem: SocProblem,
    net: FbsdeNetwork,
    train_cfg: FbsdeTrainConfig,
    novas_cfg: NovasConfig,
    seed: int,
    out_dir: Path | None = None,
    start_iteration: int = 0,
    optimizer: Adam | None = None,
    log_fn: Callable | None = None,
):
    """Adam training loop over terminal-condition mismatch.

    Noise is addressed per (seed, domain, iteration), so resuming from a
    checkpoint replays exactly the draws an uninterrupted run would see.
    Returns (metrics, optimizer, best) where best holds the lowest
    validation loss seen and its iteration.
    """
    if optimizer is None:
        schedule = LrSchedule(train_cfg.lr, train_cfg.lr_decay_steps, train_cfg.lr_decay_factor)
        optimizer = Adam(net.parameters(), schedule=schedule)
    root = RngStream(seed)
    metrics = []
    best = {"val_loss": math.inf, "iteration": -1}
    writer = _MetricsWriter(out_dir / "train_metrics.csv", ["iteration", "loss", "val_loss", "lr", "wall_time"]) if out_dir else None
    t0 = time.perf_counter()
    for it in range(start_iteration, train_cfg.iterations):
        T.clear_tape()
        optimizer.zero_grad()
        rollout = fbsde_rollout(
            problem, net, novas_cfg, root.child(DOMAIN_TRAIN, it), train_cfg.batch_size
        )
        loss = fbsde_loss(rollout, problem, train_cfg.loss_weights, train_cfg.huber_delta)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise FloatingPointError(
                f"training diverged: non-finite loss {loss_val} at iteration {it}"
            )
        T.backward(loss)
        optimizer.step()

        val_loss = math.nan
        if (it + 1) % train_cfg.val_every == 0 or it + 1 == train_cfg.iterations:
            val_loss = _validation_loss(problem, net, novas_cfg, train_cfg, root)
            if val_loss < best["val_loss"]:
                best.update(val_loss=val_loss, iteration=it)
        row = {
            "iteration": it,
            "loss": loss_val,
            "val_loss": val_loss,
            "lr": optimizer.lr,
            "wall_time": time.perf_counter() - t0,
        }
        metrics.append(row)
        if writer:
            writer.write(row)
        if log_fn and (it % train_cfg.log_every == 0 or it + 1 == train_cfg.iterations):
            log_fn(row)
    if writer:
        writer.close()
    T.clear_tape()
    return metrics, optimizer, best


def _validation_loss(problem, net, novas_cfg, train_cfg, root: RngStream) -> float:
    with T.no_grad():
        rollout = fbsde_rollout(
            problem, net, novas_cfg, root.child(DOMAIN_VAL, 0), train_cfg.val_batch
        )
        loss = fbsde_loss(rollout, problem, train_cfg.loss_weights, train_cfg.huber_delta)
    return loss.item()


def evaluate_policy(
    problem: SocProblem,
    net: FbsdeNetwork | None,
    n_rollouts: int,
    rng: RngStream,
    novas_cfg: NovasConfig | None = None,
    control_fn: Callable | None = None,
) -> dict:
    """Roll out the trained (or baseline) controller and summarize.

    Returns per-trajectory terminal costs and states plus mean/std/min/max
    trajectories per state coordinate.  Everything runs off-graph.
    """
    with T.no_grad():
        if control_fn is None and net is None:
            raise ValueError("either a network or an explicit control_fn is required")
        if net is not None:
            rollout = fbsde_rollout(problem, net, novas_cfg, rng, n_rollouts, control_fn=control_fn)
        else:
            dummy = _ZeroValueNet(problem.state_dim)
            rollout = fbsde_rollout(problem, dummy, NovasConfig(), rng, n_rollouts, control_fn=control_fn)
        terminal_cost = problem.terminal_cost(rollout.terminal_state).numpy()
    states = rollout.states
    return {
        "terminal_cost": terminal_cost,
        "terminal_state": rollout.terminal_state.numpy(),
        "states": states,
        "controls": rollout.controls,
        "values": rollout.values,
        "mean": states.mean(axis=0),
        "std": states.std(axis=0),
        "min": states.min(axis=0),
        "max": states.max(axis=0),
    }


class _ZeroValueNet:
    """Stand-in network for baseline rollouts that never consult V_x."""

    def __init__(self, state_dim: int):
        self.state_dim = state_dim
        self.v0 = Tensor(np.zeros(1))

    def reset(self, batch: int) -> None:
        self._batch = batch

    def predict(self, x: Tensor, step: int):
        return Tensor(np.zeros((x.shape[0], self.state_dim))), None


class _MetricsWriter:
    """Append-only CSV with a header row."""

    def __init__(self, path: Path, fieldnames: list[str]):
        path.parent.mkdir(parents=True, exist_ok=True)
        exists = path.exists()
        self._fh = open(path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=fieldnames)
        if not exists:
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        self._writer.writerow({k: _fmt(v) for k, v in row.items()})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
