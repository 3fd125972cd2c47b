"""Cart-pole swing-up as a stochastic control problem.

Dynamics are affine in the (scalar) force on the cart and the cost is
quadratic in the control, so the Hamiltonian minimizer has a closed form
that serves as an oracle for the sampling optimizer.  Noise enters the two
velocity channels only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..fbsde import SocProblem
from ..tensor import Tensor


@dataclass
class CartPoleParams:
    """Physical and cost parameters.

    Masses in kg, pole length in m, gravity in m/s^2; ``noise_std`` is the
    Brownian intensity on the velocity channels.  The state is
    [cart position, pole angle, cart velocity, pole angular velocity] and the
    swing-up target is (0, pi, 0, 0).
    """

    m_p: float = 0.01
    m_c: float = 1.0
    length: float = 0.5
    gravity: float = 9.81
    noise_std: float = 0.5
    control_cost: float = 0.1  # R
    q_diag: tuple = (0.0, 10.0, 3.0, 0.5)
    target: tuple = (0.0, math.pi, 0.0, 0.0)
    horizon: float = 1.5
    steps: int = 75
    sigma0: float = 10.0

    def __post_init__(self):
        if min(self.m_p, self.m_c, self.length, self.gravity) <= 0:
            raise ValueError("masses, length and gravity must be positive")


def _split_state(x: Tensor):
    return x[..., 0:1], x[..., 1:2], x[..., 2:3], x[..., 3:4]


def make_cartpole_problem(params: CartPoleParams | None = None) -> SocProblem:
    params = params or CartPoleParams()
    p = params
    q = Tensor(np.asarray(p.q_diag, dtype=np.float64))
    target = Tensor(np.asarray(p.target, dtype=np.float64))
    diffusion_pattern = np.zeros((4, 2))
    diffusion_pattern[2, 0] = p.noise_std
    diffusion_pattern[3, 1] = p.noise_std
    sigma_const = Tensor(diffusion_pattern)

    def drift(x: Tensor, u: Tensor) -> Tensor:
        _, theta, x_dot, theta_dot = _split_state(x)
        u0 = u[..., 0:1]
        s = T.sin(theta)
        c = T.cos(theta)
        den = p.m_c + p.m_p * s
        x_acc = (u0 + p.m_p * s * (p.length * theta_dot + p.gravity * c)) / den
        theta_acc = (-u0 * c - p.m_p * p.length * theta_dot * c * s) / (p.length * den)
        out_shape = x_acc.shape
        return T.concat(
            [
                T.broadcast_to(x_dot, out_shape),
                T.broadcast_to(theta_dot, out_shape),
                x_acc,
                theta_acc,
            ],
            axis=-1,
        )

    def diffusion(x: Tensor, u: Tensor) -> Tensor:
        return sigma_const

    def running_cost(x: Tensor, u: Tensor) -> Tensor:
        dx = x - target
        state_cost = (q * dx * dx).sum(axis=-1)
        return state_cost + p.control_cost * T.square(u[..., 0])

    def terminal_cost(x: Tensor) -> Tensor:
        dx = x - target
        return (q * dx * dx).sum(axis=-1)

    def terminal_grad(x: Tensor) -> Tensor:
        return 2.0 * q * (x - target)

    def terminal_hess_col(x: Tensor) -> Tensor:
        # d(phi_x)/d(x_last): constant column of 2Q.
        col = np.zeros(4)
        col[3] = 2.0 * p.q_diag[3]
        return Tensor(np.broadcast_to(col, x.shape).copy())

    def initial_state(batch: int, rng) -> np.ndarray:
        return np.zeros((batch, 4))

    def closed_form(x: Tensor, v_x: Tensor) -> Tensor:
        return cartpole_closed_form_u(x, v_x, p)

    return SocProblem(
        state_dim=4,
        control_dim=1,
        noise_dim=2,
        horizon=p.horizon,
        steps=p.steps,
        drift=drift,
        diffusion=diffusion,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        terminal_grad=terminal_grad,
        terminal_hess_col=terminal_hess_col,
        initial_state=initial_state,
        hamiltonian_trace=None,  # diffusion is control-independent
        closed_form_control=closed_form,
        control_sigma0=p.sigma0,
        name="cartpole",
    )


def cartpole_closed_form_u(x: Tensor, v_x: Tensor, params: CartPoleParams) -> Tensor:
    """Stationary point of the Hamiltonian in u: u* = -(G . V_x) / (2R).

    G is the control column of the dynamics; with running cost R u^2 the
    Hamiltonian is exactly quadratic in u and this is its unique minimizer.
    Doubling V_x doubles u*.
    """
    if params.control_cost <= 0:
        raise ValueError(f"control cost R must be positive, got {params.control_cost}")
    theta = x[..., 1:2]
    s = T.sin(theta)
    c = T.cos(theta)
    den = params.m_c + params.m_p * s
    g_xdd = 1.0 / den
    g_tdd = -c / (params.length * den)
    gv = g_xdd * v_x[..., 2:3] + g_tdd * v_x[..., 3:4]
    return -gv / (2.0 * params.control_cost)
