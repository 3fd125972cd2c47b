from .cartpole import CartPoleParams, cartpole_closed_form_u, make_cartpole_problem
from .portfolio import (
    MarketParams,
    baseline_strategy,
    make_market,
    make_portfolio_problem,
    synth_covariance,
)

__all__ = [
    "CartPoleParams",
    "cartpole_closed_form_u",
    "make_cartpole_problem",
    "MarketParams",
    "baseline_strategy",
    "make_market",
    "make_portfolio_problem",
    "synth_covariance",
]
