"""Optimal bidding when p_minus and the delay are known constants.

Two references are provided. ``solve`` is the continuous-time optimum of
``J(p) = p (d - tau) + C(p)`` over the average bid rate ``p``.
``solve_discrete`` is the exact optimum of the stepped auction environment
(per-step bid cap, ceil-rounded delay, completion cost counted on processing
steps), which is what a learned policy can actually reach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .auction import delay_steps, horizon_steps
from .task_model import TaskSpec

ZERO_BID, INTERIOR_MIN, BOUNDARY_MIN = "zero_bid", "interior_min", "boundary_min"


@dataclass(frozen=True)
class BestResponse:
    p_star: float
    cost: float
    regime: str


@dataclass(frozen=True)
class DiscreteBestResponse:
    total_bid: float
    steps: int
    cost: float
    regime: str


def _penalty(task: TaskSpec) -> float:
    if task.penalty is None:
        raise ValueError("best response needs a task penalty")
    return task.penalty


def completion_threshold(task: TaskSpec, p_minus, tau, gamma) -> float:
    """Smallest average bid rate that finishes the work inside ``d - tau``."""
    return task.workload * p_minus / ((task.deadline - tau) * gamma)


def total_cost(p, task: TaskSpec, p_minus, tau, gamma) -> float:
    penalty = _penalty(task)
    window = task.deadline - tau
    if window <= 0:
        return penalty
    if p > 0 and p >= completion_threshold(task, p_minus, tau, gamma):
        return p * window + task.qos_slope * (task.workload * p_minus / (p * gamma) + tau)
    return p * window + penalty


def solve(task: TaskSpec, p_minus, tau, gamma) -> BestResponse:
    """Better of the zero-bid minimum and the bidding minimum.

    A tie between the two goes to bidding.
    """
    penalty = _penalty(task)
    window = task.deadline - tau
    if window <= 0:
        return BestResponse(0.0, penalty, ZERO_BID)
    interior = math.sqrt(task.qos_slope * task.workload * p_minus / (window * gamma))
    boundary = completion_threshold(task, p_minus, tau, gamma)
    p_star = max(interior, boundary)
    cost = total_cost(p_star, task, p_minus, tau, gamma)
    if cost <= penalty:
        return BestResponse(p_star, cost, INTERIOR_MIN if interior >= boundary else BOUNDARY_MIN)
    return BestResponse(0.0, penalty, ZERO_BID)


def solve_discrete(task: TaskSpec, p_minus, tau, gamma, t_s, bid_cap) -> DiscreteBestResponse:
    """Exact optimum of the stepped environment with constant p_minus and tau.

    Every dollar buys ``gamma / p_minus`` units of work whatever the step, so
    any completing schedule spends ``w p_minus / gamma`` and the only choice
    is how many processing steps ``k`` to use; the fewest feasible is best.
    """
    penalty = _penalty(task)
    spend = task.workload * p_minus / gamma
    available = horizon_steps(task.deadline, t_s) - delay_steps(tau, t_s)
    k = max(int(math.ceil(spend / bid_cap - 1e-9)), 1)
    if k > available:
        return DiscreteBestResponse(0.0, 0, penalty, ZERO_BID)
    cost = spend + task.qos_slope * k * t_s
    if cost <= penalty:
        return DiscreteBestResponse(spend, k, cost, "bidding")
    return DiscreteBestResponse(0.0, 0, penalty, ZERO_BID)


def front_loaded_schedule(total_bid: float, bid_cap: float) -> list[float]:
    """Per-step bids spending ``total_bid`` as fast as the cap allows."""
    bids = []
    left = total_bid
    while left > 1e-12:
        bids.append(min(bid_cap, left))
        left -= bids[-1]
    return bids


def cost_curve(task: TaskSpec, p_minus, tau, gamma, p_max=None, points=401):
    """Grid of ``(p, J(p))`` for plotting."""
    if p_max is None:
        p_max = 3.0 * max(solve(task, p_minus, tau, gamma).p_star, completion_threshold(task, p_minus, tau, gamma))
    ps = np.linspace(0.0, p_max, points)
    return [(float(p), total_cost(p, task, p_minus, tau, gamma)) for p in ps]
