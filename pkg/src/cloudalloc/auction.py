"""Proportional-share auction environment for one task on a public cloud.

A bid is money per step. Its rate ``bid / t_s`` buys the share
``rate / p_minus * gamma`` of the cloud, where ``p_minus`` is the aggregate
bid rate of every other vehicle. Episodes start with ``ceil(tau / t_s)``
delay steps during which the request has not reached the cloud: bids are
ignored (not charged, no work done).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .monte_carlo import sample_delays
from .special_fn import OuParams, RngStream, ou_step
from .task_model import DelayModel, TaskSpec

RUNNING, COMPLETED, ABORTED = "running", "completed", "aborted"

_EPS = 1e-9


@dataclass(frozen=True)
class EnvironmentConfig:
    """``p_minus`` is either a fixed bid rate ($/s) or an OU process."""

    p_minus: float | OuParams
    delay: DelayModel
    gamma: float = 1.0
    t_s: float = 0.05
    bid_cap: float = 1.5
    p_minus_floor: float = 1e-6

    def __post_init__(self):
        if self.bid_cap <= 0:
            raise ValueError("bid_cap must be > 0")
        if self.gamma <= 0 or self.t_s <= 0:
            raise ValueError("gamma and t_s must be > 0")
        if isinstance(self.p_minus, OuParams):
            if abs(self.p_minus.dt - self.t_s) > 1e-12:
                raise ValueError("OU step must equal the bidding step t_s")
        elif not self.p_minus > 0:
            raise ValueError("fixed p_minus must be > 0")

    @property
    def fixed(self) -> bool:
        return not isinstance(self.p_minus, OuParams)


@dataclass(frozen=True)
class EpisodeState:
    w: float
    dw: float
    a_prev: float
    d: float
    step: int = 0
    status: str = RUNNING
    # hidden from the bidder
    steps_left: int = 0
    delay_steps: int = 0
    processing_steps: int = 0
    p_minus: float = 0.0
    w0: float = 0.0
    d0: float = 0.0

    def observation(self, bid_cap: float) -> np.ndarray:
        """Observed state ``[w, dw, a_prev, d]`` scaled into roughly [0, 1]."""
        return np.array([self.w / self.w0, self.dw / self.w0, self.a_prev / bid_cap, self.d / self.d0])


@dataclass(frozen=True)
class StepRecord:
    step: int
    bid: float
    p_minus: float
    share: float
    w: float
    d: float
    reward: float
    status: str


@dataclass
class Episode:
    trajectory: list[StepRecord]
    total_reward: float
    total_bid: float
    status: str
    delay_steps: int
    completion_time: float | None  # processing steps only
    elapsed_time: float | None  # delay steps included


def share(p, p_minus, gamma):
    """Processing rate bought by bid rate ``p`` against ``p_minus``."""
    return p / p_minus * gamma


def horizon_steps(deadline: float, t_s: float) -> int:
    return max(int(round(deadline / t_s)), 1)


def delay_steps(tau: float, t_s: float) -> int:
    if tau <= 0:
        return 0
    return int(math.ceil(tau / t_s - _EPS))


def reset(task: TaskSpec, env: EnvironmentConfig, rng: RngStream) -> EpisodeState:
    """Initial state ``[w, 0, 0, d]`` with a sampled delay and starting p_minus.

    An OU p_minus starts from a draw of its stationary law.
    """
    tau = float(sample_delays(env.delay, 1, rng)[0])
    if env.fixed:
        p0 = float(env.p_minus)
    else:
        ou = env.p_minus
        p0 = ou.mu + ou.stationary_std * rng.normal()
    l = horizon_steps(task.deadline, env.t_s)
    return EpisodeState(
        w=task.workload,
        dw=0.0,
        a_prev=0.0,
        d=l * env.t_s,
        steps_left=l,
        delay_steps=delay_steps(tau, env.t_s),
        p_minus=max(p0, env.p_minus_floor),
        w0=task.workload,
        d0=l * env.t_s,
    )


def step(state: EpisodeState, bid: float, env: EnvironmentConfig, task: TaskSpec, rng: RngStream):
    """Advance one bidding step. Returns ``(next_state, reward, record)``."""
    if state.status != RUNNING:
        raise RuntimeError(f"cannot step a {state.status} episode")
    if not -_EPS <= bid <= env.bid_cap + _EPS:
        raise ValueError(f"bid {bid} outside [0, {env.bid_cap}]")
    bid = min(max(float(bid), 0.0), env.bid_cap)

    if env.fixed:
        p_minus = float(env.p_minus)
    else:
        p_minus = max(ou_step(state.p_minus, env.p_minus, rng), env.p_minus_floor)

    if state.delay_steps > 0:
        executed, rate, dw, reward = 0.0, 0.0, 0.0, 0.0
        pending, processing = state.delay_steps - 1, state.processing_steps
    else:
        executed = bid
        rate = share(bid / env.t_s, p_minus, env.gamma)
        dw = rate * env.t_s
        reward = -bid
        pending, processing = 0, state.processing_steps + 1

    w = state.w - dw
    steps_left = state.steps_left - 1
    status = RUNNING
    if w <= _EPS * state.w0:
        status = COMPLETED
        reward -= task.qos_slope * processing * env.t_s
    elif steps_left == 0:
        status = ABORTED
        reward -= task.penalty if task.penalty is not None else 0.0

    nxt = replace(
        state,
        w=w,
        dw=dw,
        a_prev=executed,
        d=steps_left * env.t_s,
        step=state.step + 1,
        status=status,
        steps_left=steps_left,
        delay_steps=pending,
        processing_steps=processing,
        p_minus=p_minus,
    )
    record = StepRecord(state.step, executed, p_minus, rate, w, nxt.d, reward, status)
    return nxt, reward, record


Policy = Callable[[EpisodeState], float]


def run_episode(policy: Policy, env: EnvironmentConfig, task: TaskSpec, rng: RngStream) -> Episode:
    """Roll ``policy`` out until the episode completes or aborts."""
    state = reset(task, env, rng)
    n_delay = state.delay_steps
    records = []
    total = 0.0
    while state.status == RUNNING:
        bid = min(max(float(policy(state)), 0.0), env.bid_cap)
        state, reward, rec = step(state, bid, env, task, rng)
        records.append(rec)
        total += reward
    done = state.status == COMPLETED
    return Episode(
        trajectory=records,
        total_reward=total,
        total_bid=sum(r.bid for r in records),
        status=state.status,
        delay_steps=n_delay,
        completion_time=state.processing_steps * env.t_s if done else None,
        elapsed_time=state.step * env.t_s if done else None,
    )


def zero_policy(state: EpisodeState) -> float:
    return 0.0


def constant_policy(bid: float) -> Policy:
    return lambda state: bid
