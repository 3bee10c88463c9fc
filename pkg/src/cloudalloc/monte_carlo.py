"""Seeded Monte Carlo estimate of deadline-miss rates and mean QoS cost."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special_fn import RngStream
from .task_model import DelayModel, TaskSpec


@dataclass(frozen=True)
class MissRateReport:
    miss_rate: np.ndarray
    samples: int
    stderr: np.ndarray
    mean_cost: np.ndarray
    alpha: np.ndarray

    @property
    def passed(self) -> np.ndarray:
        """Per-task ``miss_rate <= alpha`` (False where no limit is set)."""
        with np.errstate(invalid="ignore"):
            return self.miss_rate <= self.alpha


def sample_delays(delay: DelayModel, n: int, rng: RngStream) -> np.ndarray:
    """Delay draws. Gaussian draws keep negative values; folded mode takes |tau|."""
    if delay.mode == "fixed" or delay.std == 0:
        tau = np.full(n, float(delay.mean))
    else:
        tau = delay.mean + delay.std * rng.normal(n)
    if delay.mode == "folded_gaussian":
        tau = np.abs(tau)
    return tau


def estimate(tasks, delays, rates, samples: int, seed: int = 0) -> MissRateReport:
    """Empirical miss frequency of ``w/g + tau > d`` and mean of the QoS cost.

    Task ``i`` (0-based) draws from stream ``(seed, "mc", i)``, so its numbers
    depend only on the seed, its position and its own parameters.
    Missing penalties make the mean cost NaN for that task.
    """
    rates = np.asarray(rates, dtype=float)
    if len(rates) != len(tasks) or len(delays) != len(tasks):
        raise ValueError("tasks, delays and rates must have equal length")
    if np.any(rates <= 0):
        raise ValueError("rates must be strictly positive")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    root = RngStream(seed).child("mc")
    miss, cost = [], []
    for i, (task, delay, rate) in enumerate(zip(tasks, delays, rates)):
        tau = sample_delays(delay, samples, root.child(i))
        finish = task.workload / rate + tau
        missed = finish > task.deadline
        miss.append(missed.mean())
        penalty = math.nan if task.penalty is None else task.penalty
        cost.append(np.where(missed, penalty, task.qos_slope * finish).mean())
    miss = np.array(miss)
    alpha = np.array([math.nan if t.chance_limit is None else t.chance_limit for t in tasks])
    return MissRateReport(
        miss_rate=miss,
        samples=samples,
        stderr=np.sqrt(miss * (1 - miss) / samples),
        mean_cost=np.array(cost),
        alpha=alpha,
    )
