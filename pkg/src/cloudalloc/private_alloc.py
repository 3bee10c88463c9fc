"""Chance-constrained rate allocation for a private cloud.

Each task i must meet ``Pr(w_i/g_i + tau_i <= d_i) >= 1 - alpha_i`` with
Gaussian delay, which is equivalent to ``g_i >= rho_i``. The allocator then
minimises ``sum b_i (w_i/g_i + mean_i)`` subject to ``sum g_i = total`` and
the rate floors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special_fn import erf, erf_inv
from .task_model import DelayModel, TaskSpec


class InfeasibleError(ValueError):
    """The allocation problem has no feasible point."""

    def __init__(self, message: str, deficit: float | None = None, tasks: list[int] | None = None):
        super().__init__(message)
        self.deficit = deficit
        self.tasks = tasks or []


@dataclass(frozen=True)
class RateBound:
    rho: float | None
    feasible: bool
    alpha_star_paper: float
    alpha_star_corrected: float


@dataclass(frozen=True)
class AllocationResult:
    rates: np.ndarray
    active: np.ndarray
    objective: float
    kkt_residual: float
    multiplier: float
    rho: np.ndarray
    iterations: int = 0


def penalty_to_alpha(penalty, m_min, m_max, alpha_min, alpha_max):
    """Linear map from deadline-miss penalty to chance limit.

    ``m_min`` maps to ``alpha_max`` and ``m_max`` to ``alpha_min``.
    """
    if not m_min < m_max:
        raise ValueError("penalty range is degenerate (m_min must be < m_max)")
    if not 0 < alpha_min < alpha_max < 1:
        raise ValueError("need 0 < alpha_min < alpha_max < 1")
    if not m_min <= penalty <= m_max:
        raise ValueError(f"penalty {penalty} outside [{m_min}, {m_max}]")
    return alpha_max + (alpha_min - alpha_max) / (m_max - m_min) * (penalty - m_min)


def alpha_star_paper(deadline, mean, std):
    """Lowest achievable miss level as printed in the source formula.

    This is ``1/2 - erf(d - mean) / (2 sqrt(2) std)``. It is kept because it
    reproduces the published table; it is not a probability (it can be
    negative). See ``alpha_star_corrected`` for the statistical bound.
    """
    if std == 0:
        return -math.inf if deadline > mean else 0.5
    return 0.5 - erf(deadline - mean) / (2.0 * math.sqrt(2.0) * std)


def alpha_star_corrected(deadline, mean, std):
    """``Pr(tau > d)``: miss probability with an infinite processing rate."""
    if std == 0:
        return 0.0 if deadline > mean else 1.0
    return 0.5 - 0.5 * erf((deadline - mean) / (math.sqrt(2.0) * std))


def rate_bound(task: TaskSpec, delay: DelayModel) -> RateBound:
    if delay.mode not in ("gaussian", "fixed"):
        raise ValueError(f"rate bound needs a gaussian or fixed delay, got {delay.mode!r}")
    if task.chance_limit is None:
        raise ValueError("task has no chance limit")
    margin = task.deadline - delay.mean
    if delay.std > 0:
        margin -= math.sqrt(2.0) * delay.std * erf_inv(1.0 - 2.0 * task.chance_limit)
    a_paper = alpha_star_paper(task.deadline, delay.mean, delay.std)
    a_corr = alpha_star_corrected(task.deadline, delay.mean, delay.std)
    if margin <= 0:
        return RateBound(None, False, a_paper, a_corr)
    return RateBound(task.workload / margin, True, a_paper, a_corr)


def objective(rates, tasks, delays) -> float:
    rates = np.asarray(rates, dtype=float)
    w = np.array([t.workload for t in tasks])
    b = np.array([t.qos_slope for t in tasks])
    mean = np.array([d.mean for d in delays])
    return float(np.sum(b * (w / rates + mean)))


def kkt_residual(rates, rho, coef, total, multiplier) -> tuple[float, np.ndarray]:
    """Largest KKT violation and the active mask used to measure it.

    ``coef`` holds ``b_i * w_i``; stationarity reads ``coef_i / g_i^2 = lam``
    on free coordinates and ``coef_i / rho_i^2 <= lam`` on pinned ones.
    """
    rates = np.asarray(rates, dtype=float)
    slack = rates - rho
    active = slack <= 1e-12 * max(total, 1.0)
    marginal = coef / rates**2
    res = [abs(rates.sum() - total) / total, max(0.0, float(np.max(-slack)))]
    if np.any(~active):
        res.append(float(np.max(np.abs(marginal[~active] - multiplier))))
    if np.any(active):
        res.append(max(0.0, float(np.max(coef[active] / rho[active] ** 2 - multiplier))))
    return float(max(res)), active


def _floors(tasks, delays) -> np.ndarray:
    bounds = [rate_bound(t, d) for t, d in zip(tasks, delays)]
    bad = [i + 1 for i, rb in enumerate(bounds) if not rb.feasible]
    if bad:
        raise InfeasibleError(
            f"chance constraint cannot be met for task(s) {bad}: delay alone exceeds the limit",
            tasks=bad,
        )
    return np.array([rb.rho for rb in bounds])


def _active_set(coef, rho, total):
    n = len(coef)
    pinned = np.zeros(n, dtype=bool)
    root = np.sqrt(coef)
    for it in range(1, n + 2):
        remaining = total - rho[pinned].sum()
        free = ~pinned
        # sqrt(lam) = sum_free sqrt(coef) / remaining
        sqrt_lam = root[free].sum() / remaining
        rates = np.where(pinned, rho, root / sqrt_lam)
        violated = free & (rates < rho)
        if not violated.any():
            return rates, sqrt_lam**2, it
        pinned |= violated
        if pinned.all():
            # every floor binds; only possible when sum(rho) == total
            return rho.copy(), float(np.max(coef / rho**2)), it
    raise AssertionError("active-set loop did not terminate")


def _project(y, rho, total):
    """Euclidean projection onto {x >= rho, sum x = total} by bisection on the shift."""
    lo, hi = float(np.min(y - rho)) - total, float(np.max(y - rho)) + total
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.maximum(y - mid, rho).sum()
        if s > total:
            lo = mid
        else:
            hi = mid
    x = np.maximum(y - 0.5 * (lo + hi), rho)
    return x + (total - x.sum()) * (x > rho) / max(int((x > rho).sum()), 1)


def _projected_gradient(coef, rho, total, tol=1e-13, max_iter=200_000):
    x = _project(np.full(len(coef), total / len(coef)), rho, total)
    step = 1.0
    f = np.sum(coef / x)
    for it in range(1, max_iter + 1):
        grad = -coef / x**2
        while True:
            cand = _project(x - step * grad, rho, total)
            fc = np.sum(coef / cand)
            if fc <= f - 1e-4 * np.dot(grad, x - cand) or step < 1e-20:
                break
            step *= 0.5
        moved = np.max(np.abs(cand - x))
        x, f = cand, fc
        step *= 2.0
        if moved < tol:
            break
    free = x > rho + 1e-9
    lam = float(np.mean(coef[free] / x[free] ** 2)) if free.any() else float(np.max(coef / rho**2))
    return x, lam, it


def allocate(tasks, delays, total_rate, method: str = "active_set") -> AllocationResult:
    """Minimise expected linear QoS cost under the chance-constraint floors.

    ``method`` is ``"active_set"`` (exact, at most N passes) or
    ``"projected_gradient"`` (iterative fallback with the same contract).
    """
    if len(tasks) != len(delays):
        raise ValueError("tasks and delays differ in length")
    rho = _floors(tasks, delays)
    deficit = rho.sum() - total_rate
    if deficit > 1e-12 * total_rate:
        raise InfeasibleError(
            f"rate floors need {rho.sum():.6g} but only {total_rate:.6g} is available "
            f"(deficit {deficit:.6g})",
            deficit=float(deficit),
        )
    coef = np.array([t.qos_slope * t.workload for t in tasks])
    if method == "active_set":
        rates, lam, iters = _active_set(coef, rho, total_rate)
    elif method == "projected_gradient":
        rates, lam, iters = _projected_gradient(coef, rho, total_rate)
    else:
        raise ValueError(f"unknown method {method!r}")
    res, active = kkt_residual(rates, rho, coef, total_rate, lam)
    return AllocationResult(
        rates=rates,
        active=active,
        objective=objective(rates, tasks, delays),
        kkt_residual=res,
        multiplier=float(lam),
        rho=rho,
        iterations=iters,
    )
