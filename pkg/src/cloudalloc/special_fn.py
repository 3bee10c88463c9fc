"""Scalar special functions, seeded random streams and the OU process step."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special

ALGORITHM = "pcg64"

_SQRT2 = math.sqrt(2.0)
_TWO_POW_53 = float(2**53)


def erf(x):
    """Error function, accepts scalars or arrays."""
    out = special.erf(x)
    return float(out) if np.ndim(out) == 0 else out


def erf_inv(p):
    """Inverse error function on (-1, 1).

    Raises ValueError if any input lies outside the open interval.
    """
    arr = np.asarray(p, dtype=float)
    if not np.all(np.abs(arr) < 1.0):
        raise ValueError(f"erf_inv domain is (-1, 1), got {p!r}")
    out = special.erfinv(arr)
    return float(out) if out.ndim == 0 else out


def gaussian_cdf(x, mean=0.0, std=1.0):
    """Pr(X <= x) for X ~ N(mean, std^2), written through erf."""
    return 0.5 * erf((np.asarray(x, dtype=float) - mean) / (_SQRT2 * std)) + 0.5


class RngStream:
    """Seeded PCG64 stream.

    Child streams are derived as ``SeedSequence(seed, spawn_key=key)`` where
    ``key`` is the tuple of integer stream indices leading to the child, so a
    stream is fully determined by ``(seed, key)`` and never shares state with
    its siblings. String labels are mapped to integers with CRC32.
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *labels: int | str) -> RngStream:
        return RngStream(self.seed, self.key + tuple(_label(x) for x in labels))

    def uniform(self, size=None):
        """Uniform draws on the open interval (0, 1), 53-bit resolution."""
        k = self._gen.integers(0, 2**53, size=size, dtype=np.int64)
        return (k + 0.5) / _TWO_POW_53

    def normal(self, size=None):
        """Standard normal draws by inverse CDF of ``uniform``."""
        u = self.uniform(size)
        z = _SQRT2 * special.erfinv(2.0 * u - 1.0)
        return float(z) if size is None else z

    def choice(self, n: int, size: int):
        """``size`` distinct indices drawn uniformly from ``range(n)``."""
        return self._gen.choice(n, size=size, replace=False)

    def uniform_weights(self, low: float, high: float, shape):
        return low + (high - low) * self.uniform(shape)


def _label(x: int | str) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    if x < 0:
        raise ValueError("stream index must be non-negative")
    return int(x)


@dataclass(frozen=True)
class OuParams:
    """Ornstein-Uhlenbeck parameters (mean, reversion rate, volatility, step)."""

    mu: float
    theta: float
    sigma: float
    dt: float

    def __post_init__(self):
        if self.theta < 0 or self.sigma < 0:
            raise ValueError("OU theta and sigma must be non-negative")
        if self.dt <= 0:
            raise ValueError("OU dt must be positive")
        if self.theta * self.dt >= 1:
            raise ValueError("OU theta*dt must be < 1 for Euler stability")

    @property
    def stationary_std(self) -> float:
        if self.theta == 0:
            return math.inf
        return self.sigma / math.sqrt(2.0 * self.theta)


def ou_step(x: float, params: OuParams, rng: RngStream) -> float:
    """One explicit Euler-Maruyama step of the OU process."""
    drift = params.theta * (params.mu - x) * params.dt
    if params.sigma == 0:
        return x + drift
    return x + drift + params.sigma * math.sqrt(params.dt) * rng.normal()


def ou_path(x0: float, params: OuParams, steps: int, rng: RngStream) -> np.ndarray:
    out = np.empty(steps + 1)
    out[0] = x0
    for k in range(steps):
        out[k + 1] = ou_step(out[k], params, rng)
    return out
