"""Distribution of integer-cast Laplace noise and the likelihood of inferred noise."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

COVERAGE = 0.999
# search-surrogate tail slope when the budget is infinite (no noise)
INFINITE_BUDGET_SLOPE = 1.0


def as_fraction(x: float | int | Fraction) -> Fraction:
    """Exact rational of a configured value (0.1 -> 1/10, not the nearest double)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


def _check_eps(epsilon_v) -> None:
    if not epsilon_v > 0:
        raise ValueError(f"per-leaf budget must be positive, got {epsilon_v}")


def noise_pmf(epsilon_v: float, l: int | np.ndarray) -> float | np.ndarray:
    """P(int(Y) = l) for Y ~ Lap(1/epsilon_v), int() truncating toward zero."""
    _check_eps(epsilon_v)
    return np.exp(log_noise_pmf(epsilon_v, l))


def log_noise_pmf(epsilon_v: float, l: int | np.ndarray) -> float | np.ndarray:
    _check_eps(epsilon_v)
    scalar = np.ndim(l) == 0
    a = np.abs(np.asarray(l, dtype=np.float64))
    if math.isinf(epsilon_v):
        out = np.where(a == 0, 0.0, -np.inf)
    else:
        e = float(epsilon_v)
        # l = 0 covers (-1, 1): 1 - e^{-e}; |l| >= 1: (1/2) e^{-|l| e} (1 - e^{-e})
        log_mass = math.log(-math.expm1(-e))
        out = np.where(a == 0, log_mass, math.log(0.5) - a * e + log_mass)
    return float(out) if scalar else out


def coverage(epsilon_v: float, gamma: int) -> float:
    """Total probability of the support [-gamma, gamma]."""
    if math.isinf(epsilon_v):
        return 1.0
    # closed form: 1 - e^{-(gamma+1) e}
    return -math.expm1(-(gamma + 1) * float(epsilon_v))


def gamma_bound(epsilon_v: float | Fraction) -> int:
    """Truncation bound ceil(12 / epsilon_v), widened if coverage ever falls short."""
    _check_eps(epsilon_v)
    if isinstance(epsilon_v, float) and math.isinf(epsilon_v):
        return 0
    gamma = math.ceil(Fraction(12) / as_fraction(epsilon_v))
    eps = float(epsilon_v)
    if coverage(eps, gamma) < COVERAGE:
        start = gamma
        while coverage(eps, gamma) < COVERAGE:
            gamma += 1
        logger.warning("widened gamma from %d to %d for epsilon_v=%g", start, gamma, eps)
    return gamma


@dataclass(frozen=True)
class NoiseModel:
    """Per-leaf budget, truncation bound and the log-pmf table over [-gamma, gamma]."""

    epsilon_v: float
    gamma: int
    log_pmf: np.ndarray
    tail_slope: float

    @classmethod
    def from_epsilon(cls, epsilon_v: float | Fraction, gamma: int | None = None) -> NoiseModel:
        _check_eps(epsilon_v)
        eps = float(epsilon_v)
        if gamma is None:
            gamma = gamma_bound(epsilon_v)
        table = np.asarray(log_noise_pmf(eps, np.arange(-gamma, gamma + 1)), dtype=np.float64)
        table.setflags(write=False)
        slope = INFINITE_BUDGET_SLOPE if math.isinf(eps) else eps
        return cls(eps, int(gamma), table, slope)

    @property
    def infinite(self) -> bool:
        return math.isinf(self.epsilon_v)

    def log_p(self, delta: int, soft: bool = False) -> float:
        """log p for one noise value; soft mode extends linearly past gamma."""
        a = delta if delta >= 0 else -delta
        if a <= self.gamma:
            return float(self.log_pmf[delta + self.gamma])
        if not soft:
            return -math.inf
        return float(self.log_pmf[0]) - (a - self.gamma) * self.tail_slope

    def log_p_array(self, deltas: np.ndarray, soft: bool = False) -> np.ndarray:
        d = np.asarray(deltas, dtype=np.int64)
        a = np.abs(d)
        inside = a <= self.gamma
        out = np.empty(d.shape, dtype=np.float64)
        out[inside] = self.log_pmf[d[inside] + self.gamma]
        if soft:
            out[~inside] = self.log_pmf[0] - (a[~inside] - self.gamma) * self.tail_slope
        else:
            out[~inside] = -np.inf
        return out

    def soft_table(self, extra: int) -> list[float]:
        """Python list of soft-mode log p for delta in [-(gamma+extra), gamma+extra]."""
        lo = self.gamma + extra
        return [self.log_p(d, soft=True) for d in range(-lo, lo + 1)]

    def hard_feasible(self, deltas: np.ndarray) -> bool:
        d = np.asarray(deltas)
        return bool(d.size == 0 or np.abs(d).max() <= self.gamma)


def log_likelihood(model: NoiseModel, deltas: Iterable[int] | np.ndarray, tail_mode: str = "hard") -> float:
    """Sum of log p over inferred noise values; ``tail_mode`` is "hard" or "soft"."""
    if tail_mode not in ("hard", "soft"):
        raise ValueError(f"tail_mode must be 'hard' or 'soft', got {tail_mode!r}")
    d = np.fromiter(deltas, dtype=np.int64) if not isinstance(deltas, np.ndarray) else deltas.ravel()
    if d.size == 0:
        return 0.0
    return float(model.log_p_array(d, soft=tail_mode == "soft").sum())


def laplace_int_noise(epsilon_v: float, rng: np.random.Generator, size=None):
    """Integer part (toward zero) of Lap(1/epsilon_v) draws."""
    _check_eps(epsilon_v)
    if math.isinf(float(epsilon_v)):
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    u = rng.laplace(0.0, 1.0 / float(epsilon_v), size=size)
    if size is None:
        return int(u)
    return np.trunc(u).astype(np.int64)


def pmf_table(epsilon_v: float, gamma: int | None = None) -> list[tuple[int, float, float]]:
    """(l, p_l, log p_l) rows for l in [-gamma, gamma]."""
    model = NoiseModel.from_epsilon(epsilon_v, gamma)
    ls = np.arange(-model.gamma, model.gamma + 1)
    return [(int(l), float(math.exp(lp)), float(lp)) for l, lp in zip(ls, model.log_pmf)]
