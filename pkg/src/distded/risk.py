"""Empirical VaR / CVaR over uniformly weighted return particles.

All functions reduce over the last axis, so a ``(states, actions, K)`` particle
array yields ``(states, actions)`` risk values in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmpiricalReturnDistribution:
    samples: np.ndarray
    support_lo: float = -np.inf
    support_hi: float = np.inf

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.size == 0:
            raise ValueError("a return distribution needs at least one particle")
        if not np.all(np.isfinite(s)):
            raise ValueError("particles must be finite")
        object.__setattr__(self, "samples", np.clip(s, self.support_lo, self.support_hi))


def _particles(dist, support=None) -> np.ndarray:
    if isinstance(dist, EmpiricalReturnDistribution):
        s = dist.samples
    else:
        s = np.asarray(dist, dtype=np.float64)
    if s.ndim == 0:
        s = s[None]
    if s.shape[-1] == 0:
        raise ValueError("empty particle set")
    if support is not None:
        s = np.clip(s, support[0], support[1])
    return s


def _check_alpha(alpha):
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


def tail_count(alpha, k) -> int:
    """Number of smallest particles forming the alpha-tail: ceil(alpha*k).

    The product is rounded to 9 decimals first so that e.g. 0.35*1000 counts
    350 particles rather than 351.
    """
    _check_alpha(alpha)
    return min(k, max(1, math.ceil(round(alpha * k, 9))))


def var_alpha(dist, alpha, support=None):
    """The ceil(alpha*K)-th smallest particle."""
    s = _particles(dist, support)
    n = tail_count(alpha, s.shape[-1])
    return np.partition(s, n - 1, axis=-1)[..., n - 1]


def cvar_alpha(dist, alpha, support=None):
    """Mean of the ceil(alpha*K) smallest particles."""
    s = _particles(dist, support)
    n = tail_count(alpha, s.shape[-1])
    if n == s.shape[-1]:
        return s.mean(axis=-1)
    low = np.partition(s, n - 1, axis=-1)[..., :n]
    return low.mean(axis=-1)


def cvar_spectrum(dist, alphas, support=None) -> np.ndarray:
    """CVaR at every alpha from one sort; alpha becomes the last output axis."""
    alphas = list(alphas)
    if not alphas:
        raise ValueError("need at least one alpha")
    s = np.sort(_particles(dist, support), axis=-1, kind="stable")
    k = s.shape[-1]
    counts = np.array([tail_count(a, k) for a in alphas])
    prefix = np.cumsum(s, axis=-1)
    return prefix[..., counts - 1] / counts


def cvar_dual_oracle(dist, alpha, cap=None) -> float:
    """Brute-force dual form: minimise a reweighted mean over the risk envelope.

    Weights live in ``[0, cap]`` and sum to one; the minimiser pours the
    maximal weight onto the currently smallest unweighted particle until the
    mass is spent. The default cap ``1/ceil(alpha*K)`` is the envelope whose
    optimum is the ceil(alpha*K)-tail mean; ``cap=1/(alpha*K)`` gives the
    interpolated CVaR instead. Test oracle only, one distribution at a time.
    """
    s = np.array(_particles(dist), dtype=np.float64).ravel()
    k = s.size
    if k > 10_000:
        raise ValueError("oracle is quadratic; keep K <= 10000")
    if cap is None:
        cap = 1.0 / tail_count(alpha, k)
    else:
        _check_alpha(alpha)
    remaining = 1.0
    total = 0.0
    free = s.copy()
    for _ in range(k):
        if remaining <= 1e-12:
            break
        i = int(np.argmin(free))
        w = min(cap, remaining)
        total += w * free[i]
        remaining -= w
        free[i] = np.inf
    return total
