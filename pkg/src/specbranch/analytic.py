"""Closed-form latency and acceptance calculators.

All times are in abstract units of ``t`` (draft per-token time); the target
verification of one round costs ``c * t``. The alpha = 1 singularities are
resolved by their limits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatencyParams:
    gamma: int
    c: float
    t: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError(f"gamma must be a positive integer, got {self.gamma}")
        if not self.c >= 1:
            raise ValueError(f"c must be >= 1, got {self.c}")
        if not self.t > 0:
            raise ValueError("t must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


def t_sd(params: LatencyParams) -> float:
    """Serialized SD per-token latency under full acceptance: (gamma + c) t / (gamma + 1)."""
    return (params.gamma + params.c) * params.t / (params.gamma + 1)


def t_psd_ideal(params: LatencyParams) -> float:
    """Ideal parallel SD per-token latency: max(gamma t, c t) / gamma."""
    return max(params.gamma * params.t, params.c * params.t) / params.gamma


def trunc_geom_pmf(alpha: float, gamma: int) -> np.ndarray:
    """P(k) = (1 - alpha) alpha^k for k < gamma, P(gamma) = alpha^gamma."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    k = np.arange(gamma + 1)
    pmf = (1.0 - alpha) * alpha ** k
    pmf[gamma] = alpha ** gamma
    return pmf


def _one_minus_pow(alpha: float, gamma: float) -> float:
    # 1 - alpha^gamma without cancellation near alpha = 1
    return -math.expm1(gamma * math.log(alpha))


def expected_accept_len(alpha: float, gamma: int) -> float:
    """alpha (1 - alpha^gamma) / (1 - alpha); gamma at alpha = 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return 0.0
    if alpha == 1.0:
        return float(gamma)
    return alpha * _one_minus_pow(alpha, gamma) / (1.0 - alpha)


def gain_factor(alpha: float, gamma: int) -> float:
    """Two-round acceleration factor 1 + alpha^gamma."""
    return 1.0 + alpha ** gamma


def t_psd_rollback(params: LatencyParams) -> float:
    """Per-token latency of parallel SD under rollback.

    2 max(gamma t, c t) / ((1 + alpha^gamma) E[X]), with E[X] the truncated
    geometric mean accepted length.
    """
    a, g = params.alpha, params.gamma
    block_time = 2.0 * max(g * params.t, params.c * params.t)
    return block_time / (gain_factor(a, g) * expected_accept_len(a, g))


def optimal_gamma(
    alpha: float, c: float, t: float = 1.0, gamma_max: int = 32, *, rtol: float = 0.0
) -> tuple[int, float]:
    """Exhaustive argmin of :func:`t_psd_rollback` over gamma in 1..gamma_max.

    With ``rtol > 0`` the smallest gamma whose latency is within ``rtol`` of
    the minimum is returned (the curves are very flat near their minimum).
    Exact ties always go to the smaller gamma.
    """
    if gamma_max < 1:
        raise ValueError("gamma_max must be >= 1")
    lat = [t_psd_rollback(LatencyParams(g, c, t, alpha)) for g in range(1, gamma_max + 1)]
    best = min(lat)
    bound = best * (1.0 + rtol)
    for g, value in enumerate(lat, start=1):
        if value <= bound:
            return g, value
    raise AssertionError("unreachable")


def tree_tokens_dense(k: int, gamma: int) -> int:
    """Tokens per round of a dense top-k token tree: (k^gamma - 1) / (k - 1)."""
    if k < 1 or gamma < 1:
        raise ValueError("k and gamma must be >= 1")
    if k == 1:
        return gamma
    # exact integer arithmetic; Python ints do not overflow
    return (k ** gamma - 1) // (k - 1)


def branch_tokens_sparse(k: int, gamma: int, b: int) -> int:
    """Tokens per round of a k-way branch at position b: k gamma + (k - 1)(1 - b)."""
    if k < 1 or gamma < 1:
        raise ValueError("k and gamma must be >= 1")
    if not 1 <= b <= gamma:
        raise ValueError(f"branch position b must lie in 1..{gamma}")
    return k * gamma + (k - 1) * (1 - b)
