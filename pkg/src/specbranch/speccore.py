"""Speculative-sampling primitives: acceptance test, Match, residual resampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RESAMPLE_RESIDUAL = "resample_residual"
BONUS_TOKEN = "bonus_token"
BRANCH_POINT_CHECK = "branch_point_check"


class NoResidualMass(ValueError):
    """max(0, p - q) is identically zero, so a rejection cannot have happened."""


def accept_prob(p: np.ndarray, q: np.ndarray, token: int) -> float:
    """min(1, p[token] / q[token]); 1.0 when q[token] == 0."""
    qx = q[token]
    if qx <= 0.0:
        return 1.0
    px = p[token]
    if px >= qx:
        return 1.0
    return float(px / qx)


def residual_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """norm(max(0, p - q))."""
    res = np.maximum(p - q, 0.0)
    mass = res.sum()
    if mass <= 0.0:
        raise NoResidualMass("no residual mass: p <= q everywhere")
    return res / mass


@dataclass(frozen=True)
class VerificationOutcome:
    n_accepted: int
    action: str
    residual: np.ndarray | None = None
    # positions where q[token] == 0 forced the acceptance convention
    zero_q_positions: tuple[int, ...] = field(default=())

    @property
    def position(self) -> int | None:
        """Index of the first rejected draft, or None."""
        return self.n_accepted if self.action == RESAMPLE_RESIDUAL else None


def verify_sequence(
    draft_tokens: Sequence[int],
    q_dists: Sequence[np.ndarray],
    p_dists: Sequence[np.ndarray],
    rng=None,
    *,
    r: Sequence[float] | None = None,
    full_action: str = BONUS_TOKEN,
) -> VerificationOutcome:
    """Match a drafted sequence against the target.

    Uniform variates ``r`` may be injected; otherwise ``len(draft_tokens)``
    are drawn from ``rng`` up front. The accepted count is
    ``n = min({i : r_i > p_i[x_i]/q_i[x_i]} U {gamma})`` (0-indexed), and the
    residual on rejection is taken at the first rejected position.
    """
    gamma = len(draft_tokens)
    if len(q_dists) != gamma or len(p_dists) != gamma:
        raise ValueError(
            f"length mismatch: {gamma} tokens, {len(q_dists)} q dists, {len(p_dists)} p dists"
        )
    if full_action not in (BONUS_TOKEN, BRANCH_POINT_CHECK):
        raise ValueError(f"unknown full_action {full_action!r}")
    if r is None:
        r = rng.random(gamma) if gamma else ()
    elif len(r) != gamma:
        raise ValueError("need one variate per drafted token")
    zero_q = []
    for i in range(gamma):
        tok = draft_tokens[i]
        q, p = q_dists[i], p_dists[i]
        if q[tok] <= 0.0:
            zero_q.append(i)
        if r[i] > accept_prob(p, q, tok):
            return VerificationOutcome(i, RESAMPLE_RESIDUAL, residual_dist(p, q), tuple(zero_q))
    return VerificationOutcome(gamma, full_action, None, tuple(zero_q))


def one_step_committed_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact distribution of the token committed by one speculative step.

    sum_x q(x) a(x) delta_x + (sum_x q(x) (1 - a(x))) * residual.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    accept = np.array([accept_prob(p, q, x) for x in range(len(p))])
    out = q * accept
    reject_mass = float((q * (1.0 - accept)).sum())
    if reject_mass > 0.0:
        out = out + reject_mass * residual_dist(p, q)
    return out
