"""Branch resampling at a low-confidence position.

A branch point spawns up to ``k_max`` alternative tokens from the draft
distribution there; each alternative is extended by the draft model while the
target verifies the shared prefix. After verification the target picks one
accepted alternative (or none, which is a rollback).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import toylm
from .hrad import ALL_ACCEPT, ALL_REJECT, HybridDecision
from .speccore import accept_prob

log = logging.getLogger(__name__)

ARGMAX_P = "argmax_p"
ARGMAX_R = "argmax_r"


class DraftToken:
    """A drafted token with its draft distribution and its verification variate.

    The uniform ``r`` is drawn at draft time so the accept test is fixed by
    the draft stream alone and replays exactly.
    """

    __slots__ = ("token", "q", "conf", "r")

    def __init__(self, token: int, q: np.ndarray, r: float):
        self.token = token
        self.q = q
        self.conf = float(q[token])
        self.r = r

    def __repr__(self):
        return f"DraftToken({self.token}, conf={self.conf:.3f})"


def draft_one(pair, seq: Sequence[int], rng) -> DraftToken:
    q, cdf = pair.draft.lookup(seq)
    tok = toylm.sample_from(q, rng, cdf)
    return DraftToken(tok, q, float(rng.random()))


@dataclass
class Branch:
    branch_token: int
    q_at_branch: float
    continuation: list = field(default_factory=list)  # DraftToken list
    masked_positions: set = field(default_factory=set)
    head: DraftToken | None = None  # the drafted token object, when it was sampled

    @property
    def tokens(self) -> list[int]:
        return [self.branch_token] + [d.token for d in self.continuation]

    def __len__(self):
        return 1 + len(self.continuation)


@dataclass
class BranchSet:
    prefix: tuple
    branches: list
    k_max: int = 6

    def __post_init__(self):
        if not 1 <= len(self.branches) <= self.k_max:
            raise ValueError(f"branch count {len(self.branches)} outside 1..{self.k_max}")
        toks = [b.branch_token for b in self.branches]
        if len(set(toks)) != len(toks):
            raise ValueError("branch tokens must be distinct")

    def summary(self) -> dict:
        return {
            "branch_tokens": [b.branch_token for b in self.branches],
            "lengths": [len(b) for b in self.branches],
            "masked": [sorted(b.masked_positions) for b in self.branches],
        }


@dataclass(frozen=True)
class PrefixCache:
    prefix_len: int
    per_branch_len: tuple
    charged_units: int

    @classmethod
    def build(cls, prefix_len: int, branch_lens: Sequence[int]) -> "PrefixCache":
        lens = tuple(int(n) for n in branch_lens)
        return cls(prefix_len, lens, cache_units(prefix_len, lens))


def adaptive_k(q_b: float, k_max: int) -> int:
    """max(1, floor(k_max (1 - q_b)))."""
    if not 0.0 <= q_b <= 1.0:
        raise ValueError("q_b must lie in [0, 1]")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    # nudge absorbs round-off such as 10 * (1 - 0.8) = 1.9999999999999996
    return max(1, math.floor(k_max * (1.0 - q_b) + 1e-9))


def spawn_branches(q_dist: np.ndarray, k: int, include: int | None = None) -> list[int]:
    """Top-k tokens by draft probability, ties to the smaller id.

    With ``include`` (the token actually sampled at the branch point) that
    token comes first and the remaining ``k - 1`` slots are the top others.
    """
    V = len(q_dist)
    if k > V:
        log.warning("k=%d exceeds vocabulary size %d; clamping", k, V)
        k = V
    # stable sort on -q keeps smaller ids first among ties
    order = np.argsort(-np.asarray(q_dist), kind="stable")
    if include is None:
        return [int(t) for t in order[:k]]
    out = [int(include)]
    for t in order:
        if len(out) >= k:
            break
        if t != include:
            out.append(int(t))
    return out


def mask_positions(confidences: Sequence[float], epsilon: float) -> set:
    return {i for i, conf in enumerate(confidences) if conf < epsilon}


def extend_branch(branch: Branch, pair, prefix: Sequence[int], epsilon: float,
                  len_cap: int, rng, seed_tokens: Sequence[DraftToken] = ()) -> Branch:
    """Draft ``len_cap`` continuation tokens after the branch token.

    Low-confidence positions are recorded but drafting continues through
    them. ``seed_tokens`` are already-drafted continuation tokens, reused
    before sampling fresh ones.
    """
    seq = list(prefix) + [branch.branch_token]
    cont = []
    for i in range(len_cap):
        if i < len(seed_tokens):
            d = seed_tokens[i]
        else:
            d = draft_one(pair, seq, rng)
        cont.append(d)
        seq.append(d.token)
    branch.continuation = cont
    branch.masked_positions = mask_positions([d.conf for d in cont], epsilon)
    return branch


@dataclass(frozen=True)
class BranchPointResult:
    selected: int | None  # index into the branch list
    accepted: tuple
    r: tuple

    @property
    def rejected(self) -> bool:
        return self.selected is None


def verify_branch_point(branches: BranchSet | Sequence[Branch], p_dist: np.ndarray,
                        q_dist: np.ndarray, rng=None, rule: str = ARGMAX_P,
                        r: Sequence[float] | None = None) -> BranchPointResult:
    """Independent accept test per branch token, then pick one of the survivors.

    ``argmax_p`` picks the accepted token with the largest target
    probability; ``argmax_r`` the largest variate. Ties go to the smaller id.
    """
    items = branches.branches if isinstance(branches, BranchSet) else list(branches)
    if not items:
        raise ValueError("empty branch set")
    if rule not in (ARGMAX_P, ARGMAX_R):
        raise ValueError(f"unknown selection rule {rule!r}")
    if r is None:
        r = rng.random(len(items))
    accepted = tuple(bool(r[i] <= accept_prob(p_dist, q_dist, b.branch_token))
                     for i, b in enumerate(items))
    best, best_key = None, None
    for i, b in enumerate(items):
        if not accepted[i]:
            continue
        score = p_dist[b.branch_token] if rule == ARGMAX_P else r[i]
        key = (score, -b.branch_token)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return BranchPointResult(best, accepted, tuple(float(v) for v in r))


def retained_count(decision: HybridDecision, confidences: Sequence[float], epsilon: float) -> int:
    if decision.s == ALL_REJECT:
        return 0
    if decision.s == ALL_ACCEPT:
        return len(confidences)
    for i, conf in enumerate(confidences):
        if conf <= epsilon:
            return i
    return len(confidences)


def posterior_select(decision: HybridDecision, branch: Branch, epsilon: float) -> list[int]:
    """Continuation tokens of the selected branch carried into the next round."""
    n = retained_count(decision, [d.conf for d in branch.continuation], epsilon)
    return [d.token for d in branch.continuation[:n]]


def cache_units(prefix_len: int, branch_lens: Sequence[int]) -> int:
    """Shared-prefix accounting: the prefix is charged once."""
    if prefix_len < 0 or any(n < 0 for n in branch_lens):
        raise ValueError("lengths must be non-negative")
    return prefix_len + sum(branch_lens)


def naive_cache_units(prefix_len: int, branch_lens: Sequence[int]) -> int:
    if not branch_lens:
        return prefix_len
    return sum(prefix_len + n for n in branch_lens)


def round_token_count(prefix_len: int, branches: Sequence[Branch]) -> int:
    """Draft tokens produced by one spawn-and-extend round."""
    return prefix_len + sum(len(b) for b in branches)
