"""Toy autoregressive models used as draft/target pairs.

A :class:`ToyModel` is a Markov model of order ``m``: the next-token
distribution depends only on the last ``m`` tokens. Unseen contexts (and
prefixes shorter than ``m``) map to a fallback distribution, so every model
is a total function of the prefix.

:func:`make_pair` builds a random target ``p`` and a draft
``q = beta * p + (1 - beta) * uniform`` with ``beta`` calibrated so that the
mean single-token acceptance rate over uniformly random contexts hits a
requested value.
"""
from __future__ import annotations

import functools
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DIST_ATOL = 1e-9

# Feature layout defaults: D values per synthetic layer block, D_EMB for the
# token embedding, K blocks.
FEATURE_D = 8
FEATURE_D_EMB = 8
FEATURE_K = 4


class ModelInputError(ValueError):
    """Raised for token ids outside the vocabulary or malformed tables."""


class CalibrationError(RuntimeError):
    """Raised when ``make_pair`` cannot reach the requested acceptance rate."""

    def __init__(self, message: str, achieved_alpha: float):
        super().__init__(f"{message} (achieved alpha={achieved_alpha:.4f})")
        self.achieved_alpha = achieved_alpha


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ModelInputError(f"vocabulary size must be >= 2, got {self.size}")

    def check(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if not (0 <= tok < self.size) or int(tok) != tok:
                raise ModelInputError(f"token id {tok!r} outside vocabulary 0..{self.size - 1}")


def check_distribution(probs, size: int | None = None) -> np.ndarray:
    """Validate and return ``probs`` as a float64 vector."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1:
        raise ModelInputError("distribution must be a 1-d vector")
    if size is not None and arr.shape[0] != size:
        raise ModelInputError(f"distribution has length {arr.shape[0]}, expected {size}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ModelInputError("distribution entries must be finite and non-negative")
    if abs(arr.sum() - 1.0) > DIST_ATOL:
        raise ModelInputError(f"distribution sums to {arr.sum()!r}, not 1")
    return arr


def uniform(size: int) -> np.ndarray:
    return np.full(size, 1.0 / size)


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats."""
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def sample_from(probs: np.ndarray, rng, cdf: np.ndarray | None = None) -> int:
    """Inverse-CDF draw of one token id."""
    if cdf is None:
        cdf = np.cumsum(probs)
    u = rng.random()
    idx = int(np.searchsorted(cdf, u, side="right"))
    # cumsum can end a hair below 1.0; fold overshoot onto the last
    # token carrying mass.
    if idx >= len(cdf):
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx


@dataclass(frozen=True, eq=False)
class ToyModel:
    """Order-``m`` Markov next-token model over ``vocab_size`` tokens."""

    vocab_size: int
    order: int
    table: dict[tuple[int, ...], np.ndarray]
    fallback: np.ndarray
    _cdfs: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        vocab = Vocabulary(self.vocab_size)
        if self.order < 0:
            raise ModelInputError("Markov order must be >= 0")
        fb = check_distribution(self.fallback, self.vocab_size)
        fb.setflags(write=False)
        object.__setattr__(self, "fallback", fb)
        table = {}
        for ctx, probs in self.table.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != self.order:
                raise ModelInputError(f"context {ctx} does not have length {self.order}")
            vocab.check(ctx)
            arr = check_distribution(probs, self.vocab_size)
            arr.setflags(write=False)
            table[ctx] = arr
        object.__setattr__(self, "table", table)
        cdfs = {ctx: np.cumsum(p) for ctx, p in table.items()}
        cdfs[None] = np.cumsum(fb)
        object.__setattr__(self, "_cdfs", cdfs)

    def context(self, prefix: Sequence[int]) -> tuple[int, ...] | None:
        if self.order == 0:
            return ()
        if len(prefix) < self.order:
            return None
        return tuple(prefix[len(prefix) - self.order:])

    def lookup(self, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """(distribution, cdf) for the context of ``prefix``; no validation."""
        ctx = self.context(prefix)
        probs = self.table.get(ctx) if ctx is not None else None
        if probs is None:
            return self.fallback, self._cdfs[None]
        return probs, self._cdfs[ctx]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "order": self.order,
            "fallback": self.fallback.tolist(),
            "table": [[list(ctx), probs.tolist()] for ctx, probs in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyModel":
        table = {tuple(ctx): np.asarray(probs, dtype=np.float64) for ctx, probs in data["table"]}
        return cls(int(data["vocab_size"]), int(data["order"]), table, np.asarray(data["fallback"]))


def next_dist(model: ToyModel, prefix: Sequence[int]) -> np.ndarray:
    """Conditional next-token distribution for ``prefix``."""
    Vocabulary(model.vocab_size).check(prefix)
    return model.lookup(prefix)[0]


def sample(model: ToyModel, prefix: Sequence[int], rng) -> int:
    Vocabulary(model.vocab_size).check(prefix)
    probs, cdf = model.lookup(prefix)
    return sample_from(probs, rng, cdf)


@dataclass(frozen=True, eq=False)
class ToyModelPair:
    target: ToyModel
    draft: ToyModel
    speed_ratio_c: float
    intended_alpha: float
    beta: float = float("nan")
    seed: int = 0

    def __post_init__(self):
        if self.target.vocab_size != self.draft.vocab_size:
            raise ModelInputError("draft and target must share one vocabulary")
        if not self.speed_ratio_c >= 1:
            raise ModelInputError(f"speed ratio c must be >= 1, got {self.speed_ratio_c}")

    @property
    def vocab_size(self) -> int:
        return self.target.vocab_size

    def to_json(self) -> str:
        doc = {
            "format": "specbranch-pair/v1",
            "vocab_size": self.vocab_size,
            "order": self.target.order,
            "c": self.speed_ratio_c,
            "intended_alpha": self.intended_alpha,
            "beta": None if math.isnan(self.beta) else self.beta,
            "seed": self.seed,
            "target": self.target.to_dict(),
            "draft": self.draft.to_dict(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyModelPair":
        doc = json.loads(text)
        return cls(
            target=ToyModel.from_dict(doc["target"]),
            draft=ToyModel.from_dict(doc["draft"]),
            speed_ratio_c=float(doc["c"]),
            intended_alpha=float(doc["intended_alpha"]),
            beta=float("nan") if doc["beta"] is None else float(doc["beta"]),
            seed=int(doc["seed"]),
        )


def _dense(model: ToyModel) -> np.ndarray:
    """Rows of next-token probabilities for every context in V^m."""
    V, m = model.vocab_size, model.order
    rows = [model.lookup(ctx)[0] for ctx in itertools.product(range(V), repeat=m)]
    return np.vstack(rows)


def _mixture_alpha(p_rows: np.ndarray, beta: float) -> float:
    u = 1.0 / p_rows.shape[1]
    q_rows = beta * p_rows + (1.0 - beta) * u
    return float(np.minimum(p_rows, q_rows).sum(axis=1).mean())


def exact_alpha(pair: ToyModelPair) -> float:
    """Mean of sum_x min(p, q) over uniformly random contexts."""
    p_rows, q_rows = _dense(pair.target), _dense(pair.draft)
    return float(np.minimum(p_rows, q_rows).sum(axis=1).mean())


def estimate_alpha(pair: ToyModelPair, n_steps: int, rng) -> float:
    """Monte-Carlo acceptance frequency of single-token speculative tests.

    Each step draws a context uniformly from V^m, a token ``x ~ q`` and
    accepts when ``r <= p(x) / q(x)``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    V, m = pair.vocab_size, pair.target.order
    p_rows, q_rows = _dense(pair.target), _dense(pair.draft)
    ctx = rng.integers(0, V ** m, size=n_steps)
    q_cdf = np.cumsum(q_rows, axis=1)
    u = rng.random(n_steps)
    tok = (q_cdf[ctx] <= u[:, None]).sum(axis=1)
    tok = np.minimum(tok, V - 1)
    qx = q_rows[ctx, tok]
    px = p_rows[ctx, tok]
    ratio = np.where(qx > 0, px / np.where(qx > 0, qx, 1.0), 1.0)
    r = rng.random(n_steps)
    return float(np.mean(r <= ratio))


def _random_target_rows(V: int, m: int, rng, sharpness: float,
                        easy_fraction: float = 0.0, easy_sharpness: float = 0.5) -> np.ndarray:
    scale = np.full((V ** m, 1), float(sharpness))
    if easy_fraction > 0:
        # a share of contexts gets a flat target, where any draft does well
        scale[rng.random(V ** m) < easy_fraction] = easy_sharpness
    logits = scale * rng.standard_normal((V ** m, V))
    logits -= logits.max(axis=1, keepdims=True)
    rows = np.exp(logits)
    return rows / rows.sum(axis=1, keepdims=True)


def _build_model(rows: np.ndarray, V: int, m: int) -> ToyModel:
    table = {ctx: rows[i] for i, ctx in enumerate(itertools.product(range(V), repeat=m))}
    return ToyModel(V, m, table, uniform(V))


def make_pair(
    vocab_size: int,
    order: int,
    intended_alpha: float,
    c: float,
    seed: int,
    *,
    sharpness: float = 6.0,
    easy_fraction: float = 0.0,
    easy_sharpness: float = 0.5,
    check_steps: int = 20_000,
    tolerance: float = 0.03,
) -> ToyModelPair:
    """Random target plus a uniform-mixture draft calibrated to ``intended_alpha``.

    ``beta`` is found by bisection on the exact expected acceptance (which is
    monotone in ``beta``); the result is then checked against
    :func:`estimate_alpha` with ``check_steps`` Monte-Carlo steps.

    Target rows are softmaxes of ``sharpness``-scaled Gaussian logits. With
    ``easy_fraction > 0`` that share of contexts uses ``easy_sharpness``
    instead, which spreads the per-context acceptance rate.
    """
    if vocab_size < 2:
        raise ModelInputError("vocab_size must be >= 2")
    if not 0.0 < intended_alpha < 1.0:
        raise ModelInputError("intended_alpha must lie in (0, 1)")
    if c < 1:
        raise ModelInputError("c must be >= 1")
    rng = np.random.default_rng(seed)
    if not 0.0 <= easy_fraction <= 1.0:
        raise ModelInputError("easy_fraction must lie in [0, 1]")
    p_rows = _random_target_rows(vocab_size, order, rng, sharpness, easy_fraction, easy_sharpness)

    floor_alpha = _mixture_alpha(p_rows, 0.0)
    if intended_alpha < floor_alpha:
        raise CalibrationError(
            f"intended alpha {intended_alpha} is below the uniform-draft level", floor_alpha
        )
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _mixture_alpha(p_rows, mid) < intended_alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    beta = 0.5 * (lo + hi)
    q_rows = beta * p_rows + (1.0 - beta) / vocab_size
    pair = ToyModelPair(
        target=_build_model(p_rows, vocab_size, order),
        draft=_build_model(q_rows, vocab_size, order),
        speed_ratio_c=float(c),
        intended_alpha=float(intended_alpha),
        beta=beta,
        seed=seed,
    )
    measured = estimate_alpha(pair, check_steps, np.random.default_rng([seed, 7]))
    if abs(measured - intended_alpha) > tolerance:
        raise CalibrationError("Monte-Carlo check of the calibrated pair failed", measured)
    return pair


# -- synthetic features -----------------------------------------------------

@functools.lru_cache(maxsize=65536)
def _code(seed: int, block: int, ctx_id: int, width: int) -> np.ndarray:
    vec = np.random.default_rng([seed, 101, block, ctx_id]).standard_normal(width)
    vec.setflags(write=False)
    return vec


@functools.lru_cache(maxsize=65536)
def _embedding(seed: int, token: int, width: int) -> np.ndarray:
    vec = np.random.default_rng([seed, 202, token]).standard_normal(width)
    vec.setflags(write=False)
    return vec


def _context_id(ctx: tuple[int, ...] | None, V: int) -> int:
    if ctx is None:
        return -1 & 0xFFFFFFFF
    idx = 0
    for t in ctx:
        idx = idx * V + t
    return idx


def dist_stats(probs: np.ndarray) -> tuple[float, float, float]:
    """(max prob, entropy, top-1 minus top-2 margin)."""
    top2 = np.partition(probs, -2)[-2:]
    return float(top2[1]), entropy(probs), float(top2[1] - top2[0])


def features(
    pair: ToyModelPair,
    prefix: Sequence[int],
    next_token: int,
    K: int = FEATURE_K,
    noise_sigma: float = 0.0,
    rng=None,
    *,
    D: int = FEATURE_D,
    D_emb: int = FEATURE_D_EMB,
) -> np.ndarray:
    """Synthetic stand-in for concatenated target hidden states plus a token embedding.

    Each of the ``K`` blocks holds the target next-token statistics at the
    context ``prefix + [next_token]`` (max prob, entropy, margin) followed by a
    fixed random code of that context; a fixed random embedding of
    ``next_token`` is appended. Gaussian noise of scale ``noise_sigma`` is
    added to the layer blocks.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if D < 3:
        raise ValueError("block width D must be >= 3")
    V = pair.vocab_size
    Vocabulary(V).check([next_token])
    full = list(prefix) + [next_token]
    probs, _ = pair.target.lookup(full)
    stats = dist_stats(probs)
    ctx_id = _context_id(pair.target.context(full), V)
    out = np.empty(K * D + D_emb)
    for k in range(K):
        block = out[k * D:(k + 1) * D]
        block[:3] = stats
        block[3:] = _code(pair.seed, k, ctx_id, D - 3)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        out[:K * D] += noise_sigma * rng.standard_normal(K * D)
    out[K * D:] = _embedding(pair.seed, int(next_token), D_emb)
    return out
