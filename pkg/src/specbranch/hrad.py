"""Draft-structure policies.

Implicit early stopping (draft confidence, entropy), an explicit
class-to-length map, and the hybrid three-class predictor whose class picks
the retained-token rule: 0 keeps nothing, 1 filters by confidence, 2 keeps
everything.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import toylm
from .mlp import MLPClassifier, TrainConfig, fit
from .speccore import verify_sequence

ALL_REJECT, CONFIDENCE, ALL_ACCEPT = 0, 1, 2
RULE_EMPTY, RULE_CONFIDENCE, RULE_FULL = "empty", "confidence", "full"
_RULES = {ALL_REJECT: RULE_EMPTY, CONFIDENCE: RULE_CONFIDENCE, ALL_ACCEPT: RULE_FULL}

POLICY_KINDS = ("fixed", "confidence", "entropy", "explicit", "hybrid", "oracle")


class PolicyConfigError(ValueError):
    pass


class MissingClassError(ValueError):
    def __init__(self, counts: dict):
        super().__init__(f"training set must contain all 3 classes, got counts {counts}")
        self.counts = counts


@dataclass(frozen=True)
class PolicyConfig:
    epsilon: float = 0.2
    lam: float = 1.0
    gamma_max: int = 8
    policy_kind: str = "hybrid"
    # testing aid: pin the class regardless of classifier output
    forced_class: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise PolicyConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.gamma_max < 1:
            raise PolicyConfigError("gamma_max must be >= 1")
        if self.policy_kind not in POLICY_KINDS:
            raise PolicyConfigError(f"unknown policy kind {self.policy_kind!r}")
        if self.forced_class is not None and self.forced_class not in _RULES:
            raise PolicyConfigError("forced_class must be 0, 1 or 2")


@dataclass(frozen=True)
class HybridDecision:
    s: int
    rule: str
    epsilon: float
    draft_len: int

    def __post_init__(self):
        if _RULES.get(self.s) != self.rule:
            raise ValueError(f"class {self.s} cannot carry rule {self.rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def label_rollout(n_accepted: int, gamma: int) -> int:
    if not 0 <= n_accepted <= gamma:
        raise ValueError(f"n_accepted={n_accepted} outside 0..{gamma}")
    if n_accepted == 0:
        return ALL_REJECT
    if n_accepted == gamma:
        return ALL_ACCEPT
    return CONFIDENCE


def confidence_stop(q_confidences: Sequence[float], epsilon: float) -> int:
    """Index of the first confidence <= epsilon, or the sequence length."""
    for i, conf in enumerate(q_confidences):
        if conf <= epsilon:
            return i
    return len(q_confidences)


def entropy_score(dist: np.ndarray, lam: float) -> float:
    return 1.0 - math.sqrt(lam * toylm.entropy(np.asarray(dist)))


def entropy_stop(dists: Iterable[np.ndarray], lam: float, epsilon: float) -> int:
    """First index where 1 - sqrt(lam * H) < epsilon (H in nats), else the length."""
    if not lam > 0:
        raise PolicyConfigError(f"lambda must be > 0, got {lam}")
    n = 0
    for dist in dists:
        if entropy_score(dist, lam) < epsilon:
            return n
        n += 1
    return n


def explicit_length(s: int, gamma_max: int) -> int:
    return {ALL_REJECT: 1, CONFIDENCE: max(1, gamma_max // 2), ALL_ACCEPT: gamma_max}[s]


def _decision(s: int, policy: PolicyConfig) -> HybridDecision:
    if policy.policy_kind == "explicit":
        length = explicit_length(s, policy.gamma_max)
    else:
        length = policy.gamma_max
    return HybridDecision(s, _RULES[s], policy.epsilon, length)


def decide(policy: PolicyConfig, classifier, features, rollout=None) -> HybridDecision:
    """Pick the draft structure for the next round.

    ``classifier`` is anything with ``predict_proba``. ``rollout`` is an
    ``(n_accepted, gamma)`` pair describing the true future, used only by the
    oracle policy.
    """
    kind = policy.policy_kind
    if policy.forced_class is not None:
        return _decision(policy.forced_class, policy)
    if kind == "fixed":
        return _decision(ALL_ACCEPT, policy)
    if kind == "confidence":
        return _decision(CONFIDENCE, policy)
    if kind == "entropy":
        raise PolicyConfigError("entropy policy stops per token; it has no class decision")
    if kind == "oracle":
        if rollout is None:
            raise PolicyConfigError("oracle policy needs the true rollout")
        return _decision(label_rollout(*rollout), policy)
    if classifier is None:
        raise PolicyConfigError(f"policy {kind!r} needs a trained classifier")
    probs = np.asarray(classifier.predict_proba(features))
    return _decision(int(np.argmax(probs)), policy)


# -- training data ----------------------------------------------------------

@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    label: int
    n_accepted: int
    gamma: int
    prefix: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "features": [float(v) for v in self.features],
            "label": self.label,
            "n_accepted": self.n_accepted,
            "gamma": self.gamma,
            "prefix": list(self.prefix),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingExample":
        ex = cls(np.asarray(d["features"], dtype=np.float64), int(d["label"]),
                 int(d["n_accepted"]), int(d["gamma"]), tuple(d["prefix"]))
        if label_rollout(ex.n_accepted, ex.gamma) != ex.label:
            raise ValueError("label does not match the recorded rollout")
        return ex


def rollout(pair, prefix: list[int], gamma: int, rng) -> int:
    """Accepted count of one gamma-token speculative round from ``prefix``."""
    seq = list(prefix)
    toks, qs, ps = [], [], []
    for _ in range(gamma):
        q, cdf = pair.draft.lookup(seq)
        x = toylm.sample_from(q, rng, cdf)
        qs.append(q)
        ps.append(pair.target.lookup(seq)[0])
        toks.append(x)
        seq.append(x)
    return verify_sequence(toks, qs, ps, rng).n_accepted


def generate_examples(pair, n_per_class: int, gamma: int, rng, *, K=toylm.FEATURE_K,
                      noise_sigma=0.0, prefix_len=None, max_attempts=None):
    """Class-balanced rollout examples: rollouts are drawn until each class has its quota."""
    V = pair.vocab_size
    prefix_len = max(pair.target.order, 1) + 1 if prefix_len is None else prefix_len
    max_attempts = max_attempts or 400 * n_per_class
    buckets = {0: [], 1: [], 2: []}
    for _ in range(max_attempts):
        if all(len(b) >= n_per_class for b in buckets.values()):
            break
        prefix = [int(t) for t in rng.integers(0, V, size=prefix_len)]
        n = rollout(pair, prefix, gamma, rng)
        label = label_rollout(n, gamma)
        if len(buckets[label]) >= n_per_class:
            continue
        z = toylm.features(pair, prefix[:-1], prefix[-1], K, noise_sigma, rng)
        buckets[label].append(TrainingExample(z, label, n, gamma, tuple(prefix)))
    counts = {k: len(v) for k, v in buckets.items()}
    if min(counts.values()) < n_per_class:
        raise MissingClassError(counts)
    # interleave so files read in order stay balanced
    out = []
    for i in range(n_per_class):
        out += [buckets[0][i], buckets[1][i], buckets[2][i]]
    return out


def write_jsonl(examples, path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path) -> list[TrainingExample]:
    with open(path) as fh:
        return [TrainingExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def train_mlp(examples, epochs=20, batch=32, lr=5e-5, seed=0, **overrides) -> MLPClassifier:
    """Fit the 3-class predictor; ``examples`` is TrainingExamples or an (x, y) pair."""
    if isinstance(examples, tuple):
        x, y = examples
    else:
        x = np.vstack([ex.features for ex in examples])
        y = np.array([ex.label for ex in examples])
    y = np.asarray(y, dtype=np.int64)
    counts = Counter(int(v) for v in y)
    if any(counts.get(k, 0) == 0 for k in (0, 1, 2)):
        raise MissingClassError({k: counts.get(k, 0) for k in (0, 1, 2)})
    cfg = TrainConfig(epochs=epochs, batch=batch, lr=lr, seed=seed, **overrides)
    return fit(np.asarray(x, dtype=np.float64), y, 3, cfg)


def confusion_matrix(y_true, y_pred, n_classes=3) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm
