"""Shared test fixtures: scripted randomness, scripted classifier, word-level toy pair."""
from __future__ import annotations

import itertools

import numpy as np

from specbranch import hrad, toylm
from specbranch.engines import run_autoregressive

N_FILL = 10


class ConstantStream:
    """Random source returning one fixed value; spawned children are itself."""

    def __init__(self, value=0.5):
        self.value = value

    def random(self, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)

    def spawn(self, n):
        return [self] * n


class ScriptedClassifier:
    """predict_proba returns one-hot rows following a fixed class script."""

    def __init__(self, classes):
        self.classes = list(classes)
        self.calls = 0

    def predict_proba(self, x):
        s = self.classes[self.calls]
        self.calls += 1
        out = np.zeros(3)
        out[s] = 1.0
        return out


WORDS = ("the only way to be do great work is love stay word what you efforts devote put "
         "give into your whole project research but and").split()


class WordVocab:
    """Filler tokens on both sides of the words so any chosen word can sit on u = 0.5."""

    def __init__(self, words=WORDS):
        self.names = [f"<lo{i}>" for i in range(N_FILL)] + list(words) + [f"<hi{i}>" for i in range(N_FILL)]
        self.id = {w: i for i, w in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def ids(self, text):
        return [self.id[w] for w in text.split()]

    def words(self, ids):
        return " ".join(self.names[i] for i in ids)

    def row(self, chosen, conf, alts=None):
        """Draft row: ``chosen`` holds ``conf`` and straddles 0.5 under inverse-CDF sampling."""
        alts = alts or {}
        v = np.zeros(len(self))
        v[self.id[chosen]] = conf
        for w, m in alts.items():
            v[self.id[w]] = m
        below = 0.5 - conf / 2 - sum(m for w, m in alts.items() if self.id[w] < self.id[chosen])
        above = 1.0 - v.sum() - below
        assert below >= 0 and above >= -1e-12, (chosen, below, above)
        v[:N_FILL] += below / N_FILL
        v[-N_FILL:] += max(above, 0.0) / N_FILL
        return v

    def point(self, masses):
        v = np.zeros(len(self))
        for w, m in masses.items():
            v[self.id[w]] = m
        return v / v.sum()


# context (two previous words) -> (chosen, confidence, alternatives)
SCENARIO_DRAFT = {
    "the only": ("way", 0.9, {}),
    "only way": ("to", 0.9, {}),
    "way to": ("be", 0.3, {"do": 0.25}),
    "to do": ("great", 0.9, {}),
    "do great": ("work", 0.9, {}),
    "great work": ("is", 0.9, {}),
    "work is": ("to", 0.9, {}),
    "is to": ("word", 0.2, {"love": 0.18, "stay": 0.15}),
    "to love": ("what", 0.3, {"the": 0.25}),
    "love what": ("you", 0.9, {}),
    "what you": ("do", 0.9, {}),
    "love the": ("efforts", 0.9, {}),
    "the efforts": ("you", 0.9, {}),
    "efforts you": ("devote", 0.2, {"put": 0.18, "give": 0.15}),
    "you put": ("into", 0.9, {}),
    "put into": ("your", 0.9, {}),
    "into your": ("whole", 0.9, {}),
    "your whole": ("project", 0.9, {}),
    "whole project": ("but", 0.3, {"and": 0.25}),
}

# target rows that differ from the draft row
SCENARIO_TARGET = {
    "way to": {"do": 0.95, "be": 0.05},
    "is to": {"love": 0.95, "word": 0.05},
    "to love": {"the": 0.95, "what": 0.05},
    "efforts you": {"put": 0.95, "devote": 0.05},
    "your whole": {"research": 0.95, "project": 0.05},
}

SCENARIO_CLASSES = (1, 2, 0, 1, 2, 2)


def word_pair(draft_spec=SCENARIO_DRAFT, target_spec=SCENARIO_TARGET, c=4.0):
    vocab = WordVocab()
    q_table, p_table = {}, {}
    for ctx, (w, conf, alts) in draft_spec.items():
        key = tuple(vocab.ids(ctx))
        q_table[key] = vocab.row(w, conf, alts)
        p_table[key] = q_table[key]
    for ctx, masses in target_spec.items():
        p_table[tuple(vocab.ids(ctx))] = vocab.point(masses)
    fb = toylm.uniform(len(vocab))
    pair = toylm.ToyModelPair(
        toylm.ToyModel(len(vocab), 2, p_table, fb),
        toylm.ToyModel(len(vocab), 2, q_table, fb),
        speed_ratio_c=c, intended_alpha=0.5,
    )
    return vocab, pair


def scenario_policy():
    return hrad.PolicyConfig(epsilon=0.35, lam=1.0, gamma_max=4, policy_kind="hybrid")


# -- exact sequence law of the target model -----------------------------------

def exact_sequence_dist(pair, prompt, length):
    """Probability of every length-``length`` continuation under the target."""
    V = pair.vocab_size
    out = {}
    for seq in itertools.product(range(V), repeat=length):
        ctx = list(prompt)
        prob = 1.0
        for tok in seq:
            prob *= pair.target.lookup(ctx)[0][tok]
            ctx.append(tok)
        out[seq] = prob
    return out


def empirical_tv(engine_fn, pair, prompt, length, n, seed):
    """TV distance between an engine's output law and the exact target law."""
    exact = exact_sequence_dist(pair, prompt, length)
    counts = {}
    root = np.random.SeedSequence(seed)
    for child in root.spawn(n):
        out = engine_fn(np.random.default_rng(child))
        key = tuple(out[len(prompt):])
        counts[key] = counts.get(key, 0) + 1
    keys = set(exact) | set(counts)
    return 0.5 * sum(abs(exact.get(k, 0.0) - counts.get(k, 0) / n) for k in keys)


def small_pair(alpha=0.5, seed=3, V=4):
    return toylm.make_pair(V, 1, alpha, 4.0, seed)


def _ar(pair, prompt, length):
    return lambda rng: run_autoregressive(pair, prompt, len(prompt) + length, rng).output


def blobs(n_per_class, rng, d=40, sigma=0.1, shuffle_labels=False):
    """Three Gaussian blobs with unit-scale centers; optional label shuffle."""
    centers = np.random.default_rng(1234).standard_normal((3, d))
    x = np.vstack([centers[k] + sigma * rng.standard_normal((n_per_class, d)) for k in range(3)])
    y = np.repeat(np.arange(3), n_per_class)
    if shuffle_labels:
        y = rng.permutation(y)
    return x, y
