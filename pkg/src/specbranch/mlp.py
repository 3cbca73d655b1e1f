"""Small numpy MLP classifier: affine/ReLU stack, softmax head, AdamW training."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

WEIGHTS_FORMAT = "specbranch-mlp/v1"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MLPClassifier:
    """Layers ``sizes[0] -> ... -> sizes[-1]`` with ReLU between affine maps.

    Inputs are standardized with the stored ``mean``/``scale`` before the
    first layer.
    """

    def __init__(self, sizes, rng=None, params=None, mean=None, scale=None):
        self.sizes = tuple(int(s) for s in sizes)
        n_in = self.sizes[0]
        if params is None:
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                # He init for the ReLU stack
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
                params += [w, np.zeros(fan_out)]
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self.mean = np.zeros(n_in) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones(n_in) if scale is None else np.asarray(scale, dtype=np.float64)
        self.final_loss = float("nan")

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def _forward(self, x):
        h = (x - self.mean) / self.scale
        acts = [h]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def logits(self, x) -> np.ndarray:
        return self._forward(np.atleast_2d(x))[-1]

    def predict_proba(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = softmax(self.logits(x))
        return out[0] if x.ndim == 1 else out

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)

    def loss_and_grads(self, x, y, smoothing=0.0):
        """Mean label-smoothed cross-entropy and its gradient per parameter."""
        acts = self._forward(x)
        probs = softmax(acts[-1])
        n, k = probs.shape
        target = np.full((n, k), smoothing / k)
        target[np.arange(n), y] += 1.0 - smoothing
        loss = float(-(target * np.log(np.clip(probs, 1e-300, None))).sum() / n)

        grads = [None] * len(self.params)
        delta = (probs - target) / n
        n_layers = len(self.params) // 2
        for i in range(n_layers - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[2 * i].T) * (acts[i] > 0)
        return loss, grads

    def to_json(self) -> str:
        doc = {
            "format": WEIGHTS_FORMAT,
            "sizes": list(self.sizes),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "final_loss": self.final_loss,
            "params": [p.tolist() for p in self.params],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MLPClassifier":
        doc = json.loads(text)
        if doc.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"unsupported weight file format {doc.get('format')!r}")
        clf = cls(doc["sizes"], params=doc["params"], mean=doc["mean"], scale=doc["scale"])
        clf.final_loss = float(doc["final_loss"])
        return clf


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 32
    lr: float = 5e-5
    weight_decay: float = 1e-4
    smoothing: float = 0.1
    clip_norm: float = 1.0
    hidden: tuple = (256, 64)
    seed: int = 0
    betas: tuple = field(default=(0.9, 0.999))
    adam_eps: float = 1e-8


def fit(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: TrainConfig) -> MLPClassifier:
    """Minibatch AdamW with decoupled weight decay and global-norm clipping."""
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    clf = MLPClassifier((x.shape[1], *cfg.hidden, n_classes), rng, mean=mean, scale=scale)

    b1, b2 = cfg.betas
    m = [np.zeros_like(p) for p in clf.params]
    v = [np.zeros_like(p) for p in clf.params]
    step = 0
    n = len(y)
    loss = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, grads = clf.loss_and_grads(x[idx], y[idx], cfg.smoothing)
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if cfg.clip_norm and norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
            step += 1
            for i, g in enumerate(grads):
                p = clf.params[i]
                p *= 1.0 - cfg.lr * cfg.weight_decay
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mhat = m[i] / (1 - b1 ** step)
                vhat = v[i] / (1 - b2 ** step)
                p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    clf.final_loss, _ = clf.loss_and_grads(x, y, cfg.smoothing)
    return clf
