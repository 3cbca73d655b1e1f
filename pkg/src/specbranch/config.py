"""Scenario configuration: a sectioned INI document, JSON accepted too."""
from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, fields

from .engines import ENGINES


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in _split(text))


def _ints(text):
    return tuple(int(v) for v in _split(text))


def _strs(text):
    return tuple(_split(text))


def _split(text):
    if isinstance(text, (list, tuple)):
        return [str(v).strip() for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# field -> (section, parser)
_SCHEMA = {
    "vocab_size": ("scenario", int),
    "markov_order": ("scenario", int),
    "intended_alpha": ("scenario", float),
    "c": ("scenario", float),
    "sharpness": ("scenario", float),
    "easy_fraction": ("scenario", float),
    "seed": ("scenario", int),
    "engines": ("scenario", _strs),
    "n_runs": ("scenario", int),
    "max_len": ("scenario", int),
    "prompt": ("scenario", _ints),
    "out": ("scenario", str),
    "gamma": ("policy", int),
    "gamma_max": ("policy", int),
    "epsilon": ("policy", float),
    "lam": ("policy", float),
    "k_max": ("policy", int),
    "policy": ("policy", str),
    "mode": ("policy", str),
    "rule": ("policy", str),
    "classifier": ("policy", str),
    "t_draft": ("cost", float),
    "t_predict": ("cost", float),
    "t_comm": ("cost", float),
    "train_per_class": ("train", int),
    "train_epochs": ("train", int),
    "train_batch": ("train", int),
    "train_lr": ("train", float),
    "train_seed": ("train", int),
    "holdout_fraction": ("train", float),
    "accuracy_floor": ("train", float),
    "feature_noise": ("train", float),
    "alphas": ("analyze", _floats),
    "gammas": ("analyze", _ints),
    "cs": ("analyze", _floats),
    "optimal_gamma_max": ("analyze", int),
}


@dataclass(frozen=True)
class ScenarioConfig:
    vocab_size: int = 8
    markov_order: int = 1
    intended_alpha: float = 0.5
    c: float = 4.0
    sharpness: float = 6.0
    easy_fraction: float = 0.0
    seed: int = 0
    engines: tuple = ("ar", "sps", "pearl", "specbranch")
    n_runs: int = 10
    max_len: int = 64
    prompt: tuple = (0,)
    out: str = "out"
    gamma: int = 4
    gamma_max: int = 4
    epsilon: float = 0.2
    lam: float = 1.0
    k_max: int = 6
    policy: str = "oracle"
    mode: str = "posterior"
    rule: str = "argmax_p"
    classifier: str = ""
    t_draft: float = 1.0
    t_predict: float = 0.01
    t_comm: float = 0.0
    train_per_class: int = 300
    train_epochs: int = 20
    train_batch: int = 32
    train_lr: float = 5e-5
    train_seed: int = 0
    holdout_fraction: float = 0.2
    accuracy_floor: float = 0.0
    feature_noise: float = 0.0
    alphas: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    gammas: tuple = tuple(range(1, 21))
    cs: tuple = (4.0, 10.0)
    optimal_gamma_max: int = 32

    def __post_init__(self):
        checks = [
            (self.vocab_size >= 2, "vocab_size must be >= 2"),
            (self.markov_order >= 0, "markov_order must be >= 0"),
            (0.0 < self.intended_alpha < 1.0, "intended_alpha must lie in (0, 1)"),
            (self.c >= 1, "c must be >= 1"),
            (0.0 <= self.easy_fraction <= 1.0, "easy_fraction must lie in [0, 1]"),
            (self.gamma >= 1 and self.gamma_max >= 1, "gamma and gamma_max must be >= 1"),
            (0.0 <= self.epsilon < 1.0, "epsilon must lie in [0, 1)"),
            (self.lam > 0, "lam must be > 0"),
            (self.k_max >= 1, "k_max must be >= 1"),
            (self.n_runs >= 1, "n_runs must be >= 1"),
            (len(self.prompt) >= 1, "prompt needs at least one token"),
            (all(0 <= t < self.vocab_size for t in self.prompt), "prompt tokens outside vocabulary"),
            (self.max_len >= len(self.prompt), "max_len must be >= prompt length"),
            (self.policy in ("hybrid", "oracle", "confidence", "fixed"), f"unknown policy {self.policy!r}"),
            (self.mode in ("posterior", "apriori"), f"unknown mode {self.mode!r}"),
            (self.rule in ("argmax_p", "argmax_r"), f"unknown rule {self.rule!r}"),
            (min(self.t_draft, self.t_predict, self.t_comm) >= 0, "costs must be >= 0"),
            (0.0 < self.holdout_fraction < 1.0, "holdout_fraction must lie in (0, 1)"),
            (self.train_per_class >= 1 and self.train_epochs >= 1 and self.train_batch >= 1,
             "training sizes must be >= 1"),
            (all(0.0 < a <= 1.0 for a in self.alphas), "alphas must lie in (0, 1]"),
            (all(g >= 1 for g in self.gammas), "gammas must be >= 1"),
            (all(c >= 1 for c in self.cs), "cs must be >= 1"),
            (self.optimal_gamma_max >= 1, "optimal_gamma_max must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        unknown = [e for e in self.engines if e not in ENGINES]
        if unknown:
            raise ConfigError(f"unknown engines {unknown}; choose from {list(ENGINES)}")

    def replace(self, **changes) -> "ScenarioConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return ScenarioConfig(**data)

    # -- serialization

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, (section, _) in _SCHEMA.items():
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, _format(getattr(self, name)))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {}
        for name, (section, _) in _SCHEMA.items():
            value = getattr(self, name)
            doc.setdefault(section, {})[name] = list(value) if isinstance(value, tuple) else value
        return json.dumps(doc, sort_keys=True, indent=2)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _from_sections(sections: dict) -> ScenarioConfig:
    values = {}
    for section, items in sections.items():
        if not isinstance(items, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, raw in items.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            want, parse = _SCHEMA[key]
            if want != section:
                raise ConfigError(f"key {key!r} belongs in section [{want}], not [{section}]")
            try:
                values[key] = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return ScenarioConfig(**values)


def parse_config(text: str) -> ScenarioConfig:
    """Parse INI text, or JSON when the document starts with ``{``."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("JSON config must be an object of sections")
        return _from_sections(doc)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return _from_sections({s: dict(parser.items(s)) for s in parser.sections()})


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
