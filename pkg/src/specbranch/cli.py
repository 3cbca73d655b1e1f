"""Command-line experiment runner.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Set SPECBRANCH_LOG (e.g. DEBUG, INFO) for log verbosity.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import analytic, engines, hrad, pipesim, svgplot, toylm
from .config import ConfigError, ScenarioConfig, load_config
from .mlp import MLPClassifier

log = logging.getLogger("specbranch")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRID_SCHEMA = "# schema specbranch-latency-grid/v1"
OPTIMAL_SCHEMA = "# schema specbranch-optimal-gamma/v1"
SUMMARY_SCHEMA = "# schema specbranch-summary/v1"
GRID_HEADER = "alpha,gamma,c,t_sd,t_psd_ideal,t_psd_rollback,gain_factor"


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def run_seed(seed: int, run_index: int) -> int:
    """seed XOR a hash of the run index, so adding runs leaves earlier seeds alone."""
    digest = hashlib.blake2b(f"run:{run_index}".encode(), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "big")) & (2 ** 63 - 1)


def atomic_write(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def _g(v) -> str:
    return f"{v:.10g}"


# -- commands -------------------------------------------------------------------

def cmd_analyze(cfg: ScenarioConfig, out: Path) -> list[Path]:
    lines = [GRID_SCHEMA, GRID_HEADER]
    for alpha in cfg.alphas:
        for gamma in cfg.gammas:
            for c in cfg.cs:
                prm = analytic.LatencyParams(gamma, c, cfg.t_draft, alpha)
                lines.append(",".join(_g(v) for v in (
                    alpha, gamma, c, analytic.t_sd(prm), analytic.t_psd_ideal(prm),
                    analytic.t_psd_rollback(prm), analytic.gain_factor(alpha, gamma))))
    opt = [OPTIMAL_SCHEMA, "alpha,c,gamma_star,latency_star"]
    for alpha in cfg.alphas:
        for c in cfg.cs:
            g, lat = analytic.optimal_gamma(alpha, c, cfg.t_draft, cfg.optimal_gamma_max)
            opt.append(",".join((_g(alpha), _g(c), str(g), _g(lat))))
    paths = [out / "latency_grid.csv", out / "optimal_gamma.csv"]
    atomic_write(paths[0], "\n".join(lines) + "\n")
    atomic_write(paths[1], "\n".join(opt) + "\n")
    return paths


def _make_pair(cfg: ScenarioConfig):
    try:
        return toylm.make_pair(cfg.vocab_size, cfg.markov_order, cfg.intended_alpha, cfg.c,
                               cfg.seed, sharpness=cfg.sharpness, easy_fraction=cfg.easy_fraction)
    except toylm.CalibrationError as exc:
        raise ConfigError(f"scenario cannot be calibrated: {exc}") from None


def _load_classifier(cfg: ScenarioConfig, base: Path | None):
    if not cfg.classifier:
        raise ConfigError("policy 'hybrid' needs a classifier path in [policy] classifier")
    path = Path(cfg.classifier)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.is_file():
        raise ConfigError(f"classifier file not found: {path}")
    return MLPClassifier.from_json(path.read_text())


def _run_engine(name, pair, cfg, classifier, rng):
    prompt = list(cfg.prompt)
    if name == "ar":
        return engines.run_autoregressive(pair, prompt, cfg.max_len, rng)
    if name == "sps":
        return engines.run_sps(pair, prompt, cfg.max_len, cfg.gamma, rng)
    if name == "adaedl":
        pol = hrad.PolicyConfig(cfg.epsilon, cfg.lam, cfg.gamma_max, "entropy")
        return engines.run_adaedl(pair, prompt, cfg.max_len, pol, rng)
    if name == "pearl":
        return engines.run_pearl(pair, prompt, cfg.max_len, cfg.gamma, rng)
    pol = hrad.PolicyConfig(cfg.epsilon, cfg.lam, cfg.gamma_max, cfg.policy)
    return engines.run_specbranch(pair, prompt, cfg.max_len, pol, classifier, cfg.k_max, rng,
                                  cfg.mode, rule=cfg.rule)


def cmd_simulate(cfg: ScenarioConfig, out: Path, base: Path | None = None) -> list[Path]:
    pair = _make_pair(cfg)
    classifier = None
    if "specbranch" in cfg.engines and cfg.policy == "hybrid":
        classifier = _load_classifier(cfg, base)
    cost = pipesim.CostModel(cfg.t_draft, cfg.c, cfg.t_predict, cfg.t_comm)
    results, written = {}, []
    for name in cfg.engines:
        runs = []
        for i in range(cfg.n_runs):
            rng = np.random.default_rng(run_seed(cfg.seed, i))
            try:
                res = _run_engine(name, pair, cfg, classifier, rng)
            except (ConfigError, hrad.PolicyConfigError):
                raise
            except Exception as exc:
                raise RuntimeFailure(f"engine {name} failed on run {i}: {exc!r}") from exc
            path = out / "traces" / name / f"run_{i:04d}.jsonl"
            atomic_write(path, res.to_jsonl())
            written.append(path)
            runs.append(res)
        results[name] = runs
        tl = pipesim.schedule(runs[0].traces, cost, name)
        tpath = out / f"timeline_{name}.csv"
        atomic_write(tpath, tl.to_csv())
        written.append(tpath)
    rows = pipesim.speedup_report(results, cost)
    lines = [SUMMARY_SCHEMA, "engine,n_runs,M,RB,tokens_per_time,speedup"]
    for r in rows:
        lines.append(",".join((r["engine"], str(r["n_runs"]), _g(r["M"]), _g(r["RB"]),
                               _g(r["tokens_per_time"]), _g(r["speedup"]))))
    spath = out / "summary.csv"
    atomic_write(spath, "\n".join(lines) + "\n")
    written.append(spath)
    return written


def _split(examples, fraction, seed):
    order = np.random.default_rng(seed).permutation(len(examples))
    n_hold = max(1, int(round(fraction * len(examples))))
    hold = [examples[i] for i in order[:n_hold]]
    train = [examples[i] for i in order[n_hold:]]
    return train, hold


def train_report(y_true, y_pred) -> dict:
    cm = hrad.confusion_matrix(y_true, y_pred)
    per_class = {}
    for k in range(3):
        tp = int(cm[k, k])
        pred, true = int(cm[:, k].sum()), int(cm[k, :].sum())
        per_class[str(k)] = {
            "precision": tp / pred if pred else 0.0,
            "recall": tp / true if true else 0.0,
            "support": true,
        }
    return {
        "accuracy": float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0,
        "confusion_matrix": cm.tolist(),
        "per_class": per_class,
    }


def cmd_train_hrad(cfg: ScenarioConfig, out: Path, trace_files=()) -> tuple[dict, list[Path]]:
    written = []
    if trace_files:
        examples = []
        for path in trace_files:
            try:
                examples += hrad.read_jsonl(path)
            except OSError as exc:
                raise ConfigError(f"cannot read rollout file {path}: {exc.strerror}") from None
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"malformed rollout file {path}: {exc}") from None
    else:
        pair = _make_pair(cfg)
        rng = np.random.default_rng([cfg.seed, 11])
        examples = hrad.generate_examples(pair, cfg.train_per_class, cfg.gamma_max, rng,
                                          noise_sigma=cfg.feature_noise)
        rpath = out / "rollouts.jsonl"
        atomic_write(rpath, "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in examples))
        written.append(rpath)
    counts = {k: sum(1 for e in examples if e.label == k) for k in (0, 1, 2)}
    if min(counts.values()) == 0:
        raise hrad.MissingClassError(counts)
    train, hold = _split(examples, cfg.holdout_fraction, cfg.train_seed)
    clf = hrad.train_mlp(train, epochs=cfg.train_epochs, batch=cfg.train_batch,
                         lr=cfg.train_lr, seed=cfg.train_seed)
    x_hold = np.vstack([e.features for e in hold])
    y_hold = np.array([e.label for e in hold])
    report = train_report(y_hold, clf.predict(x_hold))
    report.update({"n_train": len(train), "n_holdout": len(hold), "class_counts": counts,
                   "final_train_loss": clf.final_loss, "accuracy_floor": cfg.accuracy_floor})
    wpath, rpath = out / "hrad_weights.json", out / "hrad_report.json"
    atomic_write(wpath, clf.to_json())
    atomic_write(rpath, json.dumps(report, sort_keys=True, indent=2) + "\n")
    written += [wpath, rpath]
    return report, written


def cmd_plot(csv_path, kind: str, out_path=None) -> Path:
    csv_path = Path(csv_path)
    try:
        text = csv_path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {csv_path}: {exc.strerror}") from None
    try:
        svg = svgplot.render(text, kind)
    except svgplot.PlotError as exc:
        raise ConfigError(str(exc)) from None
    target = Path(out_path) if out_path else csv_path.with_name(f"{csv_path.stem}_{kind}.svg")
    atomic_write(target, svg)
    return target


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="scenario file (INI, or JSON)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--engines", help="comma-separated engine list")

    parser = _Parser(prog="specbranch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("analyze", parents=[common], help="closed-form latency grids")
    sub.add_parser("simulate", parents=[common], help="run engines and summarize")
    tr = sub.add_parser("train-hrad", parents=[common], help="train the draft-structure classifier")
    tr.add_argument("traces", nargs="*", help="rollout JSONL files; generated when omitted")
    pl = sub.add_parser("plot", help="render a CSV as SVG")
    pl.add_argument("csv")
    pl.add_argument("--kind", required=True, choices=sorted(svgplot.RENDERERS))
    pl.add_argument("--out", help="SVG path")
    sub.add_parser("scenario-init", parents=[common], help="write a default scenario file")
    return parser


def _resolve(args) -> tuple[ScenarioConfig, Path | None]:
    base = None
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
    else:
        cfg = ScenarioConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "engines", None):
        changes["engines"] = tuple(e.strip() for e in args.engines.split(",") if e.strip())
    if getattr(args, "out", None):
        changes["out"] = args.out
    return (cfg.replace(**changes) if changes else cfg), base


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPECBRANCH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "plot":
            print(cmd_plot(args.csv, args.kind, args.out))
            return EXIT_OK
        cfg, base = _resolve(args)
        out = Path(cfg.out)
        if args.command == "analyze":
            paths = cmd_analyze(cfg, out)
        elif args.command == "simulate":
            paths = cmd_simulate(cfg, out, base)
        elif args.command == "train-hrad":
            report, paths = cmd_train_hrad(cfg, out, args.traces)
            print(json.dumps({k: report[k] for k in ("accuracy", "confusion_matrix")}, sort_keys=True))
            if report["accuracy"] < cfg.accuracy_floor:
                print(f"held-out accuracy {report['accuracy']:.4f} below floor {cfg.accuracy_floor}",
                      file=sys.stderr)
                return EXIT_RUNTIME
        else:
            path = out / "scenario.ini"
            atomic_write(path, cfg.to_ini())
            paths = [path]
        for p in paths:
            log.info("wrote %s", p)
        print("\n".join(str(p) for p in paths[-3:]))
        return EXIT_OK
    except UsageError as exc:
        print(f"specbranch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, hrad.PolicyConfigError, hrad.MissingClassError) as exc:
        print(f"specbranch: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"specbranch: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # last resort keeps the exit-code contract
        print(f"specbranch: runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
