"""Discrete-event timing over engine traces, plus the stylized two-round process.

Each trace step lists ``(kind, units, phase)`` events. Phases of a step run
one after another; inside a phase every lane starts at the phase start and
runs its events back to back, and the phase lasts as long as its slowest
lane. Lanes: ``draft`` (draft events), ``target`` (verify events) and
``predictor`` (predict events).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import analytic
from .engines import VERIFICATION, metrics

LANES = ("draft", "target", "predictor")
LANE_OF = {"draft": "draft", "verify": "target", "predict": "predictor"}
SERIAL_ENGINES = ("ar", "sps", "adaedl")
PARALLEL_ENGINES = ("pearl", "specbranch")
TIMELINE_SCHEMA = "# schema specbranch-timeline/v1"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    t_draft: float = 1.0
    c: float = 10.0
    t_predict: float = 0.01
    t_comm: float = 0.0

    def __post_init__(self):
        if min(self.t_draft, self.t_predict, self.t_comm) < 0:
            raise ValueError("costs must be non-negative")
        if not self.c >= 1:
            raise ValueError("c must be >= 1")

    def duration(self, kind: str, units: float) -> float:
        if kind == "draft":
            return self.t_draft * units
        if kind == "verify":
            return self.c * self.t_draft * units + self.t_comm
        if kind == "predict":
            return self.t_predict * units
        raise ScheduleError(f"unknown event kind {kind!r}")


@dataclass
class Timeline:
    events: list = field(default_factory=list)  # (start, end, lane, kind, step)
    step_spans: list = field(default_factory=list)  # (start, end) per trace step
    wall_time: float = 0.0
    bubble_time: dict = field(default_factory=dict)

    def lane_events(self, lane):
        return [e for e in self.events if e[2] == lane]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(TIMELINE_SCHEMA + "\n")
        buf.write("start,end,lane,kind,step\n")
        for start, end, lane, kind, step in self.events:
            buf.write(f"{start:.10g},{end:.10g},{lane},{kind},{step}\n")
        return buf.getvalue()


def schedule(traces, cost: CostModel, engine_kind: str | None = None) -> Timeline:
    tl = Timeline()
    now = 0.0
    for step_idx, tr in enumerate(traces):
        step_start = now
        phases = {}
        for ev in tr.event_costs:
            if len(ev) != 3:
                raise ScheduleError(f"step {step_idx}: malformed event {ev!r}")
            kind, units, phase = ev
            if kind not in LANE_OF:
                raise ScheduleError(f"step {step_idx}: unknown event kind {kind!r}")
            if units < 0 or phase < 0:
                raise ScheduleError(f"step {step_idx}: negative units or phase in {ev!r}")
            phases.setdefault(phase, []).append((kind, units))
        for phase in sorted(phases):
            lanes_used = {LANE_OF[k] for k, u in phases[phase] if cost.duration(k, u) > 0}
            if engine_kind in SERIAL_ENGINES and len(lanes_used) > 1:
                raise ScheduleError(f"serial engine {engine_kind} overlaps lanes at step {step_idx}")
            lane_end = {}
            for kind, units in phases[phase]:
                lane = LANE_OF[kind]
                start = lane_end.get(lane, now)
                end = start + cost.duration(kind, units)
                lane_end[lane] = end
                tl.events.append((start, end, lane, kind, step_idx))
            now = max(lane_end.values(), default=now)
        tl.step_spans.append((step_start, now))
    tl.wall_time = max((e[1] for e in tl.events), default=0.0)
    for lane in LANES:
        evs = [e for e in tl.lane_events(lane) if e[1] > e[0]]
        if not evs:
            tl.bubble_time[lane] = 0.0
            continue
        span = max(e[1] for e in evs) - min(e[0] for e in evs)
        busy = sum(e[1] - e[0] for e in evs)
        tl.bubble_time[lane] = max(span - busy, 0.0)
    return tl


def per_token_latency(result, cost: CostModel, engine_kind: str | None = None) -> float:
    tl = schedule(result.traces, cost, engine_kind)
    n = result.totals["total_committed"]
    return tl.wall_time / n if n else float("inf")


def steady_state_latency(result, timeline: Timeline) -> float:
    """Time per committed token over branch stages that follow a branch stage.

    The final step is left out: its commit may be cut short by ``max_len``.
    """
    time = tokens = 0.0
    traces = result.traces
    for i in range(1, len(traces) - 1):
        if traces[i].mode == VERIFICATION and traces[i - 1].mode == VERIFICATION:
            start, end = timeline.step_spans[i]
            time += end - start
            tokens += len(traces[i].committed)
    if tokens == 0:
        raise ScheduleError("no consecutive branch stages to measure")
    return time / tokens


def trunc_geom_samples(alpha, gamma, size, rng) -> np.ndarray:
    """Accepted count per round under i.i.d. acceptance: min(successes before a failure, gamma)."""
    if alpha >= 1.0:
        return np.full(size, gamma, dtype=np.int64)
    g = rng.geometric(1.0 - alpha, size=size) - 1
    return np.minimum(g, gamma)


def _conditional_below(alpha, gamma, size, rng) -> np.ndarray:
    # inverse CDF of X | X < gamma: P(k) proportional to (1 - alpha) alpha^k
    if alpha <= 0.0 or alpha >= 1.0:
        # alpha = 1 never produces a short round; callers mask these draws
        return np.zeros(size, dtype=np.int64)
    u = rng.random(size)
    top = -np.expm1(gamma * np.log(alpha))  # 1 - alpha^gamma
    k = np.floor(np.log1p(-u * top) / np.log(alpha)).astype(np.int64)
    return np.clip(k, 0, gamma - 1)


def stylized_rollback_sim(alpha, gamma, c, t, n_rounds, rng, *, return_tokens=False):
    """Mean per-token latency of the two-round rollback process.

    Block = round one of ``gamma`` i.i.d. tokens. If all are accepted a
    second round adds a fresh truncated-geometric count; otherwise the retry
    contributes a draw of ``X | X < gamma``. Each block costs
    ``2 max(gamma t, c t)``.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    first = trunc_geom_samples(alpha, gamma, n_rounds, rng)
    full = first == gamma
    tokens = np.where(full, gamma + trunc_geom_samples(alpha, gamma, n_rounds, rng),
                      _conditional_below(alpha, gamma, n_rounds, rng))
    block = 2.0 * max(gamma * t, c * t)
    total_tokens = float(tokens.sum())
    latency = block * n_rounds / total_tokens if total_tokens else float("inf")
    if return_tokens:
        return latency, float(tokens.mean())
    return latency


def speedup_report(results: dict, cost: CostModel) -> list[dict]:
    """Per-engine medians of simulated tokens per unit time, speedup vs AR, M and RB."""
    rows = []
    for engine in sorted(results):
        runs = results[engine]
        rates, ms, rbs = [], [], []
        for res in runs:
            tl = schedule(res.traces, cost, engine)
            rates.append(res.totals["total_committed"] / tl.wall_time if tl.wall_time else 0.0)
            m = metrics(res)
            ms.append(m["M"])
            rbs.append(m["RB"])
        rate = float(np.median(rates))
        rows.append({
            "engine": engine,
            "n_runs": len(runs),
            "M": float(np.median(ms)),
            "RB": float(np.median(rbs)),
            "tokens_per_time": rate,
        })
    # baseline: measured AR rate when present, else one token per target forward
    ar_rate = next((r["tokens_per_time"] for r in rows if r["engine"] == "ar"),
                   1.0 / (cost.c * cost.t_draft + cost.t_comm))
    for row in rows:
        row["speedup"] = row["tokens_per_time"] / ar_rate
    return rows


def analytic_speedup_sps_full(gamma, c) -> float:
    """(gamma + 1) c / (gamma + c): serial SD at full acceptance against AR."""
    return c / analytic.t_sd(analytic.LatencyParams(gamma, c))
