"""Self-contained SVG charts rendered from the package's CSV outputs."""
from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 640, 400, 50
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

REQUIRED = {
    "latency_curves": ("alpha", "gamma", "c", "t_psd_rollback"),
    "gantt": ("start", "end", "lane", "kind"),
    "rollback_bars": ("engine", "RB"),
}


class PlotError(ValueError):
    pass


def read_csv(text: str) -> list[dict]:
    """Rows of a CSV whose leading ``#`` lines are schema comments."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(lines) < 2:
        raise PlotError("CSV has no data rows")
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def check_columns(rows, kind):
    if kind not in REQUIRED:
        raise PlotError(f"unknown plot kind {kind!r}; choose from {sorted(REQUIRED)}")
    missing = [c for c in REQUIRED[kind] if c not in rows[0]]
    if missing:
        raise PlotError(f"CSV lacks columns for {kind}: {', '.join(missing)}")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _frame(title, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>\n'
        + "".join(body) + "</svg>\n"
    )


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) * (b - a) / span


def latency_curves(rows) -> str:
    """One polyline per alpha (latency vs gamma), for the first c in the file."""
    check_columns(rows, "latency_curves")
    c0 = rows[0]["c"]
    rows = [r for r in rows if r["c"] == c0]
    series = {}
    for r in rows:
        series.setdefault(r["alpha"], []).append((float(r["gamma"]), float(r["t_psd_rollback"])))
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    sx = _scale(min(xs), max(xs), PAD, WIDTH - PAD)
    sy = _scale(min(ys), max(ys), HEIGHT - PAD, PAD)
    body = [f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>\n',
            f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>\n']
    for i, (alpha, pts) in enumerate(series.items()):
        pts.sort()
        coords = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in pts)
        color = PALETTE[i % len(PALETTE)]
        body.append(f'<polyline class="series" data-alpha="{escape(alpha)}" fill="none" '
                    f'stroke="{color}" points="{coords}"/>\n')
        body.append(f'<text x="{WIDTH - PAD + 4}" y="{_num(sy(pts[-1][1]))}" font-size="9" '
                    f'fill="{color}">a={escape(alpha)}</text>\n')
    return _frame(f"per-token latency vs gamma (c={c0})", body)


def gantt(rows) -> str:
    """One horizontal band per lane with a rectangle per event."""
    check_columns(rows, "gantt")
    lanes = []
    for r in rows:
        if r["lane"] not in lanes:
            lanes.append(r["lane"])
    end = max(float(r["end"]) for r in rows)
    sx = _scale(0.0, end, PAD, WIDTH - PAD)
    band = (HEIGHT - 2 * PAD) / len(lanes)
    colors = {"draft": "#1f77b4", "verify": "#d62728", "predict": "#2ca02c"}
    body = []
    for i, lane in enumerate(lanes):
        y = PAD + i * band
        body.append(f'<g class="lane" data-lane="{escape(lane)}">\n')
        body.append(f'<text x="4" y="{_num(y + band / 2)}" font-size="10">{escape(lane)}</text>\n')
        for r in rows:
            if r["lane"] != lane:
                continue
            x0, x1 = sx(float(r["start"])), sx(float(r["end"]))
            if x1 <= x0:
                continue
            body.append(f'<rect x="{_num(x0)}" y="{_num(y + 2)}" width="{_num(x1 - x0)}" '
                        f'height="{_num(band - 4)}" fill="{colors.get(r["kind"], "#7f7f7f")}" '
                        f'stroke="white" stroke-width="0.5"/>\n')
        body.append("</g>\n")
    return _frame("timeline", body)


def rollback_bars(rows) -> str:
    check_columns(rows, "rollback_bars")
    n = len(rows)
    bar = (WIDTH - 2 * PAD) / n
    sy = _scale(0.0, 1.0, HEIGHT - PAD, PAD)
    body = [f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>\n']
    for i, r in enumerate(rows):
        rb = min(max(float(r["RB"]), 0.0), 1.0)
        x = PAD + i * bar
        body.append(f'<rect class="bar" x="{_num(x + 4)}" y="{_num(sy(rb))}" width="{_num(bar - 8)}" '
                    f'height="{_num(HEIGHT - PAD - sy(rb))}" fill="{PALETTE[i % len(PALETTE)]}"/>\n')
        body.append(f'<text x="{_num(x + bar / 2)}" y="{HEIGHT - PAD + 14}" font-size="10" '
                    f'text-anchor="middle">{escape(r["engine"])}</text>\n')
    return _frame("rollback rate by engine", body)


RENDERERS = {"latency_curves": latency_curves, "gantt": gantt, "rollback_bars": rollback_bars}


def render(csv_text: str, kind: str) -> str:
    if kind not in RENDERERS:
        raise PlotError(f"unknown plot kind {kind!r}; choose from {sorted(RENDERERS)}")
    return RENDERERS[kind](read_csv(csv_text))
