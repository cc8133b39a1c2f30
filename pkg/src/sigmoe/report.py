"""Sweep outputs: records CSV, summary JSON and a self-contained log-log SVG chart."""
from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

from .experiments import Record, aggregate
from .model import ContractError

RECORD_FIELDS = ("scenario", "gating", "n", "trial", "loss_kind", "loss", "objective", "seconds", "expert")

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def write_records(records, path):
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_FIELDS)
            for r in records:
                w.writerow([r.scenario, r.gating, r.n, r.trial, r.loss_kind, _fmt(r.loss),
                            _fmt(r.objective), _fmt(r.seconds), r.expert])
    except OSError as exc:
        raise OSError(f"cannot write records to {path}: {exc}") from exc


def read_records(path):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read records from {path}: {exc}") from exc
    out = []
    for row in rows:
        sec = row.get("seconds") or ""
        out.append(Record(row["scenario"], row["gating"], row.get("expert", ""), int(row["n"]),
                          int(row["trial"]), row["loss_kind"], float(row["loss"]),
                          float(row["objective"]), float(sec) if sec else None))
    return out


def headline_kinds(records):
    """First loss kind seen per curve; sweeps write the headline loss first."""
    kinds = {}
    for r in records:
        kinds.setdefault(f"{r.gating}-{r.expert}", r.loss_kind)
    return kinds


def summary_dict(summaries, scenario=None, config=None):
    curves = [s.to_dict() for _, s in sorted(summaries.items())]
    out = {"scenario": scenario, "curves": curves}
    if config is not None:
        out["config"] = config
    return out


# ---------------------------------------------------------------------------
# SVG

def render_svg(summaries, title="", width=640, height=420):
    """Log-log chart: mean markers, +-3 std error bars and one dashed trend line per curve."""
    curves = list(summaries)
    if not curves:
        raise ContractError("nothing to plot")
    left, right, top, bottom = 70, 190, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [n for s in curves for n in s.ns]
    ys = [m for s in curves for m in s.means if m > 0]
    ys += [m + 3 * sd for s in curves for m, sd in zip(s.means, s.stds) if m > 0]
    ys += [m - 3 * sd for s in curves for m, sd in zip(s.means, s.stds) if m - 3 * sd > 0]
    if not ys:
        raise ContractError("no positive losses to plot")
    x0, x1 = math.floor(math.log10(min(xs))), math.ceil(math.log10(max(xs)))
    y0, y1 = math.floor(math.log10(min(ys))), math.ceil(math.log10(max(ys)))
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)

    def px(n):
        return left + (math.log10(n) - x0) / (x1 - x0) * pw

    def py(v):
        v = max(v, 10.0 ** y0)
        return top + (y1 - math.log10(v)) / (y1 - y0) * ph

    el = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
          f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
          f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
          f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
          f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for e in range(x0, x1 + 1):
        x = px(10.0 ** e)
        el.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="black"/>')
        el.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">1e{e}</text>')
    for e in range(y0, y1 + 1):
        y = py(10.0 ** e)
        el.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        el.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    el.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">sample size n</text>')
    el.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
              f'transform="rotate(-90 16 {top + ph / 2:.1f})">Voronoi loss</text>')
    for k, s in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        g = [f'<g class="curve" data-label="{_esc(s.label)}">']
        pts = [(px(n), py(m)) for n, m in zip(s.ns, s.means) if m > 0]
        if len(pts) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            g.append(f'<polyline class="mean" points="{path}" fill="none" stroke="{color}"/>')
        for n, m, sd in zip(s.ns, s.means, s.stds):
            if not m > 0:
                continue
            x = px(n)
            g.append(f'<line class="errorbar" x1="{x:.1f}" y1="{py(m - 3 * sd):.1f}" x2="{x:.1f}" '
                     f'y2="{py(m + 3 * sd):.1f}" stroke="{color}"/>')
            g.append(f'<circle class="marker" cx="{x:.1f}" cy="{py(m):.1f}" r="3" fill="{color}"/>')
        if s.slope is not None:
            na, nb = min(s.ns), max(s.ns)
            fa = math.exp(s.slope.intercept) * na ** s.slope.slope
            fb = math.exp(s.slope.intercept) * nb ** s.slope.slope
            g.append(f'<line class="trend" x1="{px(na):.1f}" y1="{py(fa):.1f}" x2="{px(nb):.1f}" '
                     f'y2="{py(fb):.1f}" stroke="{color}" stroke-dasharray="6,4"/>')
        ly = top + 14 + 34 * k
        lx = left + pw + 12
        slope = f"slope {s.slope.slope:.2f}" if s.slope is not None else "slope n/a"
        g.append(f'<circle cx="{lx + 5}" cy="{ly - 4}" r="4" fill="{color}"/>')
        g.append(f'<text x="{lx + 14}" y="{ly}">{_esc(s.label)} ({_esc(s.loss_kind)})</text>')
        g.append(f'<text x="{lx + 14}" y="{ly + 14}">{slope}</text>')
        g.append("</g>")
        el.extend(g)
    el.append("</svg>")
    return "\n".join(el) + "\n"


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def plot_summaries(records, kinds=None):
    """Summaries of the curves to draw: the headline loss per curve unless ``kinds`` maps labels."""
    summaries = aggregate(records)
    kinds = kinds or headline_kinds(records)
    return [summaries[(label, kind)] for label, kind in kinds.items() if (label, kind) in summaries]


def plot_records(records_path, out_path, kind=None, title=None):
    """Regenerate a chart from a records CSV."""
    records = read_records(records_path)
    if not records:
        raise ContractError(f"{records_path} holds no records")
    kinds = headline_kinds(records)
    if kind:
        kinds = {label: kind for label in kinds}
    svg = render_svg(plot_summaries(records, kinds), title or records[0].scenario)
    _write_text(out_path, svg)


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_outputs(result, out_dir):
    """Write records.csv, summary.json and plot.svg into ``out_dir``."""
    if not result.records:
        raise ContractError("sweep produced no records; nothing written")
    out = Path(out_dir)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    cfg = result.config
    write_records(result.records, out / "records.csv")
    summary = summary_dict(result.summaries, cfg.scenario, cfg.to_dict())
    summary["headline"] = {label: kind for label, kind in headline_kinds(result.records).items()}
    _write_text(out / "summary.json", json.dumps(summary, indent=2, allow_nan=True) + "\n")
    svg = render_svg(plot_summaries(result.records), cfg.scenario)
    _write_text(out / "plot.svg", svg)
    return {"records": out / "records.csv", "summary": out / "summary.json", "plot": out / "plot.svg"}
