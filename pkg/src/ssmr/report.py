"""Tracking plots (plain SVG) and a markdown results table built from ``summary.json``.

Table cells print the summary values with ``repr`` so that parsing a cell
gives back exactly the float stored in the JSON file.
"""

from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .mpc.loop import ClosedLoopLog

COLORS = {"reference": "#000000", "ssmr": "#1f77b4", "linear": "#d62728", "zero": "#7f7f7f"}
ORDER = ["ssmr", "linear"]
LABELS = {"ssmr": "SSMR", "linear": "Linear ROM", "zero": "Zero control"}


def _polyline(t, v, x0, y0, w, h, tlim, vlim, color, dash=""):
    tx = x0 + (np.asarray(t) - tlim[0]) / (tlim[1] - tlim[0]) * w
    vy = y0 + h - (np.asarray(v) - vlim[0]) / (vlim[1] - vlim[0]) * h
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(tx, vy))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.2"{extra} points="{pts}"/>'


def tracking_svg(title: str, series: dict[str, ClosedLoopLog], width: int = 640, panel: int = 180) -> str:
    """One panel per performance axis: reference and every controller's achieved output."""
    first = next(iter(series.values()))
    o = first.z.shape[1]
    margin_l, margin_t, gap = 60, 40, 40
    height = margin_t + o * (panel + gap) + 30
    w = width - margin_l - 20
    tlim = (float(first.t[0]), float(first.t[-1]) if len(first) > 1 else float(first.t[0]) + 1.0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(o):
        vals = [first.zbar[:, i]] + [lg.z[:, i] for lg in series.values()]
        finite = np.concatenate([v[np.isfinite(v)] for v in vals])
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (-1.0, 1.0)
        pad = 0.05 * (hi - lo) if hi > lo else 1.0
        vlim = (lo - pad, hi + pad)
        y0 = margin_t + i * (panel + gap)
        out.append(f'<rect x="{margin_l}" y="{y0}" width="{w}" height="{panel}" fill="none" stroke="#cccccc"/>')
        out.append(f'<text x="{margin_l - 8}" y="{y0 + 10}" text-anchor="end">{vlim[1]:.3g}</text>')
        out.append(f'<text x="{margin_l - 8}" y="{y0 + panel}" text-anchor="end">{vlim[0]:.3g}</text>')
        out.append(f'<text x="14" y="{y0 + panel / 2}" transform="rotate(-90 14 {y0 + panel / 2})" text-anchor="middle">z_{i + 1}</text>')
        out.append(_polyline(first.t, first.zbar[:, i], margin_l, y0, w, panel, tlim, vlim, COLORS["reference"], "4 3"))
        for name, lg in series.items():
            v = np.clip(np.nan_to_num(lg.z[:, i], nan=vlim[0]), *vlim)
            out.append(_polyline(lg.t, v, margin_l, y0, w, panel, tlim, vlim, COLORS.get(name.split(" ")[0], "#2ca02c")))
    yb = height - 12
    out.append(f'<text x="{margin_l}" y="{yb}">t = {tlim[0]:.3g} s</text>')
    out.append(f'<text x="{margin_l + w}" y="{yb}" text-anchor="end">t = {tlim[1]:.3g} s</text>')
    x = margin_l + 100
    for name in ["reference", *series]:
        color = COLORS.get(name.split(" ")[0], "#2ca02c")
        out.append(f'<line x1="{x}" y1="{yb - 4}" x2="{x + 18}" y2="{yb - 4}" stroke="{color}" stroke-width="2"/>')
        label = LABELS.get(name.split(" ")[0], name) + (" " + name.split(" ", 1)[1] if " " in name else "")
        out.append(f'<text x="{x + 22}" y="{yb}">{escape(label)}</text>')
        x += 30 + 7 * len(label)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _cell(v) -> str:
    return "n/a" if v is None else repr(float(v))


def results_table(summary: dict) -> str:
    """Markdown table: MSE per task on the left, mean cumulative QP time (ms) per solve on the right."""
    tasks = list(summary.get("tasks", {}))
    if not tasks:
        return "_No runs: the control summary lists no tasks._\n"
    head = ["N", "controller"] + [f"MSE {t}" for t in tasks] + [f"QP ms {t}" for t in tasks]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for N in summary.get("horizons", []):
        ctrls = next(iter(summary["tasks"].values()))["controllers"]
        for ctrl in sorted(ctrls, key=lambda c: (ORDER.index(c) if c in ORDER else len(ORDER), c)):
            runs = [summary["tasks"][t]["controllers"].get(ctrl, {}).get(f"N={N}") for t in tasks]
            row = [str(N), LABELS.get(ctrl, ctrl)]
            row += [_cell(r["mse"] if r else None) for r in runs]
            row += [_cell(r["qp_ms_mean"] if r else None) for r in runs]
            lines.append("| " + " | ".join(row) + " |")
    row = ["-", LABELS["zero"]] + [_cell(summary["tasks"][t]["zero"]["mse"]) for t in tasks] + ["n/a"] * len(tasks)
    lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def write_report(control_dir: Path, report_dir: Path, plots: bool = True) -> list[Path]:
    """Write ``report.md`` and one ``<task>.svg`` per task; returns the written paths."""
    control_dir, report_dir = Path(control_dir), Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    path = control_dir / "summary.json"
    summary = json.loads(path.read_text()) if path.exists() else {"tasks": {}}
    written = []
    md = ["# Closed-loop results", ""]
    if summary.get("tasks"):
        md += [f"Control step {summary.get('dt')} s, duration {summary.get('duration')} s; "
               f"MSE excludes the first {summary.get('transient')} s.", ""]
        if not summary.get("timing", True):
            md += ["QP times were not recorded (timing disabled).", ""]
    md.append(results_table(summary))
    for task, entry in summary.get("tasks", {}).items():
        if not plots:
            break
        series = {}
        for ctrl, runs in entry["controllers"].items():
            for key, s in runs.items():
                series[f"{ctrl} {key}"] = ClosedLoopLog.read_csv(control_dir / s["log"])
        svg = report_dir / f"{task}.svg"
        svg.write_text(tracking_svg(task, series))
        written.append(svg)
        md.append(f"![{task}]({svg.name})")
        md.append("")
    out = report_dir / "report.md"
    out.write_text("\n".join(md).rstrip() + "\n")
    written.append(out)
    return written


def parse_table(markdown: str) -> dict:
    """Inverse of :func:`results_table` for consistency checks: ``{(N, controller): {column: value}}``."""
    rows = [ln for ln in markdown.splitlines() if ln.startswith("|")]
    if len(rows) < 2:
        return {}
    head = [c.strip() for c in rows[0].strip("|").split("|")]
    out = {}
    for ln in rows[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        out[(cells[0], cells[1])] = {h: (None if c == "n/a" else float(c)) for h, c in zip(head[2:], cells[2:])}
    return out
