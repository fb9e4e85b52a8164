"""CSV tables and small dependency-free SVG plots for result rows."""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .synth import PAGE_TYPES

RESULT_COLUMNS = (
    "method",
    "tokens",
    "compression",
    "similarity",
    "ci_low",
    "ci_high",
    "prefill_flops",
    "prefill_ms",
    "gen_ms",
    "n",
) + tuple(f"sim_{pt}" for pt in PAGE_TYPES)


def write_results(path, rows) -> None:
    """One CSV line per row; extra keys beyond the fixed schema are appended as columns."""
    if not rows:
        raise ValueError("no result rows")
    dicts = [r.as_dict() if hasattr(r, "as_dict") else dict(r) for r in rows]
    extra = []
    for d in dicts:
        extra += [k for k in d if k not in RESULT_COLUMNS and k not in extra]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(RESULT_COLUMNS) + extra, restval="")
        w.writeheader()
        for d in dicts:
            w.writerow(d)


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def page_type_table(rows) -> str:
    """Plain-text table of mean similarity per page type, one line per method."""
    dicts = [r.as_dict() if hasattr(r, "as_dict") else dict(r) for r in rows]
    head = ["method"] + list(PAGE_TYPES)
    lines = ["\t".join(head)]
    for d in dicts:
        cells = [str(d["method"])]
        for pt in PAGE_TYPES:
            v = d.get(f"sim_{pt}", "")
            cells.append(f"{float(v):.4f}" if v not in ("", None) else "-")
        lines.append("\t".join(cells))
    return "\n".join(lines)


# -- SVG ------------------------------------------------------------------------------

W, H, PAD = 480, 320, 50


def _scale(vals, lo_px, hi_px, log=False):
    vs = [math.log10(v) for v in vals] if log else list(vals)
    lo, hi = min(vs), max(vs)
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    return [lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px) for v in vs]


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {H / 2})">{ylabel}</text>',
    ]


def line_plot(xs, ys, path, title="similarity vs K", xlabel="K", ylabel="similarity") -> None:
    pts = sorted(zip(xs, ys))
    px = _scale([p[0] for p in pts], PAD, W - PAD, log=True)
    py = _scale([p[1] for p in pts], H - PAD, PAD)
    out = _frame(title, xlabel, ylabel)
    out.append('<polyline fill="none" stroke="steelblue" stroke-width="2" points="'
               + " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py)) + '"/>')
    for (x, y), (vx, vy) in zip(zip(px, py), pts):
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="steelblue"/>')
        out.append(f'<text x="{x:.1f}" y="{H - PAD + 15}" text-anchor="middle" font-size="10">{vx:g}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


def pareto_plot(rows, path, title="similarity vs visual tokens") -> int:
    """Scatter of similarity against token count on a log x-axis; returns the index of the marked best row."""
    dicts = [r.as_dict() if hasattr(r, "as_dict") else dict(r) for r in rows]
    if not dicts:
        raise ValueError("no rows to plot")
    toks = [float(d["tokens"]) for d in dicts]
    sims = [float(d["similarity"]) for d in dicts]
    best = max(range(len(sims)), key=lambda i: (sims[i], -i))
    px = _scale(toks, PAD, W - PAD, log=True)
    py = _scale(sims, H - PAD, PAD)
    out = _frame(title, "visual tokens (log scale)", "similarity")
    for i, (x, y) in enumerate(zip(px, py)):
        color = "crimson" if i == best else "gray"
        r = 6 if i == best else 4
        cls = ' class="best"' if i == best else ""
        out.append(f'<circle{cls} cx="{x:.1f}" cy="{y:.1f}" r="{r}" fill="{color}"/>')
        out.append(f'<text x="{x + 6:.1f}" y="{y - 6:.1f}" font-size="10">{dicts[i]["method"]}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))
    return best


def report(rows, out_dir) -> dict[str, Path]:
    """Write results.csv, page_types.txt and the Pareto plot (plus the K curve when rows carry K)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "page_types": out / "page_types.txt", "pareto": out / "pareto.svg"}
    write_results(paths["csv"], rows)
    paths["page_types"].write_text(page_type_table(rows) + "\n")
    pareto_plot(rows, paths["pareto"])
    dicts = [r.as_dict() if hasattr(r, "as_dict") else dict(r) for r in rows]
    if all(d.get("K") not in (None, "") for d in dicts):
        paths["k_curve"] = out / "similarity_vs_k.svg"
        line_plot([float(d["K"]) for d in dicts], [float(d["similarity"]) for d in dicts], paths["k_curve"])
    return paths
