#!/usr/bin/env python3
"""
export_report.py: bake an evaluation directory into one self-contained HTML page.
No server needed. Metric table, transfer statistics and SVG figures are inlined.

Usage:
    python export_report.py --eval-dir runs/default/eval
    python export_report.py --eval-dir runs/default/eval --output /path/to/report.html

Output: <eval-dir>/report.html (or --output path)
"""
from __future__ import annotations

import argparse
import html
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from evaluation.report import METRIC_NAMES, read_metrics_csv

# ── Config ─────────────────────────────────────────────────────────────────
FIGURES = (
    ("metrics.svg", "Downstream classification on the real test set"),
    ("pca_scatter.svg", "PCA embedding"),
    ("wavelength_diff.svg", "Per-wavelength difference to real class means"),
    ("class_means.svg", "Class-mean spectra"),
)
SUMMARY_NAME = "eval_summary.json"


# ── Data loading ────────────────────────────────────────────────────────────
def load_report_data(eval_dir: Path) -> dict[str, Any]:
    metrics_path = eval_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics.csv in {eval_dir}; run the eval command first")
    summary_path = eval_dir / SUMMARY_NAME
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}

    figures = []
    for name, title in FIGURES:
        path = eval_dir / name
        if path.exists():
            svg = path.read_text(encoding="utf-8")
            # drop the XML prolog and doctype so the SVG can sit inline
            figures.append({"title": title, "svg": svg[svg.find("<svg"):]})

    return {
        "metrics": read_metrics_csv(metrics_path),
        "summary": summary,
        "figures": figures,
    }


# ── HTML generation ─────────────────────────────────────────────────────────
def _metrics_table(data: dict[str, Any]) -> str:
    header = "".join(f"<th>{html.escape(name)}</th>" for name in ("source", *METRIC_NAMES))
    rows = []
    for row in data["metrics"]:
        cells = "".join(f"<td>{value:.4f}</td>" for value in row.values())
        rows.append(f"<tr><td>{html.escape(row.source)}</td>{cells}</tr>")
    return f"<table><thead><tr>{header}</tr></thead><tbody>{''.join(rows)}</tbody></table>"


def _summary_list(summary: dict[str, Any]) -> str:
    if not summary:
        return "<p class=\"muted\">No evaluation summary found.</p>"
    items = "".join(
        f"<li><span class=\"key\">{html.escape(str(key))}</span> {html.escape(json.dumps(value))}</li>"
        for key, value in sorted(summary.items())
    )
    return f"<ul class=\"summary\">{items}</ul>"


def render_html(data: dict[str, Any], generated_at: str) -> str:
    figures = "\n".join(
        f"<section class=\"card\"><h2>{html.escape(f['title'])}</h2><div class=\"figure\">{f['svg']}</div></section>"
        for f in data["figures"]
    )
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
  <meta charset="UTF-8" />
  <meta name="viewport" content="width=device-width, initial-scale=1.0" />
  <title>flowbridge evaluation report</title>
  <style>
    *, *::before, *::after {{ box-sizing: border-box; margin: 0; padding: 0; }}

    body {{
      font-family: -apple-system, BlinkMacSystemFont, "Segoe UI", Roboto, sans-serif;
      background: #f0f2f5;
      color: #1a1a2e;
      min-height: 100vh;
    }}

    /* ── Header ── */
    .header {{
      background: linear-gradient(135deg, #1a1a2e 0%, #16213e 100%);
      color: #fff;
      padding: 1rem 2rem;
      display: flex;
      align-items: center;
      box-shadow: 0 2px 8px rgba(0,0,0,.35);
    }}
    .header h1 {{ font-size: 1.35rem; font-weight: 700; letter-spacing: .02em; }}
    .last-updated {{ margin-left: auto; font-size: .75rem; opacity: .7; white-space: nowrap; }}

    main {{ padding: 1.5rem 2rem; display: grid; gap: 1.25rem; }}
    .card {{ background: #fff; border-radius: 8px; padding: 1rem 1.25rem; box-shadow: 0 1px 4px rgba(0,0,0,.08); }}
    .card h2 {{ font-size: 1rem; margin-bottom: .75rem; }}
    table {{ border-collapse: collapse; width: 100%; font-size: .9rem; }}
    th, td {{ text-align: left; padding: .4rem .6rem; border-bottom: 1px solid #e5e7eb; }}
    th {{ background: #f8fafc; font-weight: 600; }}
    .summary {{ list-style: none; font-size: .85rem; }}
    .summary .key {{ font-weight: 600; margin-right: .4rem; }}
    .muted {{ color: #6b7280; font-size: .85rem; }}
    .figure svg {{ max-width: 100%; height: auto; }}
  </style>
</head>
<body>
<div class="header">
  <h1>flowbridge · sim-to-real transfer evaluation</h1>
  <div class="last-updated">Generated {html.escape(generated_at)}</div>
</div>
<main>
  <section class="card"><h2>Metrics by training source</h2>{_metrics_table(data)}</section>
  <section class="card"><h2>Run summary</h2>{_summary_list(data["summary"])}</section>
  {figures}
</main>
</body>
</html>
"""


def build_report(eval_dir: Path, out_path: Path, generated_at: str | None = None) -> Path:
    data = load_report_data(eval_dir)
    stamp = generated_at or datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(render_html(data, stamp), encoding="utf-8")
    return out_path


# ── Entry point ─────────────────────────────────────────────────────────────
def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Export a flowbridge evaluation as static HTML")
    parser.add_argument("--eval-dir", type=Path, required=True, help="Directory written by the eval command")
    parser.add_argument("--output", type=Path, default=None, help="Output HTML path (default: <eval-dir>/report.html)")
    args = parser.parse_args(argv)

    out_path = args.output or args.eval_dir / "report.html"
    if not args.eval_dir.is_dir():
        print(f"eval directory not found: {args.eval_dir}")
        return 3

    data = load_report_data(args.eval_dir)
    print(f"sources: {', '.join(row.source for row in data['metrics'])}")
    print(f"figures: {len(data['figures'])}")
    build_report(args.eval_dir, out_path)
    size_kb = out_path.stat().st_size // 1024
    print(f"saved: {out_path}  ({size_kb} KB)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
