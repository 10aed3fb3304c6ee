from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
import math

import numpy as np

from .errors import FormatError


SCHEMA_VERSION = "fpcnet.eval_report.v0"
CSV_HEADER = "kind,pair_id,split,metric,eps,value"
ALL_SPLIT = "all"


@dataclass(frozen=True)
class ReportRow:
    pair_id: str
    split: str
    metric: str
    eps: float
    value: float

    @property
    def defined(self) -> bool:
        return math.isfinite(self.value)


@dataclass(frozen=True)
class AggregateRow:
    split: str
    metric: str
    eps: float
    value: float
    count: int


@dataclass
class EvalReport:
    """Per-pair metric rows; aggregates are means over the defined rows of each (split, metric, eps)."""

    suite: str
    header: dict[str, str] = field(default_factory=dict)
    rows: list[ReportRow] = field(default_factory=list)
    warnings: int = 0

    def add(self, pair_id: str, metric: str, eps: float, value: float, split: str = ALL_SPLIT) -> None:
        self.rows.append(ReportRow(pair_id, split, metric, float(eps), float(value)))

    def warn(self, count: int = 1) -> None:
        self.warnings += count

    def aggregates(self) -> list[AggregateRow]:
        groups: dict[tuple[str, str, float], list[float]] = {}
        for row in self.rows:
            values = groups.setdefault((row.split, row.metric, row.eps), [])
            if row.defined:
                values.append(row.value)
        return [
            AggregateRow(split, metric, eps, float(np.mean(values)) if values else math.nan, len(values))
            for (split, metric, eps), values in groups.items()
        ]

    def aggregate(self, metric: str, eps: float, split: str = ALL_SPLIT) -> float:
        for row in self.aggregates():
            if (row.split, row.metric, row.eps) == (split, metric, float(eps)):
                return row.value
        raise KeyError(f"No aggregate for metric '{metric}' at eps {eps} in split '{split}'.")

    def values(self, metric: str, eps: float, split: str = ALL_SPLIT) -> list[float]:
        return [r.value for r in self.rows if (r.split, r.metric, r.eps) == (split, metric, float(eps))]

    def summary(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "suite": self.suite,
            "rows": len(self.rows),
            "warnings": self.warnings,
            "aggregates": [
                {"split": a.split, "metric": a.metric, "eps": a.eps, "value": a.value, "count": a.count}
                for a in self.aggregates()
            ],
        }

    def to_csv(self) -> str:
        lines = [f"# schema_version: {SCHEMA_VERSION}", f"# suite: {self.suite}", f"# warnings: {self.warnings}"]
        lines.extend(f"# {key}: {value}" for key, value in sorted(self.header.items()))
        lines.append(CSV_HEADER)
        for row in self.rows:
            lines.append(f"row,{row.pair_id},{row.split},{row.metric},{row.eps:g},{repr(row.value)}")
        for agg in self.aggregates():
            lines.append(f"aggregate,*,{agg.split},{agg.metric},{agg.eps:g},{repr(agg.value)}")
        return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> EvalReport:
    report = EvalReport(suite="")
    seen_header = False
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            key, value = key.strip(), value.strip()
            if key == "suite":
                report.suite = value
            elif key == "warnings":
                report.warnings = int(value)
            elif key != "schema_version":
                report.header[key] = value
            continue
        if line.strip() == CSV_HEADER:
            seen_header = True
            continue
        if not seen_header:
            raise FormatError(f"Report CSV line {line_no} precedes the '{CSV_HEADER}' header.")
        fields = line.split(",")
        if len(fields) != 6:
            raise FormatError(f"Report CSV line {line_no} has {len(fields)} fields, expected 6.")
        if fields[0] == "row":
            try:
                report.add(fields[1], fields[3], float(fields[4]), float(fields[5]), split=fields[2])
            except ValueError:
                raise FormatError(f"Report CSV line {line_no} has a non-numeric eps or value.") from None
        elif fields[0] != "aggregate":
            raise FormatError(f"Unknown report row kind '{fields[0]}' on line {line_no}.")
    return report


def _scale(values: list[float], lo_px: float, hi_px: float, log: bool) -> tuple[Any, float, float]:
    data = [math.log10(max(v, 1e-12)) if log else v for v in values]
    lo, hi = min(data), max(data)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0

    def to_px(v: float) -> float:
        t = math.log10(max(v, 1e-12)) if log else v
        return lo_px + (t - lo) / (hi - lo) * (hi_px - lo_px)

    return to_px, lo, hi


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def report_svg(report: EvalReport, log_scale: bool = False, title: str | None = None) -> str:
    """Line plot of each (split, metric) aggregate against eps."""
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for agg in report.aggregates():
        if math.isfinite(agg.value):
            series.setdefault((agg.split, agg.metric), []).append((agg.eps, agg.value))
    width, height, margin = 640, 400, 60
    title = title or f"{report.suite} aggregates"
    xs = [x for points in series.values() for x, _ in points] or [0.0, 1.0]
    ys = [y for points in series.values() for _, y in points] or [0.0, 1.0]
    x_px, x_lo, x_hi = _scale(xs, margin, width - margin, log_scale)
    y_px, y_lo, y_hi = _scale(ys, height - margin, margin, log_scale)

    lines = []
    legend = []
    for index, ((split, metric), points) in enumerate(sorted(series.items())):
        color = _PALETTE[index % len(_PALETTE)]
        coords = " ".join(f"{x_px(x):.1f},{y_px(y):.1f}" for x, y in sorted(points))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in sorted(points):
            lines.append(f'<circle cx="{x_px(x):.1f}" cy="{y_px(y):.1f}" r="3" fill="{color}"/>')
        legend.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * index}" font-size="11" fill="{color}">{metric} [{split}]</text>'
        )
    axis_note = "log10 " if log_scale else ""
    body = "\n  ".join(lines + legend)
    return f"""<svg xmlns="http://www.w3.org/2000/svg" width="{width + 160}" height="{height}" viewBox="0 0 {width + 160} {height}">
  <rect width="100%" height="100%" fill="white"/>
  <text x="{margin}" y="{margin / 2:.0f}" font-size="14" font-family="sans-serif">{title}</text>
  <line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>
  <line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>
  <text x="{margin}" y="{height - margin + 20}" font-size="11">{axis_note}x: {x_lo:.3g}</text>
  <text x="{width - margin - 60}" y="{height - margin + 20}" font-size="11">{axis_note}x: {x_hi:.3g}</text>
  <text x="4" y="{height - margin}" font-size="11">{y_lo:.3g}</text>
  <text x="4" y="{margin}" font-size="11">{y_hi:.3g}</text>
  {body}
</svg>
"""


def write_report(report: EvalReport, out_dir: str | Path, log_scale: bool = False) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    svg_path = out / "report.svg"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    svg_path.write_text(report_svg(report, log_scale=log_scale), encoding="utf-8")
    return csv_path, svg_path
