"""JSON and fixed-width text renderings of the stats, metric, POS and human-eval reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .analysis import PosTable
from .ingestion import StatsTable, format_stats_table
from .metrics import MetricReport

METRIC_COLUMNS = (
    ("B1", "B1"), ("B2", "B2"), ("B3", "B3"), ("B4", "B4"),
    ("R1", "R1"), ("R2", "R2"), ("RL", "RL"), ("METEOR", "METEOR"),
    ("Pre", "emb_P"), ("Rec", "emb_R"), ("F1", "emb_F1"), ("Sent-cosine", "sent_cosine"),
)
POS_ROWS = (
    ("Ref count", "ref_count"), ("Gen count", "gen_count"), ("Difference", "difference"),
    ("Overlap", "overlap"), ("Overlap--Syn", "overlap_syn"),
)
SLICE_LABELS = {"overall": "Total", "non_ocr": "Non-OCR", "ocr": "OCR"}


def to_jsonable(report: Any) -> Any:
    return report.to_dict() if hasattr(report, "to_dict") else report


def dumps_json(report: Any) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2) + "\n"


def format_metric_table(report: MetricReport) -> str:
    widths = [max(8, len(label)) for label, _ in METRIC_COLUMNS]
    header = f"{'Slice':<9} {'N':>5} " + " ".join(f"{label:>{w}}" for (label, _), w in zip(METRIC_COLUMNS, widths))
    lines = [header, "-" * len(header)]
    for name, row in report.slices.items():
        vals = " ".join(f"{100 * getattr(row, attr):>{w}.2f}" for (_, attr), w in zip(METRIC_COLUMNS, widths))
        lines.append(f"{SLICE_LABELS.get(name, name):<9} {row.count:>5d} {vals}")
    lines.extend(f"# {n}" for n in report.notes)
    return "\n".join(lines) + "\n"


def format_pos_table(table: PosTable) -> str:
    order = [s for s in ("overall", "non_ocr", "ocr") if s in table.cells]
    order += [s for s in table.cells if s not in order]
    lines = []
    for tag in ("NOUN", "VERB", "ADJ", "ADV"):
        header = f"{tag:<14}" + "".join(f"{SLICE_LABELS.get(s, s):>10}" for s in order)
        lines += [header, "-" * len(header)]
        for label, key in POS_ROWS:
            lines.append(f"{label:<14}" + "".join(f"{table.cells[s][tag][key]:>10.2f}" for s in order))
        lines.append("")
    lines.extend(f"# {n}" for n in table.notes)
    return "\n".join(lines) + "\n"


def format_human_table(summary: dict) -> str:
    dist = summary["distribution"]
    lines = [
        f"{'Adequacy':>10} {'Fluency':>10}",
        f"{summary['adequacy']:>10.2f} {summary['fluency']:>10.2f}",
        "",
        f"{'Justify':>10} {'W. Justify':>10} {'SRI':>10} {'NRI':>10}",
        " ".join(f"{dist[k]:>9.0f}%" for k in ("justify", "weakly_justify", "sri", "nri")),
        "",
        f"{'Kappa adequacy':>16} {'Kappa fluency':>16}",
    ]
    fmt = lambda v: f"{v:>16.3f}" if v is not None else f"{'n/a':>16}"
    lines.append(f"{fmt(summary.get('kappa_adequacy'))} {fmt(summary.get('kappa_fluency'))}")
    return "\n".join(lines) + "\n"


def format_table(report: Any) -> str:
    if isinstance(report, MetricReport):
        return format_metric_table(report)
    if isinstance(report, PosTable):
        return format_pos_table(report)
    if isinstance(report, StatsTable):
        return format_stats_table(report)
    if isinstance(report, dict) and "distribution" in report:
        return format_human_table(report)
    raise TypeError(f"no table layout for {type(report).__name__}")


def emit_report(report: Any, path, fmt: str = "json") -> Path:
    if fmt == "json":
        text = dumps_json(report)
    elif fmt == "table":
        text = format_table(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
