"""Tab-separated summaries of one or more metrics reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Sequence, TextIO, Tuple

from .errors import EmptyTableError
from .evaluation import MetricsReport, read_metrics_report

REPORT_COLUMNS = [
    "source",
    "taxonomy",
    "mode",
    "classifier",
    "ap_mode",
    "n_samples",
    "acc1",
    "map",
    "mean_recall",
]

CLASS_COLUMNS = ["source", "class", "n_positive", "recall", "ap"]


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "NA"
        return f"{value:.4f}"
    return str(value)


def summary_rows(reports: Sequence[Tuple[str, MetricsReport]]) -> List[Dict[str, object]]:
    return [
        {
            "source": source,
            "taxonomy": report.taxonomy,
            "mode": report.mode,
            "classifier": report.classifier,
            "ap_mode": report.ap_mode,
            "n_samples": report.n_samples,
            "acc1": report.acc1,
            "map": report.map,
            "mean_recall": report.mean_recall,
        }
        for source, report in reports
    ]


def class_rows(reports: Sequence[Tuple[str, MetricsReport]]) -> List[Dict[str, object]]:
    rows: List[Dict[str, object]] = []
    for source, report in reports:
        counts = report.label_counts or [None] * len(report.classes)
        for name, count, recall, ap in zip(report.classes, counts, report.per_class_recall, report.per_class_ap):
            rows.append({"source": source, "class": name, "n_positive": count, "recall": recall, "ap": ap})
    return rows


def write_table(rows: Sequence[Dict[str, object]], columns: Sequence[str], handle: TextIO) -> None:
    handle.write("\t".join(columns) + "\n")
    for row in rows:
        handle.write("\t".join(_format_value(row[column]) for column in columns) + "\n")


def load_reports(paths: Sequence[Path]) -> List[Tuple[str, MetricsReport]]:
    if not paths:
        raise EmptyTableError("no metrics reports given")
    return [(Path(path).parent.name or Path(path).stem, read_metrics_report(path)) for path in paths]


def write_reports(reports: Sequence[Tuple[str, MetricsReport]], out_dir: Path) -> Tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "report.tsv"
    classes_path = out_dir / "report_classes.tsv"
    with summary_path.open("w", encoding="utf-8") as handle:
        write_table(summary_rows(reports), REPORT_COLUMNS, handle)
    with classes_path.open("w", encoding="utf-8") as handle:
        write_table(class_rows(reports), CLASS_COLUMNS, handle)
    return summary_path, classes_path
