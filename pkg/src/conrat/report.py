"""Delimited and JSON outputs written next to the figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence

from conrat.evaluation import MetricReport


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(rows: Sequence[Mapping], path, columns: Sequence[str] = None) -> Path:
    path = Path(path)
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path) -> List[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def aspect_rows(report: MetricReport) -> List[dict]:
    rows = []
    for name, s in report.aspects.items():
        rows.append(
            {
                "aspect": name,
                "concept": "" if s.concept is None else s.concept + 1,
                "precision": s.precision,
                "recall": s.recall,
                "f1": s.f1,
                "documents": s.documents,
            }
        )
    m = report.macro
    rows.append({"aspect": "macro", "concept": "", "precision": m.precision, "recall": m.recall, "f1": m.f1, "documents": m.documents})
    return rows


def write_metric_report(report: MetricReport, outdir, stem: str = "metrics") -> dict:
    """``<stem>.json`` and ``<stem>.csv`` in ``outdir``; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {
        "json": write_json(report.to_dict(), outdir / f"{stem}.json"),
        "csv": write_csv(aspect_rows(report), outdir / f"{stem}.csv"),
    }


def write_history(history: Iterable[Mapping], path) -> Path:
    history = list(history)
    return write_csv(history, path)
