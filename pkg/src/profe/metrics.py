"""Macro F1 and per-round metrics export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError

CSV_COLUMNS = ("round", "node_id", "macro_f1", "bytes_sent", "bytes_received", "elapsed_seconds")


def macro_f1(predictions, truths, n_classes: int) -> float:
    """Unweighted mean of per-class F1.

    Classes that appear in neither sequence are left out. A zero denominator
    makes that precision or recall 0.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(truths, dtype=np.int64).reshape(-1)
    if pred.size != true.size:
        raise DimensionError("predictions vs truths", true.size, pred.size)
    if true.size == 0:
        raise DataError("macro F1 of an empty sample")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    seen = (predicted + actual) > 0
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1[seen].mean())


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    node_id: int
    macro_f1: float
    bytes_sent: int
    bytes_received: int
    elapsed_seconds: float

    def as_row(self) -> list[str]:
        return [str(self.round), str(self.node_id), repr(float(self.macro_f1)), str(self.bytes_sent),
                str(self.bytes_received), repr(float(self.elapsed_seconds))]


def per_round_means(records: Sequence[MetricsRecord]) -> dict[int, dict[str, float]]:
    out: dict[int, dict[str, float]] = {}
    for r in sorted({rec.round for rec in records}):
        rows = [rec for rec in records if rec.round == r]
        out[r] = {
            "macro_f1": float(np.mean([x.macro_f1 for x in rows])),
            "bytes_sent": float(np.mean([x.bytes_sent for x in rows])),
            "bytes_received": float(np.mean([x.bytes_received for x in rows])),
            "elapsed_seconds": float(np.mean([x.elapsed_seconds for x in rows])),
        }
    return out


def summarize(records: Sequence[MetricsRecord], algorithm: str) -> dict:
    """Column totals over all rows, plus per-round node means.

    Bytes and time in each row are cumulative per node, so the final round
    carries each node's run total.
    """
    last = max(r.round for r in records)
    final = [r for r in records if r.round == last]
    return {
        "algorithm": algorithm,
        "rounds": last,
        "nodes": len(final),
        "totals": {
            "bytes_sent": sum(r.bytes_sent for r in records),
            "bytes_received": sum(r.bytes_received for r in records),
            "elapsed_seconds": sum(r.elapsed_seconds for r in records),
            "macro_f1": sum(r.macro_f1 for r in records),
        },
        "final": {
            "mean_macro_f1": float(np.mean([r.macro_f1 for r in final])),
            "bytes_sent": sum(r.bytes_sent for r in final),
            "bytes_received": sum(r.bytes_received for r in final),
            "elapsed_seconds": max(r.elapsed_seconds for r in final),
        },
        "per_round": {str(k): v for k, v in per_round_means(records).items()},
    }


def export_metrics(records: Sequence[MetricsRecord], directory, algorithm: str = "profe") -> tuple[Path, Path]:
    """Write ``metrics.csv`` and ``summary.json`` into ``directory``."""
    if not records:
        raise DataError("no metrics records to export")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "summary.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.as_row())
    json_path.write_text(json.dumps(summarize(records, algorithm), indent=2) + "\n")
    return csv_path, json_path


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"unexpected metrics.csv header {reader.fieldnames}")
        types = {f.name: f.type for f in fields(MetricsRecord)}
        conv = {"int": int, "float": float}
        return [MetricsRecord(**{k: conv[types[k]](v) for k, v in row.items()}) for row in reader]


def records_to_dicts(records: Iterable[MetricsRecord]) -> list[dict]:
    return [asdict(r) for r in records]
