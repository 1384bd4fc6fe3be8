"""Result persistence: CSV with header plus a mirrored JSON-lines file.

Every file an experiment produces goes through this module.  Rows are
flushed as soon as they are written, so an interrupted sweep keeps the rows
it finished.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from pathlib import Path

REGRESSION_FIELDS = ("function", "mode", "n", "seed", "steps", "train_mse", "test_mse", "test_grad_mse", "wall_ms")
DISTILL_FIELDS = ("mode", "seed", "steps", "data_fraction", "alpha", "kl_test", "top1_err", "wall_ms")
SG_FIELDS = ("variant", "splits", "seed", "test_acc", "steps", "wall_ms")


def _row(record) -> dict:
    if dataclasses.is_dataclass(record):
        if hasattr(record, "row"):
            return record.row()
        return dataclasses.asdict(record)
    return dict(record)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item"):
        return _json_safe(value.item())
    return value


def ensure_writable(directory) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


class ResultSink:
    """Append-safe CSV + JSON-lines writer with a fixed column set.

    Extra keys in a record go to the JSON-lines file only.
    """

    def __init__(self, directory, stem: str, fields):
        self.dir = ensure_writable(directory)
        self.fields = tuple(fields)
        self.csv_path = self.dir / f"{stem}.csv"
        self.jsonl_path = self.dir / f"{stem}.jsonl"
        fresh = not self.csv_path.exists() or self.csv_path.stat().st_size == 0
        self._csv = open(self.csv_path, "a", newline="")
        self._jsonl = open(self.jsonl_path, "a")
        self._writer = csv.DictWriter(self._csv, fieldnames=self.fields, extrasaction="ignore")
        if fresh:
            self._writer.writeheader()
            self._csv.flush()
        self.count = 0

    def write(self, record) -> None:
        row = _row(record)
        missing = [f for f in self.fields if f not in row]
        if missing:
            raise KeyError(f"record is missing columns {missing}")
        self._writer.writerow({k: _csv_value(row[k]) for k in self.fields})
        self._csv.flush()
        self._jsonl.write(json.dumps(_json_safe(row), sort_keys=False) + "\n")
        self._jsonl.flush()
        self.count += 1

    def close(self) -> None:
        self._csv.close()
        self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)  # round-trips float64 exactly
    return v


def persist_results(records, directory, stem: str = "results", fields=None) -> tuple[Path, Path]:
    records = list(records)
    if fields is None:
        if not records:
            raise ValueError("fields are required when there are no records")
        fields = tuple(_row(records[0]).keys())
    with ResultSink(directory, stem, fields) as sink:
        for r in records:
            sink.write(r)
    return sink.csv_path, sink.jsonl_path


def write_table(path, header, rows) -> Path:
    """Plain numeric CSV (surface dumps, witness grids)."""
    path = Path(path)
    ensure_writable(path.parent)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    ensure_writable(path.parent)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
