"""Append-only JSON-lines reports and per-metric CSV exports."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from datetime import datetime, timezone
from pathlib import Path


def timestamp() -> str:
    """UTC ISO time; honours ``SOURCE_DATE_EPOCH`` for reproducible output."""
    fixed = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(fixed) if fixed is not None else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


class Report:
    """One writer per file; every ``emit`` appends a line and flushes."""

    def __init__(self, path, run_id: str, config_hash: str, seed: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id, self.config_hash, self.seed = run_id, config_hash, seed
        self.records: list[dict] = []

    def emit(self, metric: str, value, std=None, **extra) -> dict:
        rec = {"run_id": self.run_id, "config_hash": self.config_hash, "metric": metric,
               "value": _clean(value), "std": _clean(std), "seed": self.seed,
               "timestamp": timestamp()}
        rec.update({k: _clean(v) for k, v in extra.items()})
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.records.append(rec)
        return rec

    def header(self, config_text: str) -> dict:
        return self.emit("config", None, text=config_text)


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_clean(v) for v in row])


def export_metric_csvs(records, out_dir, key: str = "gamma_eval") -> list[Path]:
    """One CSV per metric: ``key, value, std`` rows in emission order."""
    by_metric: dict[str, list] = {}
    for rec in records:
        if rec["metric"] == "config":
            continue
        by_metric.setdefault(rec["metric"], []).append((rec.get(key, ""), rec["value"], rec["std"]))
    paths = []
    for metric, rows in by_metric.items():
        p = Path(out_dir) / f"{metric}.csv"
        write_csv(p, [key, "value", "std"], rows)
        paths.append(p)
    return paths
