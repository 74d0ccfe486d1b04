"""CSV + JSON-lines metrics sink."""
from __future__ import annotations

import csv
import json
import os
import threading

COLUMNS = ("step", "episode", "return", "loss", "epsilon", "eval_mean")


def _cell(v):
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


class MetricsSink:
    """Append metric rows to ``metrics.csv`` and ``metrics.jsonl`` under ``out_dir``.

    Callable, so it can be passed straight to the trainer as a hook. Writes
    are serialized by a lock; files are flushed whenever a row carries an
    evaluation result, and on close.
    """

    def __init__(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.csv_path = os.path.join(out_dir, "metrics.csv")
        self.jsonl_path = os.path.join(out_dir, "metrics.jsonl")
        self._lock = threading.Lock()
        self._csv_f = open(self.csv_path, "w", newline="")
        self._json_f = open(self.jsonl_path, "w")
        self._csv = csv.writer(self._csv_f, lineterminator="\n")
        self._csv.writerow(COLUMNS)
        self._csv_f.flush()

    def __call__(self, row: dict):
        with self._lock:
            self._csv.writerow([_cell(row.get(c)) for c in COLUMNS])
            self._json_f.write(json.dumps({c: row.get(c) for c in COLUMNS}) + "\n")
            if row.get("eval_mean") is not None:
                self.flush()

    def flush(self):
        self._csv_f.flush()
        self._json_f.flush()

    def close(self):
        with self._lock:
            if not self._csv_f.closed:
                self.flush()
                self._csv_f.close()
                self._json_f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
