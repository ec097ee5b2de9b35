"""Metrics persistence: CSV plus JSON-lines mirrors of per-epoch series.

Each row carries the raw value and its running prefix minimum (the
monotonized view), keyed by ``(epoch, series, split)`` which must be unique
within a run. Files are flushed on every emit so interrupted runs stay
inspectable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgument

CSV_HEADER = "epoch,series,split,raw,monotonized,manifest_hash"


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    series: str
    split: str
    raw: float
    monotonized: float
    manifest_hash: str

    def csv_line(self) -> str:
        return (
            f"{self.epoch},{self.series},{self.split},"
            f"{self.raw!r},{self.monotonized!r},{self.manifest_hash}"
        )

    def json_line(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "series": self.series,
                "split": self.split,
                "raw": self.raw,
                "monotonized": self.monotonized,
                "manifest_hash": self.manifest_hash,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


class MetricsSink:
    """Single writer for a run's metrics; mirrors CSV and JSON-lines."""

    def __init__(self, out_dir, manifest_hash: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_hash = manifest_hash
        self.csv_path = self.out_dir / "metrics.csv"
        self.jsonl_path = self.out_dir / "metrics.jsonl"
        self._csv = open(self.csv_path, "w", encoding="utf-8")
        self._jsonl = open(self.jsonl_path, "w", encoding="utf-8")
        self._csv.write(CSV_HEADER + "\n")
        self._running_min: dict[tuple[str, str], float] = {}
        self._seen: set[tuple[int, str, str]] = set()

    def emit(self, epoch: int, series: str, split: str, raw: float) -> MetricsRow:
        key = (epoch, series, split)
        if key in self._seen:
            raise InvalidArgument(f"duplicate metrics row for {key}")
        self._seen.add(key)
        prev = self._running_min.get((series, split), float("inf"))
        mono = min(prev, float(raw))
        self._running_min[(series, split)] = mono
        row = MetricsRow(epoch, series, split, float(raw), mono, self.manifest_hash)
        self._csv.write(row.csv_line() + "\n")
        self._csv.flush()
        self._jsonl.write(row.json_line() + "\n")
        self._jsonl.flush()
        return row

    def close(self) -> None:
        self._csv.close()
        self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise InvalidArgument(f"{path} is not a metrics file")
    for line in lines[1:]:
        epoch, series, split, raw, mono, mhash = line.split(",")
        rows.append(
            MetricsRow(int(epoch), series, split, float(raw), float(mono), mhash)
        )
    return rows
