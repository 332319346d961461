"""Scoring and dataset protocols for detection experiments.

Three dataset layouts are supported:

* ``line_labeled`` — a single text file whose first whitespace token is
  the label (``-`` for normal, anything else anomalous) and whose
  remainder is the log body.
* ``group_labeled`` — a directory with ``corpus.log`` plus
  ``labels.csv`` mapping group keys (for example block ids embedded in
  each line) to ``normal``/``anomaly``.
* ``synthetic`` — a directory produced by the corpus generator:
  ``corpus.log`` plus ``truth.jsonl`` with one record per line.

Scoring compares detector reports against labels at line or group
granularity, and keeps explicit "defined" flags for every ratio so a
degenerate confusion matrix (no predicted positives, no actual
positives) is distinguishable from a genuinely zero score.

`run_split_experiment` implements the chronological-prefix protocol:
train on the first fraction of the stream as-is, detect over the rest,
score only the held-out suffix.  Splits are positional — lines are
never shuffled, because log order is the signal the sequence model
learns.
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass

from .detector import DetectorConfig, stream_detect
from .errors import AlignmentError, FormatError, ProtocolError
from .parser import RawLog

_DEFAULT_GROUP_KEY = re.compile(r"blk_-?\d+")


@dataclass
class LabeledRecord:
    """One log line plus its ground-truth label."""

    line_no: int
    body: str
    label: bool  # True = anomalous
    group_key: str | None = None
    subkind: str | None = None


@dataclass
class Scorecard:
    """Confusion counts with zero-division-safe derived metrics."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision_defined(self) -> bool:
        return (self.tp + self.fp) > 0

    @property
    def recall_defined(self) -> bool:
        return (self.tp + self.fn) > 0

    @property
    def f1_defined(self) -> bool:
        return self.precision_defined and self.recall_defined \
            and (self.precision + self.recall) > 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.precision_defined else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.recall_defined else 0.0

    @property
    def f1(self) -> float:
        if not self.f1_defined:
            return 0.0
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r)

    def to_json(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "f1_defined": self.f1_defined,
        }


# --- dataset loading -----------------------------------------------------------


def load_dataset(path: str, fmt: str,
                 key_pattern: str | None = None) -> list[LabeledRecord]:
    """Load a labeled dataset in one of the supported layouts."""
    if fmt == "line_labeled":
        return _load_line_labeled(path)
    if fmt == "group_labeled":
        return _load_group_labeled(path, key_pattern)
    if fmt == "synthetic":
        return _load_synthetic(path)
    raise FormatError(f"unknown dataset format {fmt!r}")


def _load_line_labeled(path: str) -> list[LabeledRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(None, 1)
            if len(parts) < 2:
                raise FormatError(
                    f"line {i}: expected '<label> <body>', got {line!r}")
            label, body = parts
            records.append(LabeledRecord(
                line_no=len(records) + 1,
                body=body,
                label=label != "-",
            ))
    return records


def _load_group_labeled(path: str, key_pattern: str | None) -> list[LabeledRecord]:
    pattern = re.compile(key_pattern) if key_pattern else _DEFAULT_GROUP_KEY
    labels: dict[str, bool] = {}
    labels_path = os.path.join(path, "labels.csv")
    with open(labels_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0].lower() in ("key", "group", "blockid"):
                continue
            if len(row) < 2:
                raise FormatError(f"labels.csv row too short: {row!r}")
            labels[row[0]] = row[1].strip().lower() not in ("normal", "-", "0")
    records = []
    with open(os.path.join(path, "corpus.log"), "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            body = line.rstrip("\n")
            if not body.strip():
                continue
            m = pattern.search(body)
            if m is None:
                raise FormatError(f"line {i}: no group key in {body!r}")
            key = m.group(0)
            if key not in labels:
                raise FormatError(f"line {i}: group {key!r} missing from labels.csv")
            records.append(LabeledRecord(
                line_no=len(records) + 1,
                body=body,
                label=labels[key],
                group_key=key,
            ))
    return records


def _load_synthetic(path: str) -> list[LabeledRecord]:
    truth: dict[int, dict] = {}
    with open(os.path.join(path, "truth.jsonl"), "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                truth[int(row["line_no"])] = row
    records = []
    with open(os.path.join(path, "corpus.log"), "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            body = line.rstrip("\n")
            if not body.strip():
                continue
            row = truth.get(i)
            if row is None:
                raise FormatError(f"line {i} has no truth record")
            records.append(LabeledRecord(
                line_no=i,
                body=body,
                label=row.get("label") == "anomaly",
                subkind=row.get("subkind"),
            ))
    return records


# --- scoring ---------------------------------------------------------------------


def score(reports, records: list[LabeledRecord],
          granularity: str = "line") -> Scorecard:
    """Score reports against labels at line or group granularity.

    A line is predicted anomalous when at least one report names it;
    a group is predicted anomalous when any of its lines is.
    """
    known = {r.line_no for r in records}
    predicted_lines = set()
    for report in reports:
        line_no = report.line_no if hasattr(report, "line_no") else report["line_no"]
        if line_no not in known:
            raise AlignmentError(
                f"report names line {line_no} absent from the dataset")
        predicted_lines.add(line_no)

    if granularity == "line":
        tp = fp = fn = tn = 0
        for record in records:
            predicted = record.line_no in predicted_lines
            if predicted and record.label:
                tp += 1
            elif predicted:
                fp += 1
            elif record.label:
                fn += 1
            else:
                tn += 1
        return Scorecard(tp, fp, fn, tn)

    if granularity == "group":
        truth: dict[str, bool] = {}
        predicted: dict[str, bool] = {}
        for record in records:
            if record.group_key is None:
                raise AlignmentError(
                    f"line {record.line_no} has no group key; cannot score groups")
            truth[record.group_key] = truth.get(record.group_key, False) or record.label
            predicted[record.group_key] = (
                predicted.get(record.group_key, False)
                or record.line_no in predicted_lines)
        tp = fp = fn = tn = 0
        for key in truth:
            if predicted[key] and truth[key]:
                tp += 1
            elif predicted[key]:
                fp += 1
            elif truth[key]:
                fn += 1
            else:
                tn += 1
        return Scorecard(tp, fp, fn, tn)

    raise FormatError(f"unknown granularity {granularity!r}")


# --- split experiments -------------------------------------------------------------


def run_split_experiment(records: list[LabeledRecord], fractions,
                         config=None,
                         granularity: str = "line",
                         detector_config: DetectorConfig | None = None,
                         dataset: str = "",
                         progress=None) -> list[dict]:
    """Chronological prefix-training experiment over several splits.

    For each fraction f, train on the first f of the stream (labels
    ignored — training is unsupervised) and score detection over the
    remaining 1-f.  Returns one result row per fraction.
    """
    from .pipeline import PipelineConfig, config_hash, train_offline

    if config is None:
        config = PipelineConfig()
    n = len(records)
    if n < 10:
        raise ProtocolError(f"dataset of {n} lines is too small to split")
    for i in range(1, n):
        if records[i].line_no <= records[i - 1].line_no:
            raise ProtocolError(
                "records must be in strictly increasing line order")

    rows = []
    for fraction in fractions:
        if not 0.0 < fraction < 1.0:
            raise ProtocolError(f"split fraction {fraction} outside (0, 1)")
        cut = int(fraction * n)
        train, test = records[:cut], records[cut:]
        min_train = config.seqmodel.window + 2
        if len(train) < min_train or not test:
            raise ProtocolError(
                f"fraction {fraction} leaves train={len(train)} "
                f"test={len(test)}; need train >= {min_train} and test >= 1")
        if progress:
            progress(f"[split {fraction}] training on {len(train)} lines")
        state, timings = train_offline(
            [RawLog(r.line_no, r.body) for r in train], config)
        if progress:
            progress(f"[split {fraction}] detecting over {len(test)} lines")
        reports, stats = stream_detect(
            (RawLog(r.line_no, r.body) for r in test), state,
            detector_config or config.detector)
        card = score(reports, test, granularity)
        rows.append({
            "dataset": dataset,
            "config_hash": config_hash(config),
            "fraction": fraction,
            "train_lines": len(train),
            "test_lines": len(test),
            "unmatched": stats["unmatched_total"],
            "unmatched_fraction": round(stats["unmatched_total"] / len(test), 4),
            "adopted": stats["adopted"],
            "novel_reported": stats["novel_reported"],
            "reports": len(reports),
            "timings": timings,
            **card.to_json(),
        })
    return rows
