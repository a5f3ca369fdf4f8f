"""Dice overlap and per-iteration run reports."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_mask, check_same_shape

STRATEGIES = ("top_dsc", "unet_only", "labeled_only")
REPORT_HEADER = ("iteration", "strategy", "test_dsc", "selected_ids", "proxy_scores")


def dsc(a, b):
    """Dice coefficient ``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = check_mask(a, "a")
    b = check_mask(b, "b")
    check_same_shape(a, b, ("a", "b"))
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a + size_b == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (size_a + size_b)


def evaluate(params, test_set, arch=None):
    """Mean Dice of the student's masks over ``[(image, mask), ...]``."""
    from .student import predict

    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    scores = [dsc(predict(params, img, arch)[1], mask) for img, mask in test_set]
    return float(np.mean(scores))


@dataclass
class IterationReport:
    iteration: int
    strategy: str
    test_dsc: float
    selected_ids: list = field(default_factory=list)
    proxy_scores: list = field(default_factory=list)

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError("iteration numbers start at 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if len(self.selected_ids) != len(self.proxy_scores):
            raise ValueError("selected_ids and proxy_scores must have equal length")
        if not 0.0 <= self.test_dsc <= 1.0:
            raise ValueError("test_dsc must lie in [0, 1]")


def _row(report):
    return [
        str(report.iteration),
        report.strategy,
        f"{report.test_dsc:.6f}",
        ";".join(str(i) for i in report.selected_ids),
        ";".join(f"{s:.6f}" for s in report.proxy_scores),
    ]


def write_report(reports, path):
    """CSV, one row per report; floats to 6 decimals, lists joined with ``;``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerow(_row(report))


def read_report(path):
    reports = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_HEADER:
            raise ValueError(f"unexpected report header {header}")
        for it, strategy, test_dsc, ids, scores in reader:
            reports.append(IterationReport(
                iteration=int(it),
                strategy=strategy,
                test_dsc=float(test_dsc),
                selected_ids=ids.split(";") if ids else [],
                proxy_scores=[float(s) for s in scores.split(";")] if scores else [],
            ))
    return reports


def write_jsonl(reports, path):
    """JSON-lines mirror of :func:`write_report` (full float precision, NaN as null)."""
    with open(path, "w") as fh:
        for report in reports:
            row = asdict(report)
            row["proxy_scores"] = [None if np.isnan(s) else s for s in row["proxy_scores"]]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
