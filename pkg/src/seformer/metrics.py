"""Detection metrics and experiment reports.

Average precision uses confidence-sorted greedy IoU matching per scene and
exact area under the stepwise precision-recall curve.  Heading accuracy is
the fraction of matched detections whose predicted yaw falls in the same
angular bin as the ground truth.  Reports serialize to JSON/CSV with a
stable field order and no timestamps in data rows, so fixed inputs give
byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, heading_bin, iou3d
from .exceptions import ContractError

TIER_NAMES = ("near", "mid", "far")


@dataclass
class Detection:
    scene_id: int
    box: Box
    confidence: float
    heading_yaw: float


@dataclass
class SceneTruth:
    scene_id: int
    boxes: list
    tier: str


def _greedy_match(dets: list[Detection], truths: dict[int, SceneTruth],
                  iou_thresh: float):
    """Confidence-descending greedy matching; returns per-det (tp, gt_box)."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].scene_id, i))
    used: dict[int, set] = {}
    results = [None] * len(dets)
    for i in order:
        det = dets[i]
        truth = truths.get(det.scene_id)
        best_j, best_iou = -1, 0.0
        if truth is not None:
            taken = used.setdefault(det.scene_id, set())
            for j, gt in enumerate(truth.boxes):
                if j in taken:
                    continue
                v = iou3d(det.box, gt)
                if v > best_iou:
                    best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thresh:
            used[det.scene_id].add(best_j)
            results[i] = (True, truths[det.scene_id].boxes[best_j])
        else:
            results[i] = (False, None)
    return order, results


def average_precision(dets: list[Detection], truths: dict[int, SceneTruth],
                      iou_thresh: float) -> float:
    """Area under the stepwise precision-recall curve."""
    n_gt = sum(len(t.boxes) for t in truths.values())
    if n_gt == 0 or not dets:
        return 0.0
    order, results = _greedy_match(dets, truths, iou_thresh)
    tp = fp = 0
    area = 0.0
    prev_recall = 0.0
    for i in order:
        if results[i][0]:
            tp += 1
        else:
            fp += 1
        recall = tp / n_gt
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def heading_accuracy(dets: list[Detection], truths: dict[int, SceneTruth],
                     iou_thresh: float = 0.5, n_bins: int = 8) -> float:
    """Bin-match rate of predicted headings over IoU-matched detections."""
    _, results = _greedy_match(dets, truths, iou_thresh)
    hits = total = 0
    for det, res in zip(dets, results):
        if res[0]:
            total += 1
            if heading_bin(det.heading_yaw, n_bins) == heading_bin(res[1].yaw,
                                                                   n_bins):
                hits += 1
    return hits / total if total else 0.0


def mean_refined_iou(dets: list[Detection], truths: dict[int, SceneTruth]) -> float:
    """Mean best-truth IoU over all detections (no threshold)."""
    vals = []
    for det in dets:
        truth = truths.get(det.scene_id)
        if truth is None or not truth.boxes:
            vals.append(0.0)
            continue
        vals.append(max(iou3d(det.box, gt) for gt in truth.boxes))
    return float(np.mean(vals)) if vals else 0.0


METRIC_FIELDS = ("heading_acc", "mean_iou", "ap50", "ap70")


def compute_metrics(dets: list[Detection], truths: dict[int, SceneTruth],
                    n_bins: int = 8) -> dict:
    """Overall and per-tier metric dictionary for one evaluation pass."""
    out = {
        "heading_acc": heading_accuracy(dets, truths, 0.5, n_bins),
        "mean_iou": mean_refined_iou(dets, truths),
        "ap50": average_precision(dets, truths, 0.5),
        "ap70": average_precision(dets, truths, 0.7),
    }
    for tier in TIER_NAMES:
        sub_truths = {sid: t for sid, t in truths.items() if t.tier == tier}
        sub_dets = [d for d in dets if d.scene_id in sub_truths]
        out[f"{tier}_heading_acc"] = heading_accuracy(sub_dets, sub_truths, 0.5,
                                                      n_bins)
        out[f"{tier}_ap70"] = average_precision(sub_dets, sub_truths, 0.7)
        out[f"{tier}_mean_iou"] = mean_refined_iou(sub_dets, sub_truths)
    return out


ROW_FIELDS = METRIC_FIELDS + tuple(
    f"{tier}_{m}" for tier in TIER_NAMES for m in ("heading_acc", "ap70", "mean_iou"))


@dataclass
class MetricsReport:
    """Per-seed metrics plus exact-mean aggregates for one configuration."""

    label: str
    config_hash: str
    rows: dict = field(default_factory=dict)   # seed -> {metric: value}
    wall_clock: float = 0.0                    # kept out of serialized data rows

    def add_seed(self, seed: int, metrics: dict) -> None:
        self.rows[int(seed)] = {k: float(metrics[k]) for k in ROW_FIELDS}

    def mean(self, metric: str) -> float:
        vals = [row[metric] for row in self.rows.values()]
        return float(np.mean(vals)) if vals else 0.0

    def std(self, metric: str) -> float:
        vals = [row[metric] for row in self.rows.values()]
        return float(np.std(vals)) if vals else 0.0

    def to_json(self) -> str:
        payload = {
            "label": self.label,
            "config_hash": self.config_hash,
            "rows": {str(seed): self.rows[seed] for seed in sorted(self.rows)},
            "mean": {m: self.mean(m) for m in ROW_FIELDS},
            "std": {m: self.std(m) for m in ROW_FIELDS},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        payload = json.loads(text)
        report = MetricsReport(payload["label"], payload["config_hash"])
        for seed, row in payload["rows"].items():
            report.rows[int(seed)] = {k: float(row[k]) for k in ROW_FIELDS}
        return report


CSV_COLUMNS = ("label", "config_hash", "seed") + ROW_FIELDS


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        for seed in sorted(report.rows):
            row = report.rows[seed]
            writer.writerow([report.label, report.config_hash, seed]
                            + [f"{row[m]:.10g}" for m in ROW_FIELDS])
    return buf.getvalue()


def emit_report(reports: list[MetricsReport], fmt: str, out_dir) -> list:
    """Write reports as csv, json, or metric-vs-label plots; returns paths."""
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "csv":
        path = out_dir / "report.csv"
        path.write_text(reports_to_csv(reports))
        written.append(path)
    elif fmt == "json":
        path = out_dir / "report.json"
        body = "[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n" \
            if reports else "[]\n"
        path.write_text(body)
        written.append(path)
    elif fmt == "plot":
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        for metric in ("heading_acc", "ap70"):
            fig, ax = plt.subplots(figsize=(5, 3.2))
            labels = [r.label for r in reports]
            means = [r.mean(metric) for r in reports]
            stds = [r.std(metric) for r in reports]
            ax.errorbar(range(len(labels)), means, yerr=stds, marker="o")
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels, rotation=20, ha="right")
            ax.set_ylabel(metric)
            fig.tight_layout()
            path = out_dir / f"{metric}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)
    else:
        raise ContractError(f"unknown report format {fmt!r}; use csv, json or plot")
    return written
