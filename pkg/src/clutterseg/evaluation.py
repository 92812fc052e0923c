"""Class-agnostic instance AP and per-category semantic IoU on voxel grids."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def voxelize(points, edge=0.01) -> frozenset:
    """Set of integer cells floor(p / edge) occupied by ``points``."""
    if not edge > 0:
        raise ValueError("edge must be > 0")
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        return frozenset()
    cells = np.unique(np.floor(pts / edge).astype(np.int64), axis=0)
    return frozenset(map(tuple, cells.tolist()))


def instance_iou_3d(pred, gt) -> float:
    pred, gt = set(pred), set(gt)
    union = len(pred | gt)
    return len(pred & gt) / union if union else 0.0


@dataclass(frozen=True)
class GroundTruthInstance:
    id: int
    category: int
    voxels: frozenset

    def __post_init__(self):
        if not self.voxels:
            raise ValueError(f"ground-truth instance {self.id} is empty")


@dataclass(frozen=True)
class Prediction:
    id: int
    confidence: float
    voxels: frozenset


@dataclass
class APReport:
    ap25: float
    ap50: float
    map: float
    by_threshold: dict = field(default_factory=dict)   # threshold -> AP
    curves: dict = field(default_factory=dict)         # threshold -> (precision, recall)
    interpolation: str = "101"

    def to_text(self) -> str:
        lines = [f"AP@25 {100 * self.ap25:.2f}", f"AP@50 {100 * self.ap50:.2f}", f"mAP   {100 * self.map:.2f}"]
        lines += [f"  AP@{int(round(100 * t))} {100 * a:.2f}" for t, a in sorted(self.by_threshold.items())]
        return "\n".join(lines) + "\n"

    def to_csv(self, method="clutterseg", seconds=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", "AP25", "AP50", "mAP", "Time"])
        w.writerow([method, f"{100 * self.ap25:.2f}", f"{100 * self.ap50:.2f}", f"{100 * self.map:.2f}",
                    "" if seconds is None else f"{seconds:.2f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"AP25": self.ap25, "AP50": self.ap50, "mAP": self.map, "interpolation": self.interpolation,
                "by_threshold": {f"{t:.2f}": a for t, a in sorted(self.by_threshold.items())}}


def iou_matrix(preds, gts) -> np.ndarray:
    return np.array([[instance_iou_3d(p.voxels, g.voxels) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def match_predictions(ious, order, threshold) -> np.ndarray:
    """Greedy matching in confidence order; True marks a true positive.

    Each prediction takes the unmatched ground truth of highest IoU at or
    above ``threshold`` (ties to the lower ground-truth index).
    """
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for r, p in enumerate(order):
        if ious.shape[1] == 0:
            break
        cand = np.where(~taken & (ious[p] >= threshold), ious[p], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= 0:
            taken[g] = True
            tp[r] = True
    return tp


def pr_curve(tp, n_gt):
    tp = np.asarray(tp, dtype=bool)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    return ctp / ranks, ctp / n_gt


def average_precision(tp, n_gt, interpolation="101") -> float:
    """Area under the interpolated PR curve of a ranked list of TP flags."""
    if n_gt <= 0:
        raise ValueError("no ground truth")
    if len(tp) == 0:
        return 0.0
    prec, rec = pr_curve(tp, n_gt)
    # interpolated precision: best precision at any recall at least as high
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    if interpolation == "101":
        levels = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(rec, levels - 1e-12, side="left")
        vals = np.where(idx < len(rec), interp[np.minimum(idx, len(rec) - 1)], 0.0)
        return float(vals.mean())
    if interpolation == "all":
        r_prev = np.concatenate([[0.0], rec[:-1]])
        return float(np.sum((rec - r_prev) * interp))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def instance_ap(predictions, ground_truth, thresholds=None, interpolation="101") -> APReport:
    """AP at 25/50% IoU and mAP over 50:5:95 for class-agnostic instances."""
    gts = list(ground_truth)
    if not gts:
        raise ValueError("no ground truth")
    preds = list(predictions)
    thresholds = sorted(set((0.25, 0.5) + MAP_THRESHOLDS + tuple(thresholds or ())))
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].id))
    ious = iou_matrix(preds, gts)
    by, curves = {}, {}
    for t in thresholds:
        tp = match_predictions(ious, order, t)
        by[t] = average_precision(tp, len(gts), interpolation)
        curves[t] = pr_curve(tp, len(gts)) if len(tp) else (np.zeros(0), np.zeros(0))
    return APReport(by[0.25], by[0.5], float(np.mean([by[t] for t in MAP_THRESHOLDS])), by, curves, interpolation)


# ---------------------------------------------------------------- semantic IoU

@dataclass
class SemanticReport:
    per_category: dict
    mean: float
    excluded: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"category {c}: IoU {100 * v:.2f}" for c, v in sorted(self.per_category.items())]
        lines.append(f"mean IoU {100 * self.mean:.2f}")
        if self.excluded:
            lines.append("excluded (no ground truth): " + ", ".join(map(str, self.excluded)))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Category", "IoU"])
        for c, v in sorted(self.per_category.items()):
            w.writerow([c, f"{100 * v:.2f}"])
        w.writerow(["mean", f"{100 * self.mean:.2f}"])
        return buf.getvalue()


def semantic_iou(predicted: dict, gt_by_category: dict) -> SemanticReport:
    """Per-category IoU between predicted voxels and ground-truth voxels.

    ``predicted`` maps category -> voxel set of the instance(s) chosen for
    that category's query; ``gt_by_category`` maps category -> voxel set of
    all ground-truth objects of that category.
    """
    per, excluded = {}, []
    for c in sorted(predicted):
        gt = gt_by_category.get(c)
        if not gt:
            logger.warning("category %s absent from ground truth; excluded", c)
            excluded.append(c)
            continue
        per[c] = instance_iou_3d(predicted[c], gt)
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return SemanticReport(per, mean, excluded)


# ---------------------------------------------------------------- file inputs

def gt_instances_from_cloud(positions, labels, categories: dict, edge=0.01) -> list[GroundTruthInstance]:
    """One ground-truth instance per label >= 0, voxelized at ``edge``."""
    labels = np.asarray(labels)
    out = []
    for oid in np.unique(labels[labels >= 0]).tolist():
        out.append(GroundTruthInstance(int(oid), int(categories.get(oid, -1)), voxelize(positions[labels == oid], edge)))
    return out


def ground_truth_from_bundle(bundle, gt_record: dict, cfg=None) -> list[GroundTruthInstance]:
    """Fuse the per-frame label images the same way as the input and voxelize."""
    from .config import PipelineConfig
    from .geometry import GeometryParams, fuse_and_downsample
    cfg = cfg or PipelineConfig()
    cloud = fuse_and_downsample(bundle.frames, GeometryParams.from_config(cfg), labels=gt_record["labels"])
    cats = {o["id"]: o["category"] for o in gt_record["objects"]}
    return gt_instances_from_cloud(cloud.positions, cloud.labels, cats, cfg.eval_voxel_m)


def predictions_from_output(path, edge=0.01) -> list[Prediction]:
    """Instances from a ``segment`` output directory (points.ply + instances.json)."""
    from .scene_io import read_instance_manifest, read_point_file
    path = Path(path)
    manifest = read_instance_manifest(path)
    pts = read_point_file(path / "points.ply")
    xyz = np.stack([pts["x"], pts["y"], pts["z"]], axis=1)
    out = []
    for inst in manifest["instances"]:
        sel = pts["label"] == inst["id"]
        out.append(Prediction(int(inst["id"]), float(inst["confidence"]), voxelize(xyz[sel], edge)))
    return out


def predictions_from_instances(instances, positions, edge=0.01) -> list[Prediction]:
    return [Prediction(i.id, float(i.confidence), voxelize(positions[i.points], edge)) for i in instances]


def write_report(path, report, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "report.txt").write_text(report.to_text())
    (path / "report.csv").write_text(report.to_csv())
    if isinstance(report, APReport):
        (path / "report.json").write_text(json.dumps({**report.to_dict(), **(extra or {})}, indent=1, sort_keys=True))
