"""Detection evaluation: IoU, PASCAL-style matching, all-point average
precision, mAP at IoU 0.5, and report serialization.

average_precision enumerates distinct score thresholds with integer TP/FP
counts, so its value is exactly the area under the stepwise
precision-envelope/recall curve; a brute-force oracle in the test suite
reproduces it bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelParams, backbone_forward, bind_const, decode_detections, det_head_forward


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    aw, ah = a[2] - a[0], a[3] - a[1]
    bw, bh = b[2] - b[0], b[3] - b[1]
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def match_detections(dets, gts, iou_thresh: float = 0.5):
    """TP/FP flag per detection, in input order.

    Detections must arrive score-descending. Each ground truth matches at
    most one detection: the detection takes the highest-IoU unmatched GT of
    its class at or above the threshold.
    """
    flags = []
    used = [False] * len(gts)
    for det in dets:
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if used[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            used[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _pr_points(flags, scores, n_gt: int):
    """Stepwise PR curve at every distinct score threshold, recall ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    f = flags[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    boundary = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    recalls = []
    precisions = []
    for idx in boundary:
        t = int(tp[idx])
        p = int(fp[idx])
        recalls.append(t / n_gt)
        precisions.append(t / (t + p))
    return recalls, precisions


def average_precision(flags, scores, n_gt: int) -> float:
    """All-point AP: area under the precision envelope over recall."""
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0 or len(flags) == 0:
        return 0.0
    if len(flags) != len(scores):
        raise ValueError("flags and scores must align")
    recalls, precisions = _pr_points(flags, scores, n_gt)
    env = list(precisions)
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


@dataclass
class MetricsReport:
    per_class_ap: dict
    map: float
    counts: dict
    protocol: str | None = None

    def to_dict(self) -> dict:
        return {"per_class_ap": self.per_class_ap, "map": self.map,
                "counts": self.counts, "protocol": self.protocol}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        return cls(per_class_ap=d["per_class_ap"], map=d["map"],
                   counts=d["counts"], protocol=d.get("protocol"))


def eval_image_for_split(sample):
    """Clear image for source-domain splits, foggy for target-domain ones."""
    return sample.clear if sample.domain == "source" else sample.foggy


def evaluate(params: ModelParams, dataset, split: str, conf_floor: float = 0.05,
             protocol: str | None = None, nms_iou: float = 0.5) -> MetricsReport:
    """Run the detector over a split and compute per-class AP and mAP@0.5.

    Only the backbone and detection head run; auxiliary heads are unused at
    test time. Classes with no ground truth in the split are excluded from
    the mean.
    """
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    class_names = dataset.class_names
    n_classes = len(class_names)
    p = bind_const(params)

    per_class_flags = {c: [] for c in range(n_classes)}
    per_class_scores = {c: [] for c in range(n_classes)}
    gt_counts = {c: 0 for c in range(n_classes)}

    for sample_id in ids:
        sample = dataset.load(sample_id, unseal=True)
        image = eval_image_for_split(sample)
        feat = backbone_forward(p, image, params.image_size)
        raw = det_head_forward(p, feat, params.num_classes)
        dets = decode_detections(raw, conf_thresh=conf_floor, nms_iou=nms_iou,
                                 image_size=params.image_size)
        labels = sample.labels or []
        for lab in labels:
            gt_counts[lab.class_id] += 1
        for c in range(n_classes):
            cdets = [d for d in dets if d.class_id == c]
            cgts = [g for g in labels if g.class_id == c]
            flags = match_detections(cdets, cgts, iou_thresh=0.5)
            for d, f in zip(cdets, flags):
                per_class_flags[c].append(f)
                per_class_scores[c].append(d.score)

    per_class_ap = {}
    present = []
    for c, name in enumerate(class_names):
        if gt_counts[c] == 0:
            continue
        ap = average_precision(per_class_flags[c], per_class_scores[c], gt_counts[c])
        per_class_ap[name] = ap
        present.append(ap)
    mean_ap = float(np.mean(present)) if present else 0.0
    return MetricsReport(
        per_class_ap=per_class_ap,
        map=mean_ap,
        counts={class_names[c]: gt_counts[c] for c in range(n_classes)},
        protocol=protocol,
    )
