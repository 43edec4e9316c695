"""Detection metrics: IoU / generalized IoU on (cx, cy, w, h) boxes,
COCO-style average precision over the 0.50:0.05:0.95 threshold band with
101-point interpolation, and a class confusion matrix with an explicit
background row/column.

Everything here is plain numpy on raw values; the differentiable box terms
used by the training loss live elsewhere, which makes these functions an
independent cross-check of those.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """(cx, cy, w, h) -> (x1, y1, x2, y2), vectorized over leading axes."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _check_box(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ShapeError(f"box must have 4 entries, got shape {box.shape}")
    if box[2] <= 0 or box[3] <= 0:
        raise ShapeError(f"degenerate box with non-positive extent: {box.tolist()}")
    return box


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    a = box_corners(_check_box(a))
    b = box_corners(_check_box(b))
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return float(inter / union)


def giou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU minus the normalized dead area of the smallest enclosing box."""
    a = box_corners(_check_box(a))
    b = box_corners(_check_box(b))
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    enclose = ((max(a[2], b[2]) - min(a[0], b[0]))
               * (max(a[3], b[3]) - min(a[1], b[1])))
    return float(inter / union - (enclose - union) / enclose)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two stacks of (cx, cy, w, h) boxes: (m, n)."""
    a = box_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = box_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = box_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = box_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    lt_enc = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_enc = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_enc = rb_enc - lt_enc
    enclose = wh_enc[..., 0] * wh_enc[..., 1]
    return inter / union - (enclose - union) / enclose


@dataclass
class Detection:
    episode_id: int
    class_id: int
    score: float
    box: np.ndarray  # (cx, cy, w, h)


@dataclass
class GtRecord:
    episode_id: int
    class_id: int
    box: np.ndarray


def average_precision(dets: list[Detection], gts: list[GtRecord],
                      iou_threshold: float) -> float:
    """Single-class average precision with 101-point interpolation.

    Detections are greedily matched in descending score order; each ground
    truth is consumed at most once; matches must reach the IoU threshold and
    stay within the same episode.
    """
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    for d in dets:
        if not np.isfinite(d.score):
            raise ValueError(f"non-finite detection score: {d.score}")

    gt_by_episode: dict[int, list[int]] = {}
    for i, g in enumerate(gts):
        gt_by_episode.setdefault(g.episode_id, []).append(i)
    used = np.zeros(len(gts), dtype=bool)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        det = dets[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_episode.get(det.episode_id, ()):
            if used[gi]:
                continue
            v = iou(det.box, gts[gi].box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            used[best_gi] = True
            tp[rank] = 1
        else:
            fp[rank] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)

    # 101-point interpolation: for each recall grid point take the best
    # precision achieved at that recall or beyond.
    grid = np.linspace(0.0, 1.0, 101)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in grid:
        idx = np.searchsorted(recall, r, side="left")
        if idx < len(envelope):
            ap += envelope[idx]
    return float(ap / len(grid))


def confusion_matrix(dets: list[Detection], gts: list[GtRecord],
                     iou_threshold: float, class_ids: list[int]) -> np.ndarray:
    """(C+1) x (C+1) count matrix, rows true class / columns predicted,
    final index is background. Each detection is assigned to its best-IoU
    unused ground truth of any class (score order, same episode); unmatched
    detections land in the BG row, unmatched ground truths in the BG column.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou threshold must lie in (0, 1), got {iou_threshold}")
    index = {cid: i for i, cid in enumerate(class_ids)}
    bg = len(class_ids)
    counts = np.zeros((bg + 1, bg + 1), dtype=np.int64)

    gt_by_episode: dict[int, list[int]] = {}
    for i, g in enumerate(gts):
        gt_by_episode.setdefault(g.episode_id, []).append(i)
    used = np.zeros(len(gts), dtype=bool)

    for di in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        det = dets[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_episode.get(det.episode_id, ()):
            if used[gi]:
                continue
            v = iou(det.box, gts[gi].box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            used[best_gi] = True
            counts[index[gts[best_gi].class_id], index[det.class_id]] += 1
        else:
            counts[bg, index[det.class_id]] += 1
    for gi, g in enumerate(gts):
        if not used[gi]:
            counts[index[g.class_id], bg] += 1
    return counts


@dataclass
class EvalReport:
    class_ids: list[int]
    thresholds: list[float]
    ap: np.ndarray                 # (C, T) per-class AP per threshold
    confusion: np.ndarray          # (C+1, C+1) raw counts at threshold 0.5
    episode_count: int
    detection_count: int = 0
    gt_count: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def map_per_threshold(self) -> np.ndarray:
        return self.ap.mean(axis=0) if self.ap.size else np.zeros(len(self.thresholds))

    @property
    def map_50(self) -> float:
        idx = self.thresholds.index(0.5)
        return float(self.map_per_threshold[idx])

    @property
    def map_band(self) -> float:
        """mAP averaged over the whole threshold band."""
        return float(self.map_per_threshold.mean()) if self.ap.size else 0.0

    @property
    def confusion_normalized(self) -> np.ndarray:
        """Row-normalized view of the confusion counts (rows that are all
        zero stay zero)."""
        c = self.confusion.astype(np.float64)
        sums = c.sum(axis=1, keepdims=True)
        return np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "class_ids": list(map(int, self.class_ids)),
            "thresholds": [float(t) for t in self.thresholds],
            "ap": self.ap.tolist(),
            "confusion": self.confusion.tolist(),
            "episode_count": int(self.episode_count),
            "detection_count": int(self.detection_count),
            "gt_count": int(self.gt_count),
            "map_50": self.map_50,
            "map_band": self.map_band,
            "extras": self.extras,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        payload = json.loads(text)
        return EvalReport(
            class_ids=list(payload["class_ids"]),
            thresholds=list(payload["thresholds"]),
            ap=np.asarray(payload["ap"], dtype=np.float64).reshape(
                len(payload["class_ids"]), len(payload["thresholds"])),
            confusion=np.asarray(payload["confusion"], dtype=np.int64),
            episode_count=payload["episode_count"],
            detection_count=payload.get("detection_count", 0),
            gt_count=payload.get("gt_count", 0),
            extras=payload.get("extras", {}),
        )

    def table(self) -> str:
        lines = ["class      " + "  ".join(f"AP@{t:.2f}" for t in self.thresholds)]
        for i, cid in enumerate(self.class_ids):
            row = "  ".join(f"{self.ap[i, j]:7.3f}" for j in range(len(self.thresholds)))
            lines.append(f"class {cid:<4d} {row}")
        lines.append(f"mAP@0.5 = {self.map_50:.4f}   mAP@[0.5:0.95] = {self.map_band:.4f}")
        return "\n".join(lines)


def evaluate_detections(dets: list[Detection], gts: list[GtRecord],
                        class_ids: list[int], episode_count: int,
                        thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Per-class AP across the threshold band plus the 0.5-IoU confusion
    matrix. Classes with no ground truth anywhere are excluded from AP rows
    (COCO convention)."""
    thresholds = [float(t) for t in thresholds]
    present = [cid for cid in class_ids
               if any(g.class_id == cid for g in gts)]
    ap = np.zeros((len(present), len(thresholds)))
    for i, cid in enumerate(present):
        cls_dets = [d for d in dets if d.class_id == cid]
        cls_gts = [g for g in gts if g.class_id == cid]
        for j, t in enumerate(thresholds):
            ap[i, j] = average_precision(cls_dets, cls_gts, t)
    confusion = confusion_matrix(dets, gts, 0.5, list(class_ids))
    return EvalReport(class_ids=list(present), thresholds=thresholds, ap=ap,
                      confusion=confusion, episode_count=episode_count,
                      detection_count=len(dets), gt_count=len(gts))
