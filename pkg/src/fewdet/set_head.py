"""Set-prediction detection head.

Predictions are per-object-query boxes plus independent sigmoid
probabilities mapped one-to-one onto support sequence positions, background
placeholders included. Bipartite matching excludes the background columns
entirely; the loss then supervises them explicitly: a matched query targets
1 at its ground-truth class position and 0 everywhere else, an unmatched
query targets 1 at every placeholder position.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericError, ShapeError
from .metrics import giou_matrix
from .obd import SupportSequence
from .tensor import (Tensor, concat_channels, maximum, minimum, mul, relu,
                     sigmoid, slice_cols, softplus, sub, take_rows, tmean, tsum,
                     tabs)


@dataclass
class Weights:
    """Shared weighting of the classification / L1 / GIoU terms, used both
    for the matching cost and the training loss."""

    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class DetectionOutput:
    boxes: Tensor            # (M, 4) normalized (cx, cy, w, h), sigmoid outputs
    position_probs: Tensor   # (M, N) independent sigmoid per support position
    position_logits: Tensor  # (M, N) pre-sigmoid logits, used by the loss

    def __post_init__(self):
        m = self.boxes.shape[0]
        if self.boxes.shape != (m, 4):
            raise ShapeError(f"boxes must be (M, 4), got {self.boxes.shape}")
        if self.position_probs.shape != self.position_logits.shape \
                or self.position_probs.shape[0] != m:
            raise ShapeError("position probability/logit shapes disagree")

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[0]


@dataclass
class GroundTruth:
    boxes: np.ndarray   # (G, 4) normalized (cx, cy, w, h)
    labels: np.ndarray  # (G,) class ids

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.boxes.shape[0]} boxes but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int] = field(default_factory=list)


def _lsa_total(cost: np.ndarray) -> float:
    if cost.size == 0 or min(cost.shape) == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of queries (rows) to ground truths (columns).

    Matches min(M, G) pairs. Among equally cheap assignments the result is
    canonical: the pair list sorted by query index is lexicographically
    smallest on (query index, gt index). When G > M (more ground truths than
    queries) the cheapest M ground truths are matched and a diagnostic
    warning is emitted.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-d, got {cost.shape}")
    m, g = cost.shape
    if g == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(m)))
    if not np.isfinite(cost).all():
        raise NumericError("hungarian_match: non-finite cost entries")
    if g > m:
        warnings.warn(f"more ground truths ({g}) than queries ({m}); "
                      f"matching the {m} cheapest", RuntimeWarning)

    total = _lsa_total(cost)
    tol = 1e-9 * max(1.0, abs(total))
    total_pairs = min(m, g)

    pairs: list[tuple[int, int]] = []
    remaining = list(range(g))
    prefix = 0.0
    for q in range(m):
        if not remaining:
            break
        queries_left_after = m - q - 1
        must_match = queries_left_after < len(remaining) and len(pairs) < total_pairs
        chosen = None
        for cand in remaining:
            rest_g = [x for x in remaining if x != cand]
            needed = total_pairs - len(pairs) - 1
            if min(queries_left_after, len(rest_g)) < needed:
                continue
            sub_cost = cost[np.ix_(range(q + 1, m), rest_g)] if rest_g else \
                np.zeros((0, 0))
            completion = _lsa_total(sub_cost) if rest_g else 0.0
            if prefix + cost[q, cand] + completion <= total + tol:
                chosen = cand
                break
        if chosen is None:
            if must_match:
                # Cannot happen for a finite cost matrix: some optimal
                # completion always exists. Guard against tolerance slippage.
                chosen = remaining[0]
            else:
                continue
        pairs.append((q, chosen))
        prefix += cost[q, chosen]
        remaining.remove(chosen)

    matched_q = {q for q, _ in pairs}
    unmatched = [q for q in range(m) if q not in matched_q]
    return MatchResult(pairs=pairs, unmatched_queries=unmatched)


def match_cost(out: DetectionOutput, gt: GroundTruth, s: SupportSequence,
               weights: Weights) -> np.ndarray:
    """(M, G) matching cost: -probability at the ground truth's support
    position, L1 box distance, and GIoU complement. Background-position
    probabilities never enter. Computed on raw values; matching carries no
    gradient."""
    positions = [s.position_of_class(int(label)) for label in gt.labels]
    probs = out.position_probs.data
    boxes = out.boxes.data
    cost_cls = -probs[:, positions]
    cost_l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=2)
    cost_giou = 1.0 - giou_matrix(boxes, gt.boxes)
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def _corners(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx = slice_cols(boxes, 0, 1)
    cy = slice_cols(boxes, 1, 2)
    w = slice_cols(boxes, 2, 3)
    h = slice_cols(boxes, 3, 4)
    half_w = w * 0.5
    half_h = h * 0.5
    return cx - half_w, cy - half_h, cx + half_w, cy + half_h


def giou_pairs(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable GIoU of row-aligned box pairs; returns a (K, 1) tensor."""
    px1, py1, px2, py2 = _corners(pred)
    tx1, ty1, tx2, ty2 = _corners(target)
    iw = relu(minimum(px2, tx2) - maximum(px1, tx1))
    ih = relu(minimum(py2, ty2) - maximum(py1, ty1))
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    enc_w = maximum(px2, tx2) - minimum(px1, tx1)
    enc_h = maximum(py2, ty2) - minimum(py1, ty1)
    enclose = enc_w * enc_h
    return inter / union - (enclose - union) / enclose


def set_loss(out: DetectionOutput, gt: GroundTruth, s: SupportSequence,
             match: MatchResult, weights: Weights) -> tuple[Tensor, dict[str, float]]:
    """Classification + localization loss under a fixed matching.

    Classification is binary cross-entropy over every (query, position)
    probability, with a balanced reduction: the few positive entries and the
    many negative entries are averaged separately, so positives are not
    drowned out. Localization (matched queries only) is weighted L1 plus
    GIoU complement, averaged over matched pairs. Returns the scalar loss
    tensor and a float breakdown {cls, box, giou}.
    """
    m, n = out.position_logits.shape
    if len(gt) and ((gt.boxes[:, 2] <= 0).any() or (gt.boxes[:, 3] <= 0).any()):
        raise ShapeError("ground truth contains a degenerate box (w or h <= 0)")

    targets = np.zeros((m, n))
    placeholder_positions = s.placeholder_positions
    matched_queries = {q for q, _ in match.pairs}
    for q, g in match.pairs:
        targets[q, s.position_of_class(int(gt.labels[g]))] = 1.0
    for q in range(m):
        if q not in matched_queries:
            for pos in placeholder_positions:
                targets[q, pos] = 1.0

    # Stable BCE from logits: t*softplus(-z) + (1-t)*softplus(z), each class
    # of entry averaged on its own.
    z = out.position_logits
    n_pos = targets.sum()
    n_neg = targets.size - n_pos
    pos_weights = targets / n_pos if n_pos else targets
    neg_weights = (1.0 - targets) / n_neg if n_neg else (1.0 - targets)
    bce_pos = tsum(mul(Tensor(pos_weights), softplus(-z)))
    bce_neg = tsum(mul(Tensor(neg_weights), softplus(z)))
    bce = (bce_pos + bce_neg) * 0.5
    cls_term = weights.cls * bce

    if match.pairs:
        q_idx = [q for q, _ in match.pairs]
        g_idx = [g for _, g in match.pairs]
        pred_boxes = take_rows(out.boxes, q_idx)
        gt_boxes = Tensor(gt.boxes[g_idx])
        l1 = tmean(tsum(tabs(sub(pred_boxes, gt_boxes)), axis=1))
        g = tmean(1.0 - giou_pairs(pred_boxes, gt_boxes))
        box_term = weights.l1 * l1
        giou_term = weights.giou * g
        total = cls_term + box_term + giou_term
    else:
        box_term = Tensor(0.0)
        giou_term = Tensor(0.0)
        total = cls_term

    breakdown = {"cls": cls_term.item(), "box": box_term.item(),
                 "giou": giou_term.item()}
    return total, breakdown


def decode_detections(out: DetectionOutput, s: SupportSequence,
                      score_threshold: float) -> list[tuple[int, float, np.ndarray]]:
    """Per query: the best class-position probability becomes the score;
    queries at or above the threshold emit (class_id, score, box).
    Placeholder positions never produce detections."""
    if not (0.0 <= score_threshold <= 1.0):
        raise ValueError(f"score threshold must lie in [0, 1], got {score_threshold}")
    class_positions = s.class_positions
    if not class_positions:
        return []
    probs = out.position_probs.data
    boxes = out.boxes.data
    detections = []
    for q in range(out.num_queries):
        row = probs[q, class_positions]
        best = int(np.argmax(row))
        score = float(row[best])
        if score >= score_threshold:
            class_id = s.slots[class_positions[best]].class_id
            detections.append((class_id, score, boxes[q].copy()))
    return detections
