"""Detection evaluation: box overlap measures, the DETR-style joint match
cost, optimal bipartite assignment, precision/recall/F1, and mAP@0.5.

The assignment routine returns the lexicographically smallest optimal
matching (lowest row index first, then lowest column), so results are
reproducible even under cost ties.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import EvalError, ValidationError
from .qa_eval import round_half_up

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25

DEFAULT_WEIGHTS = (2.0, 5.0, 2.0)  # lambda_cls, lambda_l1, lambda_giou


@dataclass(frozen=True)
class DetBox:
    image_id: str
    cls: int
    box: tuple  # (x1, y1, x2, y2)
    score: float = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValidationError("bbox", f"degenerate box {self.box}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValidationError("score", f"score {self.score} outside [0,1]")


def _area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (_area(a) + _area(b) - inter)


def giou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = ix * iy if (ix > 0.0 and iy > 0.0) else 0.0
    union = _area(a) + _area(b) - inter
    hull = ((max(a[2], b[2]) - min(a[0], b[0]))
            * (max(a[3], b[3]) - min(a[1], b[1])))
    return inter / union - (hull - union) / hull


def focal_cost(p: float) -> float:
    """-alpha * (1-p)^gamma * log p, the focal penalty on the probability
    assigned to the true class."""
    if not 0.0 < p <= 1.0:
        raise ValidationError("prob", f"class probability {p} outside (0,1]")
    if p == 1.0:
        return 0.0
    return FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (-math.log(p))


def match_cost(pred_box, gt_box, p_gt_class, weights=DEFAULT_WEIGHTS) -> float:
    """Joint matching cost; box coordinates must be normalized to [0,1]
    so the L1 term is scale-free."""
    l_cls, l_l1, l_giou = weights
    if l_cls < 0 or l_l1 < 0 or l_giou < 0 or (l_cls + l_l1 + l_giou) == 0:
        raise ValidationError("weights", "weights must be nonnegative, not all zero")
    l1 = sum(abs(p - g) for p, g in zip(pred_box, gt_box))
    return (l_cls * focal_cost(p_gt_class) + l_l1 * l1
            + l_giou * (1.0 - giou(pred_box, gt_box)))


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def _solve_total(cost):
    """Optimal total for assigning every row (rows <= cols), by the
    shortest-augmenting-path potentials method."""
    n, m = len(cost), len(cost[0])
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0, delta, j1 = p[j0], INF, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return sum(cost[p[j] - 1][j - 1] for j in range(1, m + 1) if p[j])


def _optimal_total(cost, rows, cols):
    """Optimal total over min(|rows|,|cols|) pairs of the submatrix."""
    if not rows or not cols:
        return 0.0
    sub = [[cost[i][j] for j in cols] for i in rows]
    if len(rows) > len(cols):
        sub = [list(r) for r in zip(*sub)]
    return _solve_total(sub)


def hungarian(cost):
    """Min-cost one-to-one assignment of min(n, m) pairs; returns sorted
    (row, col) pairs, lexicographically smallest among optimal solutions.

    Built by fixing pairs in row/column order and verifying each fix
    leaves the remaining subproblem able to reach the optimal total.
    """
    n = len(cost)
    m = len(cost[0]) if n else 0
    if any(len(r) != m for r in cost):
        raise ValidationError("cost", "ragged cost matrix")
    if any(not math.isfinite(c) for row in cost for c in row):
        raise ValidationError("cost", "non-finite cost entry")
    if n == 0 or m == 0:
        return []
    rows, cols = list(range(n)), list(range(m))
    target = _optimal_total(cost, rows, cols)
    pairs = []
    remaining = min(n, m)
    for i in list(rows):
        if remaining == 0:
            break
        fixed = None
        can_skip = len(rows) > remaining  # some rows must go unassigned
        for j in cols:
            rest = _optimal_total(cost, [r for r in rows if r != i],
                                  [c for c in cols if c != j])
            if math.isclose(cost[i][j] + rest, target,
                            rel_tol=1e-9, abs_tol=1e-9):
                fixed = j
                break
        if fixed is None:
            if not can_skip:
                raise EvalError("assignment verification failed")
            rows.remove(i)
            continue
        pairs.append((i, fixed))
        rows.remove(i)
        cols.remove(fixed)
        target -= cost[i][fixed]
        remaining -= 1
    return pairs


# ---------------------------------------------------------------------------
# PR / F1 / mAP
# ---------------------------------------------------------------------------

def f1_score(precision, recall) -> float:
    """Harmonic mean; unit-agnostic (fractions or percents)."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _canonical(preds):
    return sorted(preds, key=lambda p: (-p.score, p.image_id, p.cls, p.box))


def _greedy_flags(preds, gts, iou_thresh):
    """TP/FP flag per prediction in canonical order. A prediction claims
    the highest-IoU unmatched ground truth of its class and image."""
    order = _canonical(preds)
    matched = set()
    by_key = {}
    for k, g in enumerate(gts):
        by_key.setdefault((g.image_id, g.cls), []).append(k)
    flags = []
    for p in order:
        best, best_iou = None, 0.0
        for k in by_key.get((p.image_id, p.cls), ()):
            if k in matched:
                continue
            v = iou(p.box, gts[k].box)
            if v > best_iou:
                best, best_iou = k, v
        if best is not None and best_iou >= iou_thresh:
            matched.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return order, flags


@dataclass
class DetReport:
    tp: int
    fp: int
    fn: int
    per_class: dict
    map50: float = None

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    def to_dict(self):
        doc = {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": round_half_up(100.0 * self.precision, 2),
            "recall": round_half_up(100.0 * self.recall, 2),
            "f1": round_half_up(100.0 * self.f1, 2),
            "per_class": {},
        }
        if self.map50 is not None:
            doc["map50"] = round_half_up(self.map50, 2)
        for cls in sorted(self.per_class):
            c = self.per_class[cls]
            p = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0
            r = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 0.0
            doc["per_class"][str(cls)] = {
                "tp": c["tp"], "fp": c["fp"], "fn": c["fn"],
                "precision": round_half_up(100.0 * p, 2),
                "recall": round_half_up(100.0 * r, 2),
                "f1": round_half_up(100.0 * f1_score(p, r), 2),
            }
        return doc


def pr_f1(preds, gts, iou_thresh=0.5, score_thresh=None) -> DetReport:
    if score_thresh is not None:
        preds = [p for p in preds if p.score >= score_thresh]
    order, flags = _greedy_flags(preds, gts, iou_thresh)
    per_class = {}
    for g in gts:
        per_class.setdefault(g.cls, {"tp": 0, "fp": 0, "fn": 0})
    for p, ok in zip(order, flags):
        cell = per_class.setdefault(p.cls, {"tp": 0, "fp": 0, "fn": 0})
        cell["tp" if ok else "fp"] += 1
    for cls, cell in per_class.items():
        n_gt = sum(1 for g in gts if g.cls == cls)
        cell["fn"] = n_gt - cell["tp"]
    tp = sum(c["tp"] for c in per_class.values())
    fp = sum(c["fp"] for c in per_class.values())
    fn = sum(c["fn"] for c in per_class.values())
    return DetReport(tp=tp, fp=fp, fn=fn, per_class=per_class)


def _ap_from_flags(flags, n_gt):
    """All-point interpolated AP from ordered TP flags."""
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    precisions, recalls = [], []
    tp = 0
    for i, ok in enumerate(flags, start=1):
        tp += int(ok)
        precisions.append(tp / i)
        recalls.append(tp / n_gt)
    # precision envelope, right to left
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def map50(preds, gts, iou_thresh=0.5) -> float:
    """Mean AP (percent) over classes with at least one ground truth."""
    classes = sorted({g.cls for g in gts})
    if not classes:
        raise EvalError("no ground-truth boxes")
    aps = []
    for cls in classes:
        cls_preds = [p for p in preds if p.cls == cls]
        cls_gts = [g for g in gts if g.cls == cls]
        _, flags = _greedy_flags(cls_preds, cls_gts, iou_thresh)
        aps.append(_ap_from_flags(flags, len(cls_gts)))
    return 100.0 * sum(aps) / len(aps)


def det_report(preds, gts, iou_thresh=0.5, score_thresh=None) -> DetReport:
    report = pr_f1(preds, gts, iou_thresh, score_thresh)
    report.map50 = map50(preds, gts, iou_thresh)
    return report


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def load_boxes(path, with_scores):
    boxes = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            score = doc.get("score")
            if with_scores and score is None:
                raise ValidationError("score", f"{path}:{ln}: prediction lacks score")
            if not with_scores and score is not None:
                raise ValidationError("score", f"{path}:{ln}: ground truth has score")
            boxes.append(DetBox(image_id=str(doc["image_id"]),
                                cls=int(doc["class"]),
                                box=tuple(float(v) for v in doc["bbox"]),
                                score=None if score is None else float(score)))
    return boxes
