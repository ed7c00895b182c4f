"""QA evaluation: answer scoring, per-category and overall accuracies,
and the condition-stratified visibility table.

Frame-overall accuracy (FRM) is the fraction of frames whose four map
categories (LAN, INT, QLT, SCN) are all answered correctly; question
accuracy (QNS) counts over individual records. Visibility records carry a
condition tag and split into a vision channel (is the visibility state
right) and a reasoning channel (is the stated reason right); the two
invisible conditions report the reasoning channel, the rest the vision
channel.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .captions import MAP_CATEGORIES, VISIBILITY_CONDITIONS
from .errors import ContractError, EvalError

_YES = {"yes", "yeah", "yep", "true", "y"}
_NO = {"no", "none", "nope", "false", "n"}
_INT_RE = re.compile(r"-?\d+")

CONDITION_LABELS = {
    "day_visible": "Visible Lane Lines (Daytime)",
    "night_visible": "Visible Lane Lines (Nighttime)",
    "partial": "Partially Visible",
    "rain_invisible": "Invisible Lane Lines (Rain)",
    "degraded_invisible": "Invisible Lane Lines (Degradation)",
}

REASONING_CONDITIONS = ("rain_invisible", "degraded_invisible")


def round_half_up(x: float, ndigits: int) -> float:
    # Decimal(repr(x)) sidesteps binary representation artifacts like
    # 2.675 -> 2.67499...
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def normalize_answer(text: str) -> str:
    t = text.casefold().strip()
    while t and t[-1] in ".!?":
        t = t[:-1].rstrip()
    return " ".join(t.split())


def _polarity(text: str):
    words = text.split()
    if not words:
        return None
    if words[0] in _YES:
        return True
    if words[0] in _NO:
        return False
    return None


def score_answer(pred: str, gold: str, category: str) -> bool:
    p, g = normalize_answer(pred), normalize_answer(gold)
    if category == "LAN":
        mp, mg = _INT_RE.search(p), _INT_RE.search(g)
        if mp and mg:
            return int(mp.group()) == int(mg.group())
        return False
    if category == "INT":
        pp, pg = _polarity(p), _polarity(g)
        if pp is not None and pg is not None:
            return pp == pg
        return p == g
    return p == g


@dataclass(frozen=True)
class EvalRecord:
    frame_id: str
    category: str
    gold: str
    pred: str
    correct: bool
    condition: str = None
    mode: str = None
    question: str = ""


def make_record(frame_id, category, question, gold, pred, condition=None):
    mode = None
    if category == "VIS":
        mode = "vision"
    elif category == "VIS_REASON":
        mode = "reasoning"
    return EvalRecord(frame_id=frame_id, category=category, gold=gold,
                      pred=pred, correct=score_answer(pred, gold, category),
                      condition=condition, mode=mode, question=question)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    category_counts: dict  # category -> (correct, total)
    frame_counts: tuple    # (fully correct frames, frames)

    def category_accuracy(self, category):
        c, t = self.category_counts[category]
        return 100.0 * c / t

    @property
    def qns(self):
        c = sum(v[0] for v in self.category_counts.values())
        t = sum(v[1] for v in self.category_counts.values())
        return 100.0 * c / t

    @property
    def frm(self):
        c, t = self.frame_counts
        return 100.0 * c / t

    def to_dict(self):
        doc = {cat: round_half_up(self.category_accuracy(cat), 2)
               for cat in sorted(self.category_counts)}
        doc["QNS"] = round_half_up(self.qns, 2)
        doc["FRM"] = round_half_up(self.frm, 2)
        doc["counts"] = {cat: list(v) for cat, v in
                         sorted(self.category_counts.items())}
        doc["frames"] = list(self.frame_counts)
        return doc

    def table(self):
        cats = [c for c in MAP_CATEGORIES if c in self.category_counts]
        cats += [c for c in sorted(self.category_counts) if c not in cats]
        header = cats + ["QNS", "FRM"]
        values = [f"{round_half_up(self.category_accuracy(c), 2):.2f}" for c in cats]
        values += [f"{round_half_up(self.qns, 2):.2f}",
                   f"{round_half_up(self.frm, 2):.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(header, widths))
        line2 = "  ".join(v.rjust(w) for v, w in zip(values, widths))
        return line1 + "\n" + line2


def frame_accuracy(records) -> float:
    """FRM percent over map-category records; every frame must carry all
    four categories."""
    frames = {}
    for r in records:
        if r.category in MAP_CATEGORIES:
            frames.setdefault(r.frame_id, {})[r.category] = r.correct
    if not frames:
        raise EvalError("no map-category records")
    incomplete = sorted(f for f, cats in frames.items()
                        if set(cats) != set(MAP_CATEGORIES))
    if incomplete:
        raise ContractError(
            "frames missing map categories: " + ", ".join(incomplete))
    full = sum(1 for cats in frames.values() if all(cats.values()))
    return 100.0 * full / len(frames)


def question_accuracy(records):
    """(QNS percent, per-category accuracy map) over all records."""
    if not records:
        raise EvalError("no records")
    per = {}
    for r in records:
        c, t = per.get(r.category, (0, 0))
        per[r.category] = (c + int(r.correct), t + 1)
    total_c = sum(v[0] for v in per.values())
    total_t = sum(v[1] for v in per.values())
    return (100.0 * total_c / total_t,
            {cat: 100.0 * c / t for cat, (c, t) in per.items()})


def metrics_report(records) -> MetricsReport:
    map_records = [r for r in records if r.category in MAP_CATEGORIES]
    _, _ = question_accuracy(map_records)  # raises on empty
    counts = {}
    for r in map_records:
        c, t = counts.get(r.category, (0, 0))
        counts[r.category] = (c + int(r.correct), t + 1)
    frames = {}
    for r in map_records:
        frames.setdefault(r.frame_id, {})[r.category] = r.correct
    incomplete = sorted(f for f, cats in frames.items()
                        if set(cats) != set(MAP_CATEGORIES))
    if incomplete:
        raise ContractError(
            "frames missing map categories: " + ", ".join(incomplete))
    full = sum(1 for cats in frames.values() if all(cats.values()))
    return MetricsReport(category_counts=counts,
                         frame_counts=(full, len(frames)))


@dataclass
class VisibilityRow:
    condition: str
    total: int
    correct_detections: int
    correct_reasoning: int = None  # None when reasoning is undefined
    mode: str = "vision"

    @property
    def accuracy(self):
        num = (self.correct_reasoning if self.mode == "reasoning"
               else self.correct_detections)
        return round_half_up(100.0 * num / self.total, 1)

    def to_dict(self):
        return {"condition": self.condition, "total": self.total,
                "correct_detections": self.correct_detections,
                "correct_reasoning": self.correct_reasoning,
                "accuracy": self.accuracy, "mode": self.mode}


@dataclass
class VisibilityReport:
    rows: list = field(default_factory=list)

    def row(self, condition):
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows]}

    def table(self):
        header = ("Condition", "Total Images", "Correct Detections",
                  "Correct Reasoning", "Accuracy (%)")
        body = []
        for r in self.rows:
            reasoning = "-" if r.correct_reasoning is None else str(r.correct_reasoning)
            marker = "#" if r.mode == "reasoning" else "*"
            body.append((CONDITION_LABELS[r.condition], str(r.total),
                         str(r.correct_detections), reasoning,
                         f"{r.accuracy:.1f}{marker}"))
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(header)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for row in body:
            lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
        return "\n".join(lines)


def visibility_report_from_counts(counts) -> VisibilityReport:
    """``counts``: condition -> (total, correct_detections,
    correct_reasoning or None). Conditions follow the canonical order."""
    rows = []
    for cond in VISIBILITY_CONDITIONS:
        if cond not in counts:
            continue
        total, det, reas = counts[cond]
        mode = "reasoning" if cond in REASONING_CONDITIONS else "vision"
        if mode == "reasoning" and reas is None:
            raise EvalError(f"{cond}: reasoning count required")
        rows.append(VisibilityRow(condition=cond, total=total,
                                  correct_detections=det,
                                  correct_reasoning=reas, mode=mode))
    return VisibilityReport(rows=rows)


def visibility_report(records) -> VisibilityReport:
    """Aggregate VIS/VIS_REASON eval records by condition tag."""
    counts = {}
    for r in records:
        if r.category not in ("VIS", "VIS_REASON"):
            continue
        if r.condition not in VISIBILITY_CONDITIONS:
            raise EvalError(f"record {r.frame_id}: bad condition {r.condition!r}")
        total, det, reas = counts.get(r.condition, (0, 0, 0))
        if r.category == "VIS":
            counts[r.condition] = (total + 1, det + int(r.correct), reas)
        else:
            counts[r.condition] = (total, det, reas + int(r.correct))
    final = {}
    for cond, (total, det, reas) in counts.items():
        final[cond] = (total, det,
                       reas if cond in REASONING_CONDITIONS else None)
    return visibility_report_from_counts(final)


# ---------------------------------------------------------------------------
# Model evaluation and log replay
# ---------------------------------------------------------------------------

def eval_run(model, samples, images, vocab, include_annotation=False,
             max_new=32):
    """Greedy-generate an answer per sample and score it. Returns
    (MetricsReport or None, VisibilityReport or None, records)."""
    from .training import VisualCache

    cache = VisualCache(model, images)
    records = []
    for s in samples:
        ann_ids = vocab.encode(s.annotation) if (include_annotation
                                                 and s.annotation) else []
        q_ids = vocab.encode(s.question)
        ids = model.generate(cache.grouped(s.frame_id), ann_ids, q_ids,
                             max_new=max_new)
        records.append(make_record(s.frame_id, s.category, s.question,
                                   s.gold, vocab.decode(ids), s.condition))
    has_map = any(r.category in MAP_CATEGORIES for r in records)
    has_vis = any(r.category in ("VIS", "VIS_REASON") for r in records)
    metrics = metrics_report(records) if has_map else None
    vis = visibility_report(records) if has_vis else None
    return metrics, vis, records


def save_log(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "frame_id": r.frame_id, "category": r.category,
                "condition": r.condition, "mode": r.mode,
                "question": r.question, "gold": r.gold, "pred": r.pred,
                "correct": r.correct}, sort_keys=True) + "\n")


def load_log(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            rec = make_record(doc["frame_id"], doc["category"],
                              doc.get("question", ""), doc["gold"],
                              doc["pred"], doc.get("condition"))
            if rec.correct != doc["correct"]:
                raise EvalError(
                    f"log entry for {doc['frame_id']}/{doc['category']} does "
                    f"not re-score to its recorded verdict")
            records.append(rec)
    return records
