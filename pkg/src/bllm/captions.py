"""Template text synthesis: scene captions, task prompts, QA gold answers.

The two caption templates are reproduced verbatim, including their number
disagreement ("It includes 1 lanes"); ``fix_grammar`` opts into the
corrected form. All rendering is pure string work, so identical records
always give byte-identical text.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError
from .scenes import SceneRecord, has_cross_section, lane_census

# Task prompts, stable order: describe, lane count, cross-sections,
# visibility, visibility reason.
PROMPTS = (
    ("describe", "Describe the lanes and road elements in detail"),
    ("LAN", "How many lanes are there?"),
    ("INT", "Is there any cross-sections or intersections?"),
    ("VIS", "Are the lane lines visible?"),
    ("VIS_REASON", "If not, what is the reason?"),
)

# Quality and scene-type prompts round out the four map-QA categories.
AUX_PROMPTS = (
    ("QLT", "What is the point cloud data quality?"),
    ("SCN", "What kind of scene is this?"),
)

PROMPT_BY_CATEGORY = dict(PROMPTS + AUX_PROMPTS)

MAP_CATEGORIES = ("LAN", "INT", "QLT", "SCN")
VISIBILITY_CATEGORIES = ("VIS", "VIS_REASON")

# Condition tags attached to visibility QA samples.
VISIBILITY_CONDITIONS = (
    "day_visible", "night_visible", "partial", "rain_invisible",
    "degraded_invisible",
)


def _fmt_point(p):
    return f"({p[0]:.1f}, {p[1]:.1f})"


def _kind_text(kind):
    return kind.replace("_", " ")


def render_map_caption(s: SceneRecord, fix_grammar=False) -> str:
    """Map-elements caption: scene type, data quality, a lane clause per
    polyline (first 'extending', later ones 'spanning'), one sentence per
    cross-section."""
    total = len(s.lanes)
    lane_word = "lane" if (fix_grammar and total == 1) else "lanes"
    out = (f"The scene contains a {s.scene_type} with {s.data_quality} "
           f"data quality. It includes {total} {lane_word}")
    if total:
        clauses = []
        for i, lane in enumerate(s.lanes):
            verb = "extending" if i == 0 else "spanning"
            clauses.append(f"a {lane.lane_type} lane {verb} from "
                           f"{_fmt_point(lane.points[0])} to {_fmt_point(lane.points[-1])}")
        if len(clauses) == 1:
            joined = clauses[0]
        else:
            joined = ", ".join(clauses[:-1]) + ", and " + clauses[-1]
        out += f", specifically {joined}"
    out += "."
    for cs in s.cross_sections:
        vs = [_fmt_point(v) for v in cs.vertices]
        out += (f" Additionally, a {_kind_text(cs.kind)} is present at the "
                f"intersection, defined by vertices {vs[0]}, {vs[1]}, {vs[2]}, "
                f"and {vs[3]}.")
    return out


def render_visibility_caption(s: SceneRecord) -> str:
    if s.visibility is None:
        raise ContractError(f"frame {s.frame_id}: no visibility field")
    if s.visibility == "fully_visible":
        return "Lane lines are fully visible."
    state = s.visibility.replace("_", " ")
    return f"Lane lines are {state} due to {s.visibility_reason}."


def visibility_condition(s: SceneRecord) -> str:
    """Bucket a frame into one of the five operating conditions."""
    if s.visibility is None:
        raise ContractError(f"frame {s.frame_id}: no visibility field")
    if s.visibility == "fully_visible":
        return "night_visible" if "night" in s.scene_type.lower() else "day_visible"
    if s.visibility == "partially_visible":
        return "partial"
    if "rain" in s.visibility_reason.lower():
        return "rain_invisible"
    return "degraded_invisible"


def gold_answer(s: SceneRecord, category: str) -> str:
    if category == "LAN":
        return str(lane_census(s)["total"])
    if category == "INT":
        present, kinds = has_cross_section(s)
        if not present:
            return "no"
        return "yes (" + ", ".join(_kind_text(k) for k in kinds) + ")"
    if category == "QLT":
        return s.data_quality
    if category == "SCN":
        return s.scene_type
    if category == "VIS":
        if s.visibility is None:
            raise ContractError(f"frame {s.frame_id}: no visibility field")
        return s.visibility.replace("_", " ")
    if category == "VIS_REASON":
        if s.visibility is None or s.visibility == "fully_visible":
            raise ContractError(f"frame {s.frame_id}: no visibility reason")
        return s.visibility_reason
    if category == "describe":
        return render_map_caption(s)
    raise ContractError(f"unknown category {category!r}")


@dataclass(frozen=True)
class QASample:
    frame_id: str
    category: str
    question: str
    annotation: str
    gold: str
    condition: str = None

    def __post_init__(self):
        if not self.gold:
            raise ContractError(f"{self.frame_id}/{self.category}: empty gold")
        if self.question != PROMPT_BY_CATEGORY.get(self.category):
            raise ContractError(
                f"{self.frame_id}: question does not match category {self.category}")


def build_qa_corpus(records, stage="map", include_describe=False,
                    with_annotation=True, fix_grammar=False):
    """One QASample per (frame, applicable prompt).

    stage "map" emits LAN/INT/QLT/SCN for every frame (plus describe when
    requested); stage "visibility" emits VIS for frames carrying a
    visibility field and VIS_REASON when lanes are not fully visible;
    stage "all" emits both.
    """
    if stage not in ("map", "visibility", "all"):
        raise ContractError(f"unknown stage {stage!r}")
    samples = []
    for s in records:
        ann = render_map_caption(s, fix_grammar=fix_grammar) if with_annotation else ""
        if stage in ("map", "all"):
            cats = (("describe",) if include_describe else ()) + MAP_CATEGORIES
            for cat in cats:
                samples.append(QASample(
                    frame_id=s.frame_id, category=cat,
                    question=PROMPT_BY_CATEGORY[cat], annotation=ann,
                    gold=gold_answer(s, cat)))
        if stage in ("visibility", "all") and s.visibility is not None:
            cond = visibility_condition(s)
            cats = ("VIS",) if s.visibility == "fully_visible" else VISIBILITY_CATEGORIES
            for cat in cats:
                samples.append(QASample(
                    frame_id=s.frame_id, category=cat,
                    question=PROMPT_BY_CATEGORY[cat], annotation=ann,
                    gold=gold_answer(s, cat), condition=cond))
    return samples


def save_qa_jsonl(path, samples):
    import json

    with open(path, "w") as f:
        for q in samples:
            doc = {"frame_id": q.frame_id, "category": q.category,
                   "question": q.question, "annotation": q.annotation,
                   "gold": q.gold}
            if q.condition is not None:
                doc["condition"] = q.condition
            f.write(json.dumps(doc, sort_keys=True) + "\n")


def load_qa_jsonl(path):
    import json

    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            samples.append(QASample(
                frame_id=doc["frame_id"], category=doc["category"],
                question=doc["question"], annotation=doc.get("annotation", ""),
                gold=doc["gold"], condition=doc.get("condition")))
    return samples
