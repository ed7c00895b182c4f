"""Road-scene records: the geometric source of truth for rasterization,
captions, and QA gold answers.

A scene file is one JSON document per frame. Coordinates are scene-local
meters, x right, y forward (forward renders as image up). A corpus is a
directory of scene files plus ``manifest.json`` naming the train/test
split members.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError

LANE_TYPES = ("motorway", "bicycle", "other")
CROSS_SECTION_KINDS = ("intersection", "lane_change_zone")
VISIBILITY_STATES = ("fully_visible", "partially_visible", "invisible")


def _check_finite_pair(pt, where):
    if (not isinstance(pt, (list, tuple)) or len(pt) != 2
            or not all(isinstance(v, (int, float)) for v in pt)):
        raise ValidationError(where, f"expected [x, y], got {pt!r}")
    if not all(math.isfinite(v) for v in pt):
        raise ValidationError(where, f"non-finite coordinate {pt!r}")
    return (float(pt[0]), float(pt[1]))


@dataclass(frozen=True)
class LanePolyline:
    lane_type: str
    points: tuple

    def __post_init__(self):
        if self.lane_type not in LANE_TYPES:
            raise ValidationError("lane.type", f"unknown lane type {self.lane_type!r}")
        if len(self.points) < 2:
            raise ValidationError("lane.points", "polyline needs at least 2 points")
        for a, b in zip(self.points, self.points[1:]):
            if a == b:
                raise ValidationError("lane.points", f"repeated consecutive point {a}")


def _segments_cross(p, q, r, s):
    """Proper or improper intersection of segments pq and rs."""
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p, q, r):
        return True
    if o2 == 0 and on_seg(p, q, s):
        return True
    if o3 == 0 and on_seg(r, s, p):
        return True
    if o4 == 0 and on_seg(r, s, q):
        return True
    return False


@dataclass(frozen=True)
class CrossSection:
    kind: str
    vertices: tuple

    def __post_init__(self):
        if self.kind not in CROSS_SECTION_KINDS:
            raise ValidationError("cross_section.kind", f"unknown kind {self.kind!r}")
        if len(self.vertices) != 4:
            raise ValidationError("cross_section.vertices",
                                  f"expected 4 vertices, got {len(self.vertices)}")
        v = self.vertices
        # simple quad: the two non-adjacent edge pairs must not intersect
        if (_segments_cross(v[0], v[1], v[2], v[3])
                or _segments_cross(v[1], v[2], v[3], v[0])):
            raise ValidationError("cross_section.vertices", "self-intersecting quad")
        area2 = sum(v[i][0] * v[(i + 1) % 4][1] - v[(i + 1) % 4][0] * v[i][1]
                    for i in range(4))
        if area2 == 0.0:
            raise ValidationError("cross_section.vertices", "zero-area quad")


@dataclass(frozen=True)
class SceneRecord:
    frame_id: str
    scene_type: str
    data_quality: str
    lanes: tuple = ()
    cross_sections: tuple = ()
    point_cloud_ref: str = None
    visibility: str = None
    visibility_reason: str = None

    def __post_init__(self):
        if not self.frame_id:
            raise ValidationError("frame_id", "empty frame_id")
        if not self.scene_type:
            raise ValidationError("scene_type", "empty scene_type")
        if self.data_quality not in ("good", "degraded"):
            raise ValidationError("data_quality",
                                  f"expected good|degraded, got {self.data_quality!r}")
        if self.visibility is not None:
            if self.visibility not in VISIBILITY_STATES:
                raise ValidationError("visibility.state",
                                      f"unknown state {self.visibility!r}")
            has_reason = bool(self.visibility_reason)
            if self.visibility == "fully_visible":
                if has_reason:
                    raise ValidationError("visibility.reason",
                                          "reason not allowed when fully visible")
            elif not has_reason:
                raise ValidationError("visibility.reason",
                                      f"reason required for {self.visibility}")
        elif self.visibility_reason:
            raise ValidationError("visibility.reason", "reason without a state")


def parse_scene(data) -> SceneRecord:
    """Parse one scene document from bytes or str, enforcing all invariants."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno, column=e.colno) from None
    if not isinstance(doc, dict):
        raise ValidationError("record", "top level must be an object")

    known = {"frame_id", "scene_type", "data_quality", "lanes",
             "cross_sections", "point_cloud", "visibility"}
    extra = set(doc) - known
    if extra:
        raise ValidationError(sorted(extra)[0], "unknown field")
    for req in ("frame_id", "scene_type", "data_quality"):
        if req not in doc:
            raise ValidationError(req, "missing required field")

    lanes = []
    for i, lane in enumerate(doc.get("lanes", [])):
        if not isinstance(lane, dict) or "type" not in lane or "points" not in lane:
            raise ValidationError(f"lanes[{i}]", "lane needs type and points")
        pts = tuple(_check_finite_pair(p, f"lanes[{i}].points[{j}]")
                    for j, p in enumerate(lane["points"]))
        lanes.append(LanePolyline(lane_type=lane["type"], points=pts))

    sections = []
    for i, cs in enumerate(doc.get("cross_sections", [])):
        if not isinstance(cs, dict) or "kind" not in cs or "vertices" not in cs:
            raise ValidationError(f"cross_sections[{i}]",
                                  "cross-section needs kind and vertices")
        vs = tuple(_check_finite_pair(p, f"cross_sections[{i}].vertices[{j}]")
                   for j, p in enumerate(cs["vertices"]))
        sections.append(CrossSection(kind=cs["kind"], vertices=vs))

    vis_state = vis_reason = None
    vis = doc.get("visibility")
    if vis is not None:
        if not isinstance(vis, dict) or "state" not in vis:
            raise ValidationError("visibility", "expected {state[, reason]}")
        vis_state = vis["state"]
        vis_reason = vis.get("reason")

    return SceneRecord(
        frame_id=str(doc["frame_id"]),
        scene_type=str(doc["scene_type"]),
        data_quality=doc["data_quality"],
        lanes=tuple(lanes),
        cross_sections=tuple(sections),
        point_cloud_ref=doc.get("point_cloud"),
        visibility=vis_state,
        visibility_reason=vis_reason,
    )


def serialize_scene(s: SceneRecord) -> bytes:
    doc = {
        "frame_id": s.frame_id,
        "scene_type": s.scene_type,
        "data_quality": s.data_quality,
        "lanes": [{"type": l.lane_type, "points": [list(p) for p in l.points]}
                  for l in s.lanes],
        "cross_sections": [{"kind": c.kind, "vertices": [list(p) for p in c.vertices]}
                           for c in s.cross_sections],
    }
    if s.point_cloud_ref is not None:
        doc["point_cloud"] = s.point_cloud_ref
    if s.visibility is not None:
        vis = {"state": s.visibility}
        if s.visibility_reason is not None:
            vis["reason"] = s.visibility_reason
        doc["visibility"] = vis
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def lane_census(s: SceneRecord) -> dict:
    """Counts per lane type plus total (total equals len(lanes))."""
    counts = {t: 0 for t in LANE_TYPES}
    for lane in s.lanes:
        counts[lane.lane_type] += 1
    counts["total"] = len(s.lanes)
    return counts


def has_cross_section(s: SceneRecord):
    """(present, kinds) with kinds in declaration order, deduplicated."""
    kinds = []
    for cs in s.cross_sections:
        if cs.kind not in kinds:
            kinds.append(cs.kind)
    return (len(s.cross_sections) > 0, tuple(kinds))


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    root: Path
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def frames(self):
        return self.train + self.test

    def by_id(self, frame_id):
        for s in self.frames:
            if s.frame_id == frame_id:
                return s
        raise KeyError(frame_id)


def load_corpus(root) -> Corpus:
    """Read manifest.json plus every listed scene file; frame ids must be
    unique across the whole corpus."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError("manifest", f"missing {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno, column=e.colno) from None
    corpus = Corpus(root=root)
    seen = set()
    for split in ("train", "test"):
        for name in manifest.get(split, []):
            path = root / name
            if not path.is_file():
                raise ValidationError("manifest", f"listed file missing: {name}")
            try:
                record = parse_scene(path.read_bytes())
            except ParseError as e:
                raise ParseError(f"{name}: {e.args[0]}", e.line, e.column) from None
            if record.frame_id in seen:
                raise ValidationError("frame_id",
                                      f"duplicate frame_id {record.frame_id!r}")
            seen.add(record.frame_id)
            getattr(corpus, split).append(record)
    return corpus


def save_corpus(root, train, test):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"train": [], "test": []}
    for split, records in (("train", train), ("test", test)):
        for s in records:
            name = f"{s.frame_id}.json"
            (root / name).write_bytes(serialize_scene(s))
            manifest[split].append(name)
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Point cloud files
# ---------------------------------------------------------------------------

def load_point_cloud(path):
    """Text cloud: one "x y z intensity" line per point, intensity in [0,1].
    Returns an Nx4 list of float tuples."""
    points = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line=ln, column=1)
            try:
                x, y, z, inten = (float(v) for v in parts)
            except ValueError:
                raise ParseError("non-numeric field", line=ln, column=1) from None
            if not all(math.isfinite(v) for v in (x, y, z, inten)):
                raise ValidationError("point_cloud", f"non-finite point at line {ln}")
            if not 0.0 <= inten <= 1.0:
                raise ValidationError("point_cloud",
                                      f"intensity {inten} outside [0,1] at line {ln}")
            points.append((x, y, z, inten))
    return points


def save_point_cloud(path, points):
    with open(path, "w") as f:
        for x, y, z, inten in points:
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {inten:.6f}\n")
