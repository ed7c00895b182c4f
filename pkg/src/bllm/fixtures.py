"""Seeded synthetic scenes, point clouds, and corpora at desk scale.

Everything is derived from a single seed through label-keyed RNG forks,
so fixture content is stable across runs, platforms, and call order. The
scenes stay inside the default viewport and the lexicon stays small
enough for the word-level vocabulary.
"""

from __future__ import annotations

from pathlib import Path

from .raster import Viewport, render_scene
from .scenes import (CrossSection, LanePolyline, SceneRecord, save_corpus,
                     save_point_cloud, serialize_scene)
from .tensor import Rng

DAY_SCENE_TYPES = ("urban road", "rural road", "highway", "parking area")
NIGHT_SCENE_TYPES = ("urban road at night", "highway at night")

PARTIAL_REASONS = ("lane degradation", "partial occlusion", "worn markings")
RAIN_REASONS = ("heavy rainfall", "rain and water glare")
DEGRADED_REASONS = ("severe lane degradation", "snow coverage")

_LANE_TYPES = ("motorway", "motorway", "bicycle", "other")


def _visibility_for(condition, rng):
    if condition == "day_visible":
        return dict(scene_night=False, state="fully_visible", reason=None)
    if condition == "night_visible":
        return dict(scene_night=True, state="fully_visible", reason=None)
    if condition == "partial":
        return dict(scene_night=False, state="partially_visible",
                    reason=rng.choice(PARTIAL_REASONS))
    if condition == "rain_invisible":
        return dict(scene_night=False, state="invisible",
                    reason=rng.choice(RAIN_REASONS))
    if condition == "degraded_invisible":
        return dict(scene_night=False, state="invisible",
                    reason=rng.choice(DEGRADED_REASONS))
    raise ValueError(condition)


def make_scene(rng: Rng, frame_id: str, condition=None) -> SceneRecord:
    """One synthetic frame: 1-4 near-vertical lanes, 0-2 quads, optional
    visibility per the requested condition tag."""
    night = False
    state = reason = None
    if condition is not None:
        plan = _visibility_for(condition, rng.fork("vis"))
        night, state, reason = plan["scene_night"], plan["state"], plan["reason"]
        scene_type = (rng.fork("type").choice(NIGHT_SCENE_TYPES) if night
                      else rng.fork("type").choice(DAY_SCENE_TYPES))
    else:
        pool = DAY_SCENE_TYPES + NIGHT_SCENE_TYPES
        scene_type = rng.fork("type").choice(pool)

    lanes = []
    n_lanes = int(rng.fork("n_lanes").integers(1, 5))
    lane_rng = rng.fork("lanes")
    for i in range(n_lanes):
        base = -18.0 + 36.0 * (i + 0.5) / n_lanes
        base += float(lane_rng.uniform(-2.0, 2.0))
        slope = float(lane_rng.uniform(-0.06, 0.06))
        y0 = float(lane_rng.uniform(4.0, 12.0))
        y1 = float(lane_rng.uniform(80.0, 96.0))
        n_pts = int(lane_rng.integers(2, 5))
        ys = [y0 + (y1 - y0) * k / (n_pts - 1) for k in range(n_pts)]
        pts = tuple((round(base + slope * y, 2), round(y, 2)) for y in ys)
        lanes.append(LanePolyline(
            lane_type=_LANE_TYPES[int(lane_rng.integers(0, len(_LANE_TYPES)))],
            points=pts))

    sections = []
    n_cs = int(rng.fork("n_cs").integers(0, 3))
    cs_rng = rng.fork("cs")
    for i in range(n_cs):
        cx = float(cs_rng.uniform(-14.0, 14.0))
        cy = float(cs_rng.uniform(25.0, 75.0))
        hw = float(cs_rng.uniform(3.0, 8.0))
        hh = float(cs_rng.uniform(3.0, 8.0))
        jitter = [float(cs_rng.uniform(-0.8, 0.8)) for _ in range(8)]
        verts = (
            (round(cx - hw + jitter[0], 2), round(cy - hh + jitter[1], 2)),
            (round(cx + hw + jitter[2], 2), round(cy - hh + jitter[3], 2)),
            (round(cx + hw + jitter[4], 2), round(cy + hh + jitter[5], 2)),
            (round(cx - hw + jitter[6], 2), round(cy + hh + jitter[7], 2)),
        )
        kind = "intersection" if cs_rng.integers(0, 2) == 0 else "lane_change_zone"
        sections.append(CrossSection(kind=kind, vertices=verts))

    return SceneRecord(
        frame_id=frame_id,
        scene_type=scene_type,
        data_quality="good" if rng.fork("quality").integers(0, 4) else "degraded",
        lanes=tuple(lanes),
        cross_sections=tuple(sections),
        visibility=state,
        visibility_reason=reason,
    )


def make_point_cloud(rng: Rng, scene: SceneRecord, per_lane=260, background=220):
    """Points scattered along each lane plus uniform background clutter."""
    points = []
    lane_rng = rng.fork("cloud.lanes")
    for lane in scene.lanes:
        (x0, y0), (x1, y1) = lane.points[0], lane.points[-1]
        for _ in range(per_lane):
            t = float(lane_rng.uniform(0.0, 1.0))
            x = x0 + (x1 - x0) * t + float(lane_rng.uniform(-0.6, 0.6))
            y = y0 + (y1 - y0) * t
            z = float(lane_rng.uniform(-0.2, 0.2))
            points.append((x, y, z, float(lane_rng.uniform(0.35, 1.0))))
    bg_rng = rng.fork("cloud.bg")
    for _ in range(background):
        points.append((float(bg_rng.uniform(-25.0, 25.0)),
                       float(bg_rng.uniform(0.0, 100.0)),
                       float(bg_rng.uniform(-0.5, 0.5)),
                       float(bg_rng.uniform(0.05, 0.45))))
    return points


# Visibility mix for the training fixture: the five conditions with
# enough visible frames to balance the answer classes.
OVERFIT_CONDITIONS = (
    "day_visible", "day_visible", "night_visible", "night_visible",
    "partial", "rain_invisible", "rain_invisible", "degraded_invisible",
)


def overfit_frames(seed=7):
    """Eight fixed frames covering all five visibility conditions."""
    rng = Rng(seed).fork("overfit")
    records = []
    for i, cond in enumerate(OVERFIT_CONDITIONS):
        records.append(make_scene(rng.fork(f"frame.{i}"), f"fx{i:03d}", cond))
    return records


def render_frames(records, seed=7, size=448, viewport=None):
    """frame_id -> rendered pixel array, with per-frame synthetic clouds."""
    rng = Rng(seed).fork("render")
    vp = viewport or Viewport()
    images = {}
    for s in records:
        pc = make_point_cloud(rng.fork(s.frame_id), s)
        images[s.frame_id] = render_scene(s, pc, vp, size=size).pixels
    return images


def golden_scenes(seed=11, count=10):
    """Fixed scenes for the rasterizer golden-image suite."""
    rng = Rng(seed).fork("golden")
    conditions = (None, "day_visible", "night_visible", "partial",
                  "rain_invisible", "degraded_invisible", None, None,
                  "day_visible", None)
    return [make_scene(rng.fork(f"g{i}"), f"gold{i:02d}", conditions[i])
            for i in range(count)]


def write_corpus(out_dir, n_train=8, n_test=4, seed=7, clouds=True):
    """Scenes, point clouds, and manifest on disk; returns the records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed).fork("corpus")
    train, test = [], []
    for split, count, bucket in (("train", n_train, train),
                                 ("test", n_test, test)):
        for i in range(count):
            frame_id = f"{split}{i:04d}"
            cond = OVERFIT_CONDITIONS[i % len(OVERFIT_CONDITIONS)]
            s = make_scene(rng.fork(frame_id), frame_id, cond)
            if clouds:
                pc = make_point_cloud(rng.fork(f"{frame_id}.pc"), s)
                save_point_cloud(out / f"{frame_id}.pts", pc)
                s = SceneRecord(
                    frame_id=s.frame_id, scene_type=s.scene_type,
                    data_quality=s.data_quality, lanes=s.lanes,
                    cross_sections=s.cross_sections,
                    point_cloud_ref=f"{frame_id}.pts",
                    visibility=s.visibility,
                    visibility_reason=s.visibility_reason)
            bucket.append(s)
    save_corpus(out, train, test)
    return train, test


def iter_scale_records(count, seed=13):
    """Serialized scene documents for parse-scale checks, generated in
    memory without point clouds."""
    rng = Rng(seed).fork("scale")
    for i in range(count):
        cond = OVERFIT_CONDITIONS[i % len(OVERFIT_CONDITIONS)] if i % 3 else None
        s = make_scene(rng.fork(f"s{i}"), f"scale{i:05d}", cond)
        yield serialize_scene(s)
