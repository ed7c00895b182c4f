import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bllm.errors import ValidationError
from bllm.fixtures import golden_scenes, render_frames
from bllm.raster import (COLOR_BICYCLE, COLOR_CROSS_SECTION, COLOR_MOTORWAY,
                         BevImage, Viewport, color_purity_violations,
                         draw_cross_section, draw_polyline, draw_segment,
                         rasterize_points, read_ppm, render_scene,
                         resize_nearest, write_ppm)
from bllm.scenes import CrossSection, LanePolyline

DATA = Path(__file__).parent / "data"


def test_viewport_dimensions_and_validation():
    vp = Viewport()
    assert (vp.width, vp.height) == (448, 896)
    with pytest.raises(ValidationError):
        Viewport(x_range=(5.0, 5.0))
    with pytest.raises(ValidationError):
        Viewport(pixels_per_meter=0.0)


def test_empty_cloud_all_black():
    img = rasterize_points([])
    assert img.pixels.shape == (896, 448, 3)
    assert not img.pixels.any()


def test_center_point_single_pixel():
    img = rasterize_points([(0.0, 50.0, 0.0, 1.0)])
    lit = np.argwhere(img.pixels.sum(axis=2) > 0)
    assert lit.tolist() == [[448, 224]]  # (row, col) = (h//2, w//2)
    assert img.pixels[448, 224].tolist() == [255, 255, 255]


def test_center_point_survives_resize_to_448():
    img = rasterize_points([(0.0, 50.0, 0.0, 1.0)])
    small = resize_nearest(img, 448, 448)
    lit = np.argwhere(small.pixels.sum(axis=2) > 0)
    assert lit.tolist() == [[224, 224]]


def test_max_intensity_rule():
    img = rasterize_points([(0.0, 50.0, 0.0, 0.2), (0.0, 50.0, 1.0, 0.8)])
    assert img.pixels[448, 224, 0] == 204  # round(0.8*255)


def test_out_of_range_points_dropped():
    img = rasterize_points([(30.0, 50.0, 0.0, 1.0), (0.0, -1.0, 0.0, 1.0),
                            (0.0, 101.0, 0.0, 1.0)])
    assert not img.pixels.any()


def test_horizontal_line_paints_full_row():
    img = BevImage.blank()
    line = LanePolyline("motorway", ((-25.0, 50.0), (25.0, 50.0)))
    draw_polyline(img, line, width=1)
    rows = np.argwhere((img.pixels == COLOR_MOTORWAY).all(axis=2))
    assert len(rows) == 448  # one pixel per column
    assert set(rows[:, 0].tolist()) == {448}
    assert sorted(rows[:, 1].tolist()) == list(range(448))


def test_polyline_outside_viewport_is_noop():
    img = BevImage.blank()
    before = img.buffer
    draw_polyline(img, LanePolyline("motorway",
                                    ((40.0, 0.0), (40.0, 100.0))))
    assert img.buffer == before


def test_overdraw_idempotent():
    img = BevImage.blank()
    line = LanePolyline("bicycle", ((-10.0, 5.0), (12.0, 95.0)))
    draw_polyline(img, line)
    once = img.buffer
    draw_polyline(img, line)
    assert img.buffer == once
    assert (img.pixels[(img.pixels.sum(axis=2) > 0)]
            == COLOR_BICYCLE).all()


def test_blue_wins_over_yellow():
    img = BevImage.blank()
    draw_polyline(img, LanePolyline("motorway", ((0.0, 40.0), (0.0, 60.0))))
    cs = CrossSection("intersection",
                      ((-5.0, 45.0), (5.0, 45.0), (5.0, 55.0), (-5.0, 55.0)))
    draw_cross_section(img, cs)
    # the lane crosses both horizontal quad edges; those pixels are blue now
    px, py = img.viewport.to_pixel(0.0, 45.0)
    assert img.pixels[int(py), int(px)].tolist() == list(COLOR_CROSS_SECTION)


def test_axis_aligned_quad_corners():
    img = BevImage.blank()
    cs = CrossSection("intersection",
                      ((-10.0, 30.0), (10.0, 30.0), (10.0, 70.0), (-10.0, 70.0)))
    draw_cross_section(img, cs, width=1)
    vp = img.viewport
    for (x, y) in cs.vertices:
        px, py = vp.to_pixel(x, y)
        assert img.pixels[int(py), int(px)].tolist() == list(COLOR_CROSS_SECTION)


def test_resize_same_size_identity():
    img = rasterize_points([(0.0, 50.0, 0.0, 0.7), (3.0, 20.0, 0.0, 0.2)])
    again = resize_nearest(img, img.width, img.height)
    assert again.buffer == img.buffer


def test_resize_checkerboard_blocks():
    px = np.zeros((2, 2, 3), dtype=np.uint8)
    px[0, 0] = px[1, 1] = 255
    img = BevImage(width=2, height=2, pixels=px)
    big = resize_nearest(img, 4, 4)
    expect = np.kron(px[:, :, 0] > 0, np.ones((2, 2), dtype=bool))
    assert ((big.pixels[:, :, 0] > 0) == expect).all()


def test_resize_halving_keeps_every_second_pixel():
    rng = np.random.Generator(np.random.Philox(key=5))
    px = rng.integers(0, 256, size=(896, 896, 3)).astype(np.uint8)
    img = BevImage(width=896, height=896, pixels=px)
    half = resize_nearest(img, 448, 448)
    assert np.array_equal(half.pixels, px[::2, ::2])


def test_render_deterministic_three_runs():
    records = golden_scenes(count=2)
    hashes = set()
    for _ in range(3):
        images = render_frames(records, seed=11)
        blob = b"".join(images[s.frame_id].tobytes() for s in records)
        hashes.add(hashlib.sha256(blob).hexdigest())
    assert len(hashes) == 1


def test_color_purity_on_fixture_renders():
    records = golden_scenes(count=4)
    for px in render_frames(records, seed=11).values():
        img = BevImage(width=px.shape[1], height=px.shape[0], pixels=px)
        assert color_purity_violations(img) == []


def test_color_purity_catches_blends():
    px = np.zeros((4, 4, 3), dtype=np.uint8)
    px[1, 1] = (255, 200, 10)  # not grayscale, not a role color
    img = BevImage(width=4, height=4, pixels=px)
    assert color_purity_violations(img) == [(1, 1)]


def test_painted_pixels_near_ideal_segment():
    # Hausdorff-style bound: every painted pixel center lies within
    # w/2 + 1 of the densely sampled ideal segment (pixel units)
    img = BevImage.blank()
    width = 2
    p0, p1 = (-20.0, 10.0), (22.0, 93.0)
    draw_segment(img, p0, p1, COLOR_MOTORWAY, width=width)
    vp = img.viewport
    a = np.array(vp.to_pixel(*p0))
    b = np.array(vp.to_pixel(*p1))
    ts = np.linspace(0.0, 1.0, 4096)[:, None]
    ideal = a[None, :] + ts * (b - a)[None, :]
    painted = np.argwhere((img.pixels == COLOR_MOTORWAY).all(axis=2))
    assert len(painted)
    centers = painted[:, ::-1] + 0.5  # (col,row) centers
    d = np.sqrt(((centers[:, None, :] - ideal[None, :, :]) ** 2).sum(-1))
    assert d.min(axis=1).max() <= width / 2 + 1
    # and the segment is fully covered: every sample is near a painted pixel
    assert d.min(axis=0).max() <= width / 2 + 1


def test_ppm_round_trip(tmp_path):
    records = golden_scenes(count=1)
    px = render_frames(records, seed=11)[records[0].frame_id]
    img = BevImage(width=px.shape[1], height=px.shape[0], pixels=px)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.width == img.width and back.height == img.height
    assert back.buffer == img.buffer


def test_golden_images_frozen():
    goldens = json.loads((DATA / "raster_goldens.json").read_text())
    records = golden_scenes()
    images = render_frames(records, seed=11)
    assert len(records) == 10
    seen = set()
    for s in records:
        px = images[s.frame_id]
        img = BevImage(width=px.shape[1], height=px.shape[0], pixels=px)
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
        digest = hashlib.sha256(header + img.buffer).hexdigest()
        assert digest == goldens[s.frame_id]["sha256"], s.frame_id
        seen.add(digest)
    assert len(seen) == 10  # all ten scenes render distinctly
