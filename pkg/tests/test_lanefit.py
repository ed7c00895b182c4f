import json

import numpy as np
import pytest

from bllm.errors import DataError, FitError, ValidationError
from bllm.lanefit import (LaneCurve, equalize, extract_instances, fit_lane,
                          fit_mask, lane_accuracy, load_curves, load_gt_lanes,
                          normalize_minmax, preprocess, read_pgm, save_curves,
                          sobel_magnitude, validate_mask, write_pgm)


def test_normalize_minmax():
    # span 51 makes the stretch factor exactly 5
    img = np.array([[0, 17, 34, 51]], dtype=np.uint8)
    assert normalize_minmax(img).tolist() == [[0, 85, 170, 255]]
    const = np.full((4, 5), 77, dtype=np.uint8)
    assert np.array_equal(normalize_minmax(const), const)
    full = np.array([[0, 255]], dtype=np.uint8)
    assert normalize_minmax(full).tolist() == [[0, 255]]
    with pytest.raises(ValidationError):
        normalize_minmax(np.zeros((2, 2, 3), dtype=np.uint8))


def test_equalize_two_level():
    # half at 50, half at 200: cdf .5 and 1 -> floor(255*cdf) = 127, 255
    img = np.full((4, 4), 50, dtype=np.uint8)
    img[:, 2:] = 200
    out = equalize(img)
    assert sorted(np.unique(out).tolist()) == [127, 255]
    assert np.array_equal(out == 127, img == 50)


def test_equalize_idempotent_on_two_level():
    rng = np.random.default_rng(29)
    for _ in range(20):
        lo, hi = sorted(rng.choice(256, size=2, replace=False).tolist())
        img = np.where(rng.random((8, 8)) < rng.uniform(0.2, 0.8),
                       lo, hi).astype(np.uint8)
        if np.unique(img).size < 2:
            continue
        once = equalize(img)
        assert np.array_equal(equalize(once), once)


def test_equalize_preserves_ordering():
    rng = np.random.default_rng(31)
    for _ in range(20):
        img = rng.integers(0, 256, size=(12, 12), dtype=np.uint8)
        order = np.argsort(img.ravel(), kind="stable")
        eq = equalize(img).ravel()[order].astype(np.int32)
        assert np.all(np.diff(eq) >= 0)


def test_sobel_magnitude():
    assert np.all(sobel_magnitude(np.full((6, 6), 90, dtype=np.uint8)) == 0.0)
    # vertical step edge: response hugs the boundary columns only
    img = np.zeros((6, 8), dtype=np.uint8)
    img[:, 4:] = 255
    mag = sobel_magnitude(img)
    assert np.all(mag[:, 3:5] > 0.0)
    assert np.all(mag[:, :2] == 0.0)
    assert np.all(mag[:, 6:] == 0.0)


def test_preprocess_constant_image():
    out = preprocess(np.full((5, 7), 42, dtype=np.uint8))
    assert np.unique(out).size == 1  # degenerate histogram, zero edges


def test_preprocess_deterministic():
    rng = np.random.default_rng(37)
    img = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
    a, b = preprocess(img), preprocess(img)
    assert np.array_equal(a, b)
    assert a.dtype == np.uint8
    # a higher edge weight can only brighten
    assert np.all(preprocess(img, edge_weight=1.0) >= a)


def test_extract_instances_stripe():
    assert extract_instances(np.zeros((4, 4), dtype=np.uint8)) == []
    mask = np.zeros((5, 9), dtype=np.uint8)
    mask[:, 3:6] = 1  # 3-px stripe centered on column 4
    (points,) = extract_instances(mask)
    assert points == [(4.0, float(y)) for y in range(5)]


def test_extract_instances_label_partition():
    rng = np.random.default_rng(41)
    mask = np.zeros((10, 20), dtype=np.uint8)
    mask[:, 2:5] = 1
    mask[:, 11:16] = 2
    got = extract_instances(mask)
    # brute-force oracle: mean column per label per row
    for label, points in zip((1, 2), got):
        for x, y in points:
            cols = [c for c in range(20) if mask[int(y), c] == label]
            assert x == sum(cols) / len(cols)
    assert all(2.0 <= x <= 4.0 for x, _ in got[0])
    assert all(11.0 <= x <= 15.0 for x, _ in got[1])
    del rng


def test_validate_mask():
    ok = np.array([[0, 1], [2, 1]], dtype=np.uint8)
    assert np.array_equal(validate_mask(ok), ok)
    with pytest.raises(ValidationError) as err:
        validate_mask(np.array([[0, 2]], dtype=np.uint8))
    assert "[1]" in str(err.value)


def test_fit_interpolation_is_exact():
    # degree+1 distinct-y points: residual vanishes
    pts = [(1.0, 0.0), (3.0, 1.0), (9.0, 2.0)]
    curve = fit_lane(pts, degree=2)
    assert curve.rms <= 1e-12
    for x, y in pts:
        assert abs(curve.x_at(y) - x) <= 1e-12
    line = fit_lane([(0.0, 0.0), (2.0, 1.0), (4.0, 2.0), (6.0, 3.0)], degree=1)
    assert line.rms <= 1e-12
    assert line.coeffs == pytest.approx((0.0, 2.0), abs=1e-12)


def test_fit_quadratic_recovery():
    true = (2.0, 0.5, 0.01)
    y = np.arange(20, dtype=np.float64)
    x = true[0] + true[1] * y + true[2] * y * y
    curve = fit_lane(list(zip(x, y)), degree=2)
    assert curve.coeffs == pytest.approx(true, abs=1e-9)
    assert curve.y_range == (0.0, 19.0)
    assert curve.rms <= 1e-9


def test_fit_errors():
    with pytest.raises(FitError):
        fit_lane([(0.0, 0.0), (1.0, 1.0)], degree=2)  # underdetermined
    with pytest.raises(FitError):
        fit_lane([(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)], degree=2)
    with pytest.raises(FitError) as err:
        fit_lane([(0.0, 1.0), (2.0, 1.0), (3.0, 2.0)], degree=2)
    assert "rank" in str(err.value)


def test_fit_noise_error_halves_with_4x_samples():
    # coefficient RMS error scales ~ 1/sqrt(n): x4 samples -> ratio ~ 2
    true = (2.0, 0.5, 0.01)
    rng = np.random.default_rng(5)

    def sq_err(n):
        y = np.linspace(0.0, 100.0, n)
        x = (true[0] + true[1] * y + true[2] * y * y
             + rng.normal(0.0, 2.0, size=n))
        c = fit_lane(list(zip(x, y)), degree=2).coeffs
        return sum((a - b) ** 2 for a, b in zip(c, true))

    small = np.sqrt(np.mean([sq_err(50) for _ in range(50)]))
    large = np.sqrt(np.mean([sq_err(200) for _ in range(50)]))
    assert 1.5 <= small / large <= 2.5


def test_lane_accuracy_boundary():
    curve = LaneCurve(degree=1, coeffs=(100.0, 0.0), y_range=(0.0, 9.0),
                      rms=0.0)
    rows = [float(y) for y in range(10)]
    assert lane_accuracy([curve], [[(100.0, y) for y in rows]]) == 100.0
    # exactly tau off still counts; tau+1 never does
    assert lane_accuracy([curve], [[(120.0, y) for y in rows]]) == 100.0
    assert lane_accuracy([curve], [[(121.0, y) for y in rows]]) == 0.0
    with pytest.raises(ValidationError):
        lane_accuracy([curve], [[]])


def test_lane_accuracy_ratio():
    curve = LaneCurve(degree=1, coeffs=(100.0, 0.0), y_range=(0.0, 499.0),
                      rms=0.0)
    gt = [(100.0, float(y)) for y in range(500)]
    for miss in (3, 250):  # push two samples just past tau
        gt[miss] = (141.0, gt[miss][1])
    assert lane_accuracy([curve], [gt]) == 99.6  # 498 of 500


def test_lane_accuracy_translation_invariance():
    curve = LaneCurve(degree=2, coeffs=(40.0, 1.0, 0.125), y_range=(0.0, 7.0),
                      rms=0.0)
    gt = [[(curve.x_at(float(y)) + off, float(y))
           for y in range(8)] for off in (0.0, 19.0, 21.0)]
    base = lane_accuracy([curve], gt)
    for d in (16.0, -48.0, 1024.0):  # integral shifts keep arithmetic exact
        moved = LaneCurve(degree=2, coeffs=(40.0 + d, 1.0, 0.125),
                          y_range=(0.0, 7.0), rms=0.0)
        shifted = [[(x + d, y) for x, y in lane] for lane in gt]
        assert lane_accuracy([moved], shifted) == base


def test_lane_accuracy_matching():
    left = LaneCurve(degree=1, coeffs=(50.0, 0.0), y_range=(0.0, 9.0), rms=0.0)
    right = LaneCurve(degree=1, coeffs=(300.0, 0.0), y_range=(0.0, 9.0),
                      rms=0.0)
    rows = [float(y) for y in range(10)]
    gt_left = [(52.0, y) for y in rows]
    gt_right = [(305.0, y) for y in rows]
    # order of curves must not matter: greedy pairs by mean gap
    assert lane_accuracy([right, left], [gt_left, gt_right]) == 100.0
    # missing curve: the unmatched lane scores zero
    assert lane_accuracy([left], [gt_left, gt_right]) == 50.0


def test_fit_mask_end_to_end():
    h, w = 60, 200
    mask = np.zeros((h, w), dtype=np.uint8)
    truths = [(30.0, 0.3, 0.002), (120.0, 0.5, 0.004)]
    for label, (c0, c1, c2) in enumerate(truths, start=1):
        for y in range(h):
            cx = int(round(c0 + c1 * y + c2 * y * y))
            mask[y, cx - 1:cx + 2] = label
    curves = fit_mask(mask)
    assert len(curves) == 2
    for curve, (c0, c1, c2) in zip(curves, truths):
        for y in range(h):
            want = c0 + c1 * y + c2 * y * y
            assert abs(curve.x_at(float(y)) - want) <= 1.0
    gt = [[(c0 + c1 * y + c2 * y * y, float(y)) for y in range(h)]
          for c0, c1, c2 in truths]
    assert lane_accuracy(curves, gt) == 100.0


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(43)
    img = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)

    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\nabcd")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\nxy")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "short.pgm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "deep.pgm")


def test_curve_validation():
    with pytest.raises(ValidationError):
        LaneCurve(degree=0, coeffs=(1.0,), y_range=(0.0, 1.0), rms=0.0)
    with pytest.raises(ValidationError):
        LaneCurve(degree=2, coeffs=(1.0, 2.0), y_range=(0.0, 1.0), rms=0.0)
    with pytest.raises(ValidationError):
        LaneCurve(degree=1, coeffs=(1.0, float("nan")), y_range=(0.0, 1.0),
                  rms=0.0)


def test_curves_json_round_trip(tmp_path):
    y = np.arange(10, dtype=np.float64)
    curves = [fit_lane(list(zip(5.0 + 0.2 * y, y)), degree=1),
              fit_lane(list(zip(1.0 + 0.1 * y * y, y)), degree=2)]
    path = tmp_path / "lanes.json"
    save_curves(path, curves)
    back = load_curves(path)
    assert [c.to_dict() for c in back] == [c.to_dict() for c in curves]


def test_load_gt_lanes(tmp_path):
    doc = {"lanes": [{"points": [[10, 0], [11, 1]]},
                     {"points": [[200.5, 0]]}]}
    path = tmp_path / "gt.json"
    path.write_text(json.dumps(doc))
    lanes = load_gt_lanes(path)
    assert lanes == [[(10.0, 0.0), (11.0, 1.0)], [(200.5, 0.0)]]
