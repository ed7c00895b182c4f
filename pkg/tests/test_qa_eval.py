import json
import random

import pytest

from bllm.errors import ContractError, EvalError
from bllm.qa_eval import (EvalRecord, MetricsReport, frame_accuracy, load_log,
                          make_record, metrics_report, normalize_answer,
                          question_accuracy, round_half_up, save_log,
                          score_answer, visibility_report,
                          visibility_report_from_counts)

REFERENCE_VIS_COUNTS = {
    "day_visible": (500, 498, None),
    "night_visible": (500, 465, None),
    "partial": (200, 162, None),
    "rain_invisible": (500, 500, 442),
    "degraded_invisible": (500, 500, 478),
}
REFERENCE_VIS_ACC = {"day_visible": 99.6, "night_visible": 93.0, "partial": 81.0,
              "rain_invisible": 88.4, "degraded_invisible": 95.6}


def test_round_half_up():
    assert round_half_up(2.675, 2) == 2.68
    assert round_half_up(0.5, 0) == 1.0
    assert round_half_up(99.55, 1) == 99.6
    assert round_half_up(33.333333, 2) == 33.33
    assert round_half_up(-1.25, 1) == -1.3  # ties round away from zero


def test_normalize_answer():
    assert normalize_answer("Good.") == "good"
    assert normalize_answer("  YES!? ") == "yes"
    assert normalize_answer("urban   road") == "urban road"
    assert normalize_answer("") == ""


def test_score_answer_rules():
    assert score_answer("3", "3", "LAN")
    assert score_answer("There are 3 lanes.", "3", "LAN")
    assert not score_answer("4", "3", "LAN")
    assert not score_answer("several", "3", "LAN")
    assert score_answer("Good.", "good", "QLT")
    assert score_answer("Yes.", "yes (intersection)", "INT")
    assert score_answer("no", "No.", "INT")
    assert not score_answer("no", "yes (intersection)", "INT")
    assert score_answer("Urban Road", "urban road", "SCN")
    assert not score_answer("highway", "urban road", "SCN")
    assert score_answer("partially visible", "Partially visible.", "VIS")
    assert not score_answer("", "good", "QLT")


def test_make_record_modes():
    assert make_record("f", "VIS", "q", "fully visible", "x").mode == "vision"
    assert make_record("f", "VIS_REASON", "q", "rain", "x").mode == "reasoning"
    assert make_record("f", "LAN", "q", "3", "3").mode is None
    assert make_record("f", "LAN", "q", "3", "3").correct


def rec(frame, cat, correct, condition=None):
    gold = "g"
    pred = "g" if correct else "x"
    if cat == "LAN":
        gold, pred = "3", ("3" if correct else "4")
    return EvalRecord(frame_id=frame, category=cat, gold=gold, pred=pred,
                      correct=correct, condition=condition,
                      mode={"VIS": "vision", "VIS_REASON": "reasoning"}.get(cat))


def full_frame(frame, flags):
    return [rec(frame, c, f)
            for c, f in zip(("LAN", "INT", "QLT", "SCN"), flags)]


def test_frame_accuracy_examples():
    records = (full_frame("a", (1, 1, 1, 1)) + full_frame("b", (1, 0, 1, 1))
               + full_frame("c", (0, 1, 1, 1)))
    assert round_half_up(frame_accuracy(records), 2) == 33.33
    assert frame_accuracy(full_frame("a", (1, 1, 1, 1))) == 100.0


def test_frame_accuracy_rejects_incomplete_frames():
    records = full_frame("a", (1, 1, 1, 1)) + [rec("b", "LAN", True)]
    with pytest.raises(ContractError) as ei:
        frame_accuracy(records)
    assert "b" in str(ei.value)
    with pytest.raises(EvalError):
        frame_accuracy([rec("a", "VIS", True, "day_visible")])


def test_question_accuracy_example():
    records = [rec("a", "LAN", i < 8) for i in range(10)]
    qns, per = question_accuracy(records)
    assert qns == 80.0 and per == {"LAN": 80.0}


def test_frm_qns_brute_force_oracle():
    # 1,000 randomized logs vs an independent recount
    rng = random.Random(123)
    for trial in range(1000):
        n_frames = rng.randint(1, 12)
        records = []
        for i in range(n_frames):
            flags = tuple(rng.random() < 0.7 for _ in range(4))
            records.extend(full_frame(f"f{i}", flags))
        frm = frame_accuracy(records)
        qns, per = question_accuracy(records)

        by_frame = {}
        correct = 0
        for r in records:
            by_frame.setdefault(r.frame_id, []).append(r.correct)
            correct += int(r.correct)
        want_frm = 100.0 * sum(all(v) for v in by_frame.values()) / len(by_frame)
        want_qns = 100.0 * correct / len(records)
        assert frm == want_frm
        assert qns == want_qns
        assert frm <= min(per.values()) + 1e-9
        # QNS is the count-weighted mean of per-category accuracies
        rep = metrics_report(records)
        weighted = sum(per[c] * rep.category_counts[c][1] for c in per)
        assert abs(weighted / len(records) - qns) < 1e-9


def test_metrics_report_shape_and_rounding():
    records = (full_frame("a", (1, 1, 1, 1)) + full_frame("b", (1, 0, 1, 1))
               + full_frame("c", (1, 1, 0, 1)))
    rep = metrics_report(records)
    doc = rep.to_dict()
    assert doc["LAN"] == 100.0 and doc["INT"] == 66.67
    assert doc["FRM"] == 33.33
    assert doc["frames"] == [1, 3]
    table = rep.table()
    assert table.splitlines()[0].split() == ["LAN", "INT", "QLT", "SCN",
                                             "QNS", "FRM"]


def test_reference_row_formatting():
    # published reference row reproduced from raw counts chosen to match
    counts = {"LAN": (7580, 10000), "INT": (7753, 10000),
              "QLT": (8233, 10000), "SCN": (9567, 10000)}
    rep = MetricsReport(category_counts=counts, frame_counts=(5387, 10000))
    doc = rep.to_dict()
    assert doc["LAN"] == 75.80 and doc["INT"] == 77.53
    assert doc["QLT"] == 82.33 and doc["SCN"] == 95.67
    assert doc["QNS"] == 82.83 and doc["FRM"] == 53.87


def test_visibility_reference_arithmetic_exact():
    rep = visibility_report_from_counts(REFERENCE_VIS_COUNTS)
    assert [r.condition for r in rep.rows] == list(REFERENCE_VIS_COUNTS)
    for cond, want in REFERENCE_VIS_ACC.items():
        row = rep.row(cond)
        assert row.accuracy == want, cond
        assert row.mode == ("reasoning" if cond.endswith("invisible")
                            else "vision")


def test_visibility_reference_rendering():
    rep = visibility_report_from_counts(REFERENCE_VIS_COUNTS)
    table = rep.table()
    lines = table.splitlines()
    assert lines[0].startswith("Condition")
    assert "99.6*" in lines[1] and "-" in lines[1]
    assert "88.4#" in lines[4] and "442" in lines[4]
    assert "95.6#" in lines[5]


def test_visibility_report_from_records():
    records = []
    for i in range(5):
        records.append(rec(f"d{i}", "VIS", i < 4, "day_visible"))
    for i in range(4):
        records.append(rec(f"r{i}", "VIS", True, "rain_invisible"))
        records.append(rec(f"r{i}", "VIS_REASON", i < 3, "rain_invisible"))
    rep = visibility_report(records)
    day = rep.row("day_visible")
    assert (day.total, day.correct_detections, day.correct_reasoning,
            day.accuracy) == (5, 4, None, 80.0)
    rain = rep.row("rain_invisible")
    assert (rain.total, rain.correct_detections, rain.correct_reasoning,
            rain.accuracy) == (4, 4, 3, 75.0)
    with pytest.raises(EvalError):
        visibility_report([rec("x", "VIS", True, "foggy")])
    with pytest.raises(EvalError):
        visibility_report_from_counts({"rain_invisible": (4, 4, None)})


def test_zero_of_n_rows():
    rep = visibility_report_from_counts({"day_visible": (10, 0, None),
                                         "rain_invisible": (10, 0, 0)})
    assert rep.row("day_visible").accuracy == 0.0
    assert rep.row("rain_invisible").accuracy == 0.0


def test_log_replay_oracle(tmp_path):
    rng = random.Random(7)
    records = []
    for i in range(30):
        flags = tuple(rng.random() < 0.6 for _ in range(4))
        records.extend(full_frame(f"f{i}", flags))
        records.append(rec(f"f{i}", "VIS", rng.random() < 0.5, "day_visible"))
    path = tmp_path / "log.jsonl"
    save_log(path, records)
    replayed = load_log(path)
    assert replayed == records
    assert (metrics_report(replayed).to_dict()
            == metrics_report(records).to_dict())
    assert (visibility_report(replayed).to_dict()
            == visibility_report(records).to_dict())


def test_log_replay_rejects_tampered_verdicts(tmp_path):
    records = full_frame("a", (1, 1, 1, 1))
    path = tmp_path / "log.jsonl"
    save_log(path, records)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    lines[0]["correct"] = False
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
    with pytest.raises(EvalError):
        load_log(path)
