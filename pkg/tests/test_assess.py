import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motioncoach import synth
from motioncoach.assess import (
    NO_DEFICIENCIES,
    AssessmentError,
    MetricDefinition,
    ProblemCatalog,
    TargetModel,
    aggregate,
    deviation,
    deviations,
    diagnose,
    diagnosis_iou,
    evaluate_metrics,
    load_metric_definitions,
)
from motioncoach.skeleton import AngleDefinition, JointId, load_angle_definitions, parse_sequence

from .oracles import naive_scores

KNEE = AngleDefinition("knee", JointId.HIP_L, JointId.KNEE_L, JointId.ANKLE_L)


def _seq(n=40, fps=30.0):
    pose = {"hip_l": [0.0, 1.0, 1.0], "knee_l": [0.0, 0.0, 1.0], "ankle_l": [1.0, 0.0, 1.0]}
    lines = [json.dumps({"meta": {"fps": fps}})]
    lines += [json.dumps({"frame": i, "joints": pose}) for i in range(n)]
    return parse_sequence("\n".join(lines) + "\n")


def _catalog(W, ids=None):
    W = np.asarray(W, float)
    ids = ids or [f"P{m + 1}" for m in range(W.shape[1])]
    return ProblemCatalog(tuple((i, i) for i in ids), tuple(f"m{k}" for k in range(W.shape[0])), W)


def test_knee_angle_metric_right_angle():
    md = MetricDefinition("k", "joint_angle_at_keyframe", ("set",), angle_name="knee", units="rad")
    vals = evaluate_metrics(_seq(), {"set": 3}, [md], [KNEE])
    assert vals["k"] == pytest.approx(math.pi / 2, abs=1e-12)
    md = MetricDefinition("k", "joint_angle_at_keyframe", ("set",), angle_name="knee", units="deg")
    assert evaluate_metrics(_seq(), {"set": 3}, [md], [KNEE])["k"] == pytest.approx(90.0, abs=1e-9)


def test_duration_metric():
    md = MetricDefinition("d", "duration_between_keyframes", ("a", "b"), units="s")
    assert evaluate_metrics(_seq(), {"a": 4, "b": 34}, [md], [KNEE])["d"] == 1.0


def test_unmapped_keyframe_rejected():
    md = MetricDefinition("d", "duration_between_keyframes", ("a", "b"), units="s")
    with pytest.raises(AssessmentError, match="not mapped"):
        evaluate_metrics(_seq(), {"a": 4}, [md], [KNEE])


def test_metric_definition_validation():
    with pytest.raises(AssessmentError):
        MetricDefinition("x", "joint_angle_at_keyframe", ("a",))
    with pytest.raises(AssessmentError):
        MetricDefinition("x", "duration_between_keyframes", ("a",), units="s")
    with pytest.raises(AssessmentError):
        MetricDefinition("x", "mystery", ("a",))


@pytest.mark.parametrize("value, expected", [(5, 5), (25, 5), (15, 0)])
def test_deviation_branches(value, expected):
    assert deviation(value, 10, 20) == expected


def test_zero_deviation_no_deficiencies():
    cat = ProblemCatalog.load()
    d = aggregate({k: 0.0 for k in cat.metrics}, cat)
    assert all(v == 0 for v in d.scores.values())
    assert d.top == ()
    assert d.verdict == NO_DEFICIENCIES


def test_two_by_two_arithmetic():
    cat = _catalog([[1, 0], [0, 1]])
    d = aggregate({"m0": 1.0, "m1": 2.0}, cat)
    assert d.scores == {"P1": 1.0, "P2": 2.0}
    assert d.probabilities == {"P1": 1 / 3, "P2": 2 / 3}
    assert d.top == ("P2", "P1")


@pytest.mark.parametrize("seed", range(100))
def test_aggregate_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    K, M = (6, 12) if seed == 0 else rng.integers(1, 12, size=2)
    W = rng.uniform(0, 2, (K, M)) * (rng.random((K, M)) < 0.6)
    W[0] += 0.01  # every column reachable
    D = rng.uniform(0, 10, K) * (rng.random(K) < 0.7)
    cat = _catalog(W)
    d = aggregate({f"m{k}": D[k] for k in range(K)}, cat)
    ref = naive_scores(list(D), W.tolist())
    for m, pid in enumerate(cat.problem_ids):
        assert abs(d.scores[pid] - ref[m]) <= 1e-12


def test_ties_keep_catalog_order_and_top_n():
    cat = _catalog(np.ones((1, 8)))
    d = aggregate({"m0": 1.0}, cat, top_n=6)
    assert d.top == ("P1", "P2", "P3", "P4", "P5", "P6")


def test_range_scaled_mode():
    cat = _catalog([[1, 0], [0, 1]])
    target = TargetModel("t", {"m0": (0, 10), "m1": (5, 5)})
    d = aggregate({"m0": 5.0, "m1": 2.0}, cat, "range_scaled", target)
    assert d.scores == {"P1": 0.5, "P2": 2.0}
    with pytest.raises(AssessmentError):
        aggregate({"m0": 5.0, "m1": 2.0}, cat, "range_scaled")


def test_catalog_validation():
    with pytest.raises(AssessmentError, match="unreachable"):
        _catalog([[1, 0], [1, 0]])
    with pytest.raises(AssessmentError):
        _catalog([[1, -1], [0, 1]])
    with pytest.raises(AssessmentError):
        ProblemCatalog((("P1", ""),), ("m0",), np.ones((2, 1)))


def test_bundled_catalog_shape():
    cat = ProblemCatalog.load()
    assert cat.mapping.shape == (10, 12)
    target = TargetModel.load()
    assert set(cat.metrics) <= set(target.thresholds)


def test_signed_deviations():
    target = TargetModel("t", {"a": (10, 20)})
    assert deviations({"a": 5}, target, signed=True) == {"a:under": 5, "a:over": 0.0}
    assert deviations({"a": 26}, target, signed=True) == {"a:under": 0.0, "a:over": 6}


def test_iou_examples():
    a = [f"P{i}" for i in range(1, 7)]
    assert diagnosis_iou(a, a) == 1.0
    assert diagnosis_iou(a, [f"P{i}" for i in range(7, 13)]) == 0.0
    assert diagnosis_iou(a, ["P1", "P2", "P3", "P7", "P8", "P9"]) == pytest.approx(3 / 9)
    assert diagnosis_iou([], []) == 1.0
    with pytest.raises(AssessmentError, match="unknown problem"):
        diagnosis_iou(["P99"], [], ProblemCatalog.load())


@given(st.floats(-100, 100), st.floats(-50, 50), st.floats(0, 50), st.floats(0.001, 1))
def test_deviation_piecewise_linear(v, lo, width, h):
    hi = lo + width
    d0, d1 = deviation(v, lo, hi), deviation(v + h, lo, hi)
    assert abs(d1 - d0) <= h + 1e-9
    if v > hi:
        assert d1 - d0 == pytest.approx(h)
    if v + h < lo:
        assert d1 - d0 == pytest.approx(-h)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_scaling_deviations_scales_scores(seed, c):
    rng = np.random.default_rng(seed)
    cat = ProblemCatalog.load()
    D = {k: float(x) for k, x in zip(cat.metrics, rng.uniform(0, 10, 10) * (rng.random(10) < 0.5))}
    a = aggregate(D, cat)
    b = aggregate({k: c * v for k, v in D.items()}, cat)
    for pid in cat.problem_ids:
        assert b.scores[pid] == pytest.approx(c * a.scores[pid], rel=1e-12, abs=1e-12)
        assert b.probabilities[pid] == pytest.approx(a.probabilities[pid], rel=1e-9, abs=1e-12)
    assert a.top == b.top


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_identity_mapping_returns_deviations(ds):
    cat = _catalog(np.eye(4))
    d = aggregate({f"m{k}": v for k, v in enumerate(ds)}, cat)
    assert [d.scores[p] for p in cat.problem_ids] == ds


ids = st.sets(st.sampled_from([f"P{i}" for i in range(1, 13)]), max_size=8)


@given(ids, ids)
def test_iou_symmetric_and_bounded(a, b):
    assert diagnosis_iou(a, b) == diagnosis_iou(b, a)
    assert 0.0 <= diagnosis_iou(a, b) <= 1.0


def _closed_loop(violations):
    seq, truth = synth.generate(synth.SynthSpec(subject_variation=False, scale=1.0, violations=violations))
    vals = evaluate_metrics(seq, truth.keyframe_map(), load_metric_definitions(), load_angle_definitions())
    return diagnose(vals, TargetModel.load(), ProblemCatalog.load())


def test_clean_synthetic_performance_has_no_deficiencies():
    assert _closed_loop(()).verdict == NO_DEFICIENCIES


@pytest.mark.parametrize("metric, offset", [("knee_angle_at_takeoff", 15.0), ("hip_angle_at_set", -10.0), ("flight_time", 0.15)])
def test_single_violation_hits_only_its_problems(metric, offset):
    d = _closed_loop(((metric, offset),))
    cat = ProblemCatalog.load()
    k = cat.metrics.index(metric)
    expected = {cat.problem_ids[m] for m in range(12) if cat.mapping[k, m] > 0}
    assert {p for p, s in d.scores.items() if s > 0} == expected
    # angles reproduce the offset closely; durations are quantized to whole frames
    tol = 1 / 30 if metric == "flight_time" else 0.05 * abs(offset)
    assert d.deviations[metric] == pytest.approx(abs(offset), abs=tol)
