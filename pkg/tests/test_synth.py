import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motioncoach import synth
from motioncoach.align import align_keyframes
from motioncoach.assess import TargetModel, deviations, evaluate_metrics, load_metric_definitions
from motioncoach.pipeline import sequence_features
from motioncoach.skeleton import angle_track, load_angle_definitions, parse_sequence, serialize_sequence


def test_identical_seeds_identical_bytes():
    spec = synth.SynthSpec(noise_std=2.0, embed=(20, 10), seed=11, warp=synth.uniform_warp(90, 1.3))
    a, ta = synth.generate(spec)
    b, tb = synth.generate(spec)
    assert serialize_sequence(a) == serialize_sequence(b)
    assert ta == tb


@pytest.mark.parametrize("kind", ["jump", "cyclic_gait"])
def test_noise_free_angles_reproduce_curves(kind):
    seq, truth = synth.generate(synth.SynthSpec(motion_kind=kind, seed=3))
    theta = angle_track(seq, load_angle_definitions())
    assert np.max(np.abs(theta - truth.clean_angles)) < 1e-6


def test_violation_closed_loop_with_noise():
    spec = synth.SynthSpec(noise_std=2.0, seed=5, violations=(("knee_angle_at_takeoff", 15.0),))
    seq, truth = synth.generate(spec)
    vals = evaluate_metrics(seq, truth.keyframe_map(), load_metric_definitions(), load_angle_definitions())
    devs = deviations(vals, TargetModel.load())
    # 2 px noise on ~100 px limbs moves a joint angle by roughly a degree
    assert devs["knee_angle_at_takeoff"] == pytest.approx(15.0, abs=3.0)
    assert truth.violated_metrics == ("knee_angle_at_takeoff",)


def test_serialized_sequence_parses():
    seq, _ = synth.generate(synth.SynthSpec(noise_std=2.0, seed=1, embed=(5, 5)))
    again = parse_sequence(serialize_sequence(seq))
    assert len(again) == len(seq)


@given(st.integers(0, 10_000))
def test_random_warp_bounds_and_inverse(seed):
    rng = np.random.default_rng(seed)
    src_len = int(rng.integers(40, 200))
    warp = synth.random_warp(rng, src_len)
    w = np.array(warp)
    assert len(w) <= 6
    slopes = np.diff(w[:, 1]) / np.diff(w[:, 0])
    assert np.all(slopes >= 0.5 - 1e-12) and np.all(slopes <= 2.0 + 1e-12)
    fwd, _ = synth.warp_forward(warp, src_len)
    inv = synth.warp_inverse(warp, src_len)
    s = np.linspace(0, src_len - 1, 57)
    np.testing.assert_allclose(inv(fwd(s)), s, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_keyframes_map_through_warp(seed):
    spec = synth.make_corpus(1, seed=seed, random_violations=False)[0][0]
    _, truth = synth.generate(spec)
    canon = synth.SynthSpec(seed=spec.seed, subject_variation=spec.subject_variation)
    _, src = synth.generate(canon)
    fwd, _ = synth.warp_forward(spec.warp, int(spec.warp[-1][0]) + 1)
    pre = spec.embed[0]
    expected = tuple(pre + int(round(float(fwd(k)))) for k in src.keyframes)
    assert truth.keyframes == expected


def test_warp_validation():
    with pytest.raises(synth.SynthError, match="invalid warp"):
        synth.SynthSpec(warp=((0, 0), (10, 5), (8, 9)))
    with pytest.raises(synth.SynthError):
        synth.generate(synth.SynthSpec(warp=((0, 0), (50, 60))))


def test_identity_recovery():
    tpl, _ = synth.make_template()
    base = synth.SynthSpec(subject_variation=False, scale=1.0)
    for spec, seq, truth in synth.make_corpus(3, base, seed=1, random_violations=False, random_warps=False):
        res = align_keyframes(tpl, sequence_features(seq)[0])
        assert res.keyframe_indices == list(truth.keyframes)


def test_corpus_sizes_and_determinism():
    one = synth.make_corpus(1, seed=4)
    assert len(one) == 1
    a = synth.make_corpus(3, seed=9)
    b = synth.make_corpus(3, seed=9)
    for (sa, qa, ta), (sb, qb, tb) in zip(a, b):
        assert sa == sb and ta == tb
        np.testing.assert_array_equal(qa.data, qb.data)
    with pytest.raises(synth.SynthError):
        synth.make_corpus(0)


def test_corpus_items_are_embedded_and_warped():
    for spec, seq, truth in synth.make_corpus(4, seed=2):
        pre, post = spec.embed
        assert 30 <= pre <= 60 and 30 <= post <= 60
        assert truth.interval == (pre, len(seq) - post - 1)
        w = np.array(spec.warp)
        assert 0.8 <= w[-1, 1] / w[-1, 0] <= 1.25
        assert 1 <= len(spec.violations) <= 3


def test_write_corpus_round_trip(tmp_path):
    items = synth.make_corpus(2, seed=0)
    tseq, ttruth = synth.generate(synth.canonical_spec())
    synth.write_corpus(items, tseq, ttruth, tmp_path, "sprint_start_demo")
    manifest = json.loads((tmp_path / "corpus.json").read_text())
    assert len(manifest["items"]) == 2
    for entry, (spec, _, truth) in zip(manifest["items"], items):
        gt = json.loads((tmp_path / f"{entry['id']}.gt.json").read_text())
        assert gt["keyframes"] == list(truth.keyframes)
        assert entry["truth"] == truth.to_dict()
        assert synth.SynthSpec.from_dict(gt["spec"]) == spec
