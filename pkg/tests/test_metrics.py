import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_f1, brute_force_psds_single_class
from sedlab.data import EventAnnotation as E
from sedlab.metrics import (
    PsdsConfig,
    event_f1,
    match_events,
    psds,
    psds_thresholds,
    within_collar,
)
from sedlab.scoring import evaluate_posteriors

TH3 = PsdsConfig(thresholds=(0.2, 0.5, 0.8))


@st.composite
def scenes(draw):
    def events():
        out = []
        for _ in range(draw(st.integers(0, 5))):
            onset = draw(st.integers(0, 80)) / 10
            dur = draw(st.integers(1, 20)) / 10
            out.append(E(onset, min(10.0, onset + dur), draw(st.integers(0, 2))))
        return out
    names = [f"c{i}" for i in range(draw(st.integers(1, 3)))]
    return {n: events() for n in names}, {n: events() for n in names}


def test_collar_boundaries():
    ref = E(1.0, 2.0, 0)
    assert within_collar(ref, E(1.2, 2.2, 0))
    assert not within_collar(ref, E(1.21, 2.0, 0))
    assert not within_collar(ref, E(1.0, 2.0, 1))
    long_ref = E(0.0, 5.0, 0)
    # offset collar grows to 20 % of a 5 s event
    assert within_collar(long_ref, E(0.0, 6.0, 0)) and not within_collar(long_ref, E(0.0, 6.1, 0))


def test_greedy_matching_is_one_to_one():
    refs = [E(1.0, 2.0, 0), E(1.1, 2.1, 0)]
    res = match_events(refs, [E(1.05, 2.05, 0)])
    assert res.tp_pairs == [(0, 0)] and res.unmatched_refs == [1] and res.unmatched_dets == []


def test_perfect_and_empty_f1():
    refs = {"a": [E(1, 2, 0), E(3, 5, 1)]}
    assert event_f1(refs, refs).macro_f1 == 1.0
    report = event_f1(refs, {})
    assert report.macro_f1 == 0.0 and all(s.fn == 1 for s in report.per_class.values())
    assert event_f1({}, {}).macro_f1 == 0.0


@given(scenes())
@settings(max_examples=150, deadline=None)
def test_event_f1_matches_brute_force(scene):
    refs, dets = scene
    per_class, macro = brute_force_f1(refs, dets)
    report = event_f1(refs, dets)
    assert report.macro_f1 == macro
    assert {c: s.f1 for c, s in report.per_class.items()} == per_class


@given(scenes(), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_event_f1_is_order_invariant(scene, rnd):
    refs, dets = scene
    shuffled = {}
    for n, evs in dets.items():
        evs = list(evs)
        rnd.shuffle(evs)
        shuffled[n] = evs
    assert event_f1(refs, shuffled).macro_f1 == event_f1(refs, dets).macro_f1


def test_psds_parameters():
    cfg = PsdsConfig()
    assert (cfg.dtc_threshold, cfg.gtc_threshold, cfg.cttc_threshold) == (0.5, 0.5, 0.3)
    assert (cfg.e_max, cfg.alpha_ct, cfg.alpha_st) == (100, 1, 0)
    assert len(cfg.thresholds) == 50 and cfg.thresholds[0] == 0.01 and cfg.thresholds[-1] == 0.99
    assert psds_thresholds(3) == (0.01, 0.5, 0.99)
    with pytest.raises(ValueError):
        PsdsConfig(thresholds=(0.5, 0.4))
    with pytest.raises(ValueError):
        PsdsConfig(dtc_threshold=0)


def _constant(dets, cfg=PsdsConfig()):
    return {t: dets for t in cfg.thresholds}


def test_psds_perfect_and_empty():
    gt = {"a": [E(1, 3, 0), E(4, 6, 1)], "b": [E(0, 9, 2)]}
    dur = {"a": 10.0, "b": 10.0}
    assert psds(gt, _constant(gt), dur).value == pytest.approx(1.0, abs=1e-9)
    assert psds(gt, _constant({}), dur).value == 0.0


def test_psds_single_class_matches_exact_oracle():
    gt = [(1.0, 3.0), (5.0, 6.0), (7.0, 7.4)]
    per_th = {
        0.2: [(0.5, 3.5), (4.0, 4.8), (5.2, 6.4), (7.0, 7.3), (8.0, 9.0)],
        0.5: [(1.5, 2.5), (5.0, 5.4), (8.2, 8.5)],
        0.8: [(1.8, 2.0)],
    }
    total = 180.0  # one false positive is 20 per hour
    expected = brute_force_psds_single_class(gt, per_th, total)
    got = psds({"a": [E(a, b, 0) for a, b in gt]},
               {t: {"a": [E(a, b, 0) for a, b in d]} for t, d in per_th.items()}, {"a": total}, TH3)
    assert got.value == pytest.approx(expected, abs=1e-9)
    assert 0 < got.value < 1


@given(st.lists(st.tuples(st.integers(0, 90), st.integers(1, 15)), min_size=1, max_size=4),
       st.lists(st.lists(st.tuples(st.integers(0, 90), st.integers(1, 15)), max_size=5), min_size=3, max_size=3),
       st.sampled_from([36.0, 180.0, 3600.0]))
@settings(max_examples=80, deadline=None)
def test_psds_random_single_class_cases(gt_raw, det_raw, total):
    gt = [(a / 10, (a + d) / 10) for a, d in gt_raw]
    per_th = {t: [(a / 10, (a + d) / 10) for a, d in ds] for t, ds in zip((0.2, 0.5, 0.8), det_raw)}
    expected = brute_force_psds_single_class(gt, per_th, total)
    got = psds({"a": [E(a, b, 0) for a, b in gt]},
               {t: {"a": [E(a, b, 0) for a, b in d]} for t, d in per_th.items()}, {"a": total}, TH3)
    assert got.value == pytest.approx(expected, abs=1e-9)


def test_psds_cross_trigger_raises_efpr():
    gt = {"a": [E(1, 3, 0), E(5, 8, 1)]}
    clean = {"a": [E(1, 3, 0), E(5, 8, 1)]}
    cross = {"a": [E(1, 3, 0), E(5, 8, 1), E(5, 7, 0)]}
    r1 = psds(gt, _constant(clean), {"a": 3600.0})
    r2 = psds(gt, _constant(cross), {"a": 3600.0})
    op = r2.operating_points[0]
    assert op.fp[0] == 1 and op.ct[(0, 1)] == 1
    # 1 FP/h plus the single cross-trigger rate averaged over one other class
    assert op.efpr[0] == pytest.approx(2.0)
    assert r1.operating_points[0].efpr[0] == 0.0


def test_psds_input_validation():
    gt = {"a": [E(1, 3, 0)]}
    with pytest.raises(ValueError, match="missing"):
        psds(gt, {0.5: gt}, {"a": 10.0})
    with pytest.raises(ValueError):
        psds(gt, _constant(gt), {"a": 0.0})


def test_psds_staircase_holds_lowest_point_tpr_below_it():
    # every threshold gives the same 1 FP in 36 s (100 per hour); curve starts at e_max
    gt = {"a": [E(1, 3, 0)]}
    dets = {"a": [E(1, 3, 0), E(6, 7, 0)]}
    assert psds(gt, _constant(dets, TH3), {"a": 36.0}, TH3).value == pytest.approx(1.0)


def test_eval_report_csvs():
    names = ["x"]
    strong = [np.zeros((157, 2))]
    strong[0][20:60, 1] = 0.9
    refs = {"x": [E(20 * 0.06375, 60 * 0.06375, 1)]}
    report, dets = evaluate_posteriors(names, strong, refs, {"x": 10.0}, class_names=["dog", "cat"])
    assert report.f1.macro_f1 == 1.0 and report.psds.value == pytest.approx(1.0)
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("class,tp") and lines[1].startswith("cat,1,0,0")
    assert lines[-1].startswith("psds")
    curve = report.curve_csv().splitlines()
    assert curve[0] == "class,threshold,efpr_per_hour,tpr" and len(curve) == 51
