import numpy as np
import pytest

from enginesed import metrics as M
from enginesed.errors import ConfigError, DataError
from enginesed.signal_io import SoundEvent

from oracles import (max_matching_size, naive_event_f1, naive_psds,
                     naive_segment_f1, random_scenario)

STEP = 30.0 / 161


# ---------------------------------------------------------------------------
# binarization

def test_binarize_all_below_threshold():
    y = np.full((161, 10), 0.2)
    assert M.binarize_to_events(y, 0.5, STEP) == []


def test_binarize_run_index_arithmetic():
    y = np.zeros((161, 10))
    y[10:21, 2] = 0.9     # steps 10..20 active
    events = M.binarize_to_events(y, 0.5, STEP)
    assert len(events) == 1
    ev = events[0]
    assert ev.class_id == 2
    assert ev.onset == pytest.approx(10 * STEP)          # ~1.863
    assert ev.offset == pytest.approx(21 * STEP)         # ~3.913
    assert ev.onset == pytest.approx(1.863, abs=5e-3)
    assert ev.offset == pytest.approx(3.913, abs=5e-3)


def test_binarize_two_runs_no_gap_merging():
    y = np.zeros((20, 1))
    y[2:5, 0] = 1.0
    y[6:9, 0] = 1.0
    events = M.binarize_to_events(y, 0.5, 0.1)
    assert len(events) == 2


def test_binarize_per_class_thresholds():
    y = np.zeros((10, 2))
    y[:, 0] = 0.4
    y[:, 1] = 0.4
    events = M.binarize_to_events(y, np.array([0.3, 0.5]), 0.1)
    assert {ev.class_id for ev in events} == {0}


def test_binarize_rejects_out_of_range_threshold():
    with pytest.raises(ConfigError):
        M.binarize_to_events(np.zeros((5, 1)), 1.0, 0.1)


# ---------------------------------------------------------------------------
# PSDS hand-constructed scenarios

def perfect_scenario(n_classes=3, n_records=4):
    rng = np.random.default_rng(42)
    gt = {}
    for i in range(n_records):
        events = []
        onset = 1.0
        for c in range(n_classes):
            dur = rng.uniform(1.0, 3.0)
            events.append(SoundEvent(c, onset, onset + dur))
            onset += dur + 2.0
        gt[f"r{i}"] = events
    return gt


def test_psds_perfect_detector_is_one_under_all_presets():
    gt = perfect_scenario()
    dets_by_thr = {thr: {rid: list(events) for rid, events in gt.items()}
                   for thr in (0.1, 0.5, 0.9)}
    hours = len(gt) * 30 / 3600
    for name, cfg in M.PSDS_PRESETS.items():
        res = M.psds(dets_by_thr, gt, 3, cfg, hours)
        assert res.value == pytest.approx(1.0, abs=1e-12), name


def test_psds_no_detections_is_zero():
    gt = perfect_scenario()
    dets_by_thr = {0.5: {rid: [] for rid in gt}}
    res = M.psds(dets_by_thr, gt, 3, M.PSDS_PRESETS["psds1"], 4 * 30 / 3600)
    assert res.value == 0.0


def test_psds_half_tpr_at_zero_efpr():
    # 1 class, 1 hour of audio, one op with TPR 0.5 at eFPR 0
    gt = {"a": [SoundEvent(0, 1.0, 2.0), SoundEvent(0, 5.0, 6.0)]}
    dets = {"a": [SoundEvent(0, 1.0, 2.0)]}
    res = M.psds({0.5: dets}, gt, 1, M.PSDS_PRESETS["psds1"], 1.0)
    assert res.value == pytest.approx(0.5, abs=1e-12)
    oracle = naive_psds({0.5: dets}, gt, 1, 0.05, 0.05, 0.0, 100.0, 1.0)
    assert res.value == pytest.approx(oracle, abs=1e-12)


def test_psds_efpr_cap_and_envelope():
    # one op: TPR 1.0 at eFPR 50 -> envelope is 0 below 50, 1 above
    gt = {"a": [SoundEvent(0, 1.0, 2.0)]}
    dets = {"a": [SoundEvent(0, 1.0, 2.0)] +
            [SoundEvent(0, 3.0 + 0.2 * i, 3.1 + 0.2 * i) for i in range(50)]}
    res = M.psds({0.5: dets}, gt, 1, M.PSDS_PRESETS["psds1"], 1.0)
    assert res.value == pytest.approx(0.5, abs=1e-12)


def test_psds_monotone_in_dominating_operating_point():
    rng = np.random.default_rng(3)
    gt, dets_by_thr = random_scenario(rng)
    hours = len(gt) * 30 / 3600
    base = M.psds(dets_by_thr, gt, 3, M.PSDS_PRESETS["psds1"], hours).value
    richer = dict(dets_by_thr)
    richer[0.99] = {rid: list(events) for rid, events in gt.items()}  # perfect op
    better = M.psds(richer, gt, 3, M.PSDS_PRESETS["psds1"], hours).value
    assert better >= base - 1e-12


def test_psds_skips_classes_without_ground_truth():
    gt = {"a": [SoundEvent(0, 1.0, 2.0)]}
    dets = {"a": [SoundEvent(0, 1.0, 2.0), SoundEvent(1, 4.0, 5.0)]}
    res = M.psds({0.5: dets}, gt, 2, M.PSDS_PRESETS["psds1"], 1.0)
    assert res.evaluated_classes == [0]
    assert res.value == pytest.approx(1.0)


def test_psds_stability_penalty_lowers_uneven_classes():
    gt = {"a": [SoundEvent(0, 1.0, 2.0), SoundEvent(1, 4.0, 5.0)]}
    dets = {"a": [SoundEvent(0, 1.0, 2.0)]}   # class 0 perfect, class 1 missed
    flat = M.psds({0.5: dets}, gt, 2, M.PSDS_PRESETS["psds1"], 1.0).value
    penalized = M.psds({0.5: dets}, gt, 2, M.PSDS_PRESETS["psds3"], 1.0).value
    assert flat == pytest.approx(0.5)
    assert penalized == pytest.approx(0.0, abs=1e-12)   # mean 0.5 - std 0.5


def test_psds_randomized_against_oracle():
    for seed in range(25):
        rng = np.random.default_rng(100 + seed)
        gt, dets_by_thr = random_scenario(rng, n_records=rng.integers(1, 5),
                                          n_classes=rng.integers(1, 4))
        if not any(gt.values()):
            continue
        hours = len(gt) * 30 / 3600
        for name, cfg in M.PSDS_PRESETS.items():
            got = M.psds(dets_by_thr, gt, 3, cfg, hours).value
            want = naive_psds(dets_by_thr, gt, 3, cfg.rho_dtc, cfg.rho_gtc,
                              cfg.alpha_st, cfg.e_max, hours)
            assert got == pytest.approx(want, abs=1e-9), (seed, name)


def test_psds_invariant_to_record_order():
    rng = np.random.default_rng(7)
    gt, dets_by_thr = random_scenario(rng)
    hours = len(gt) * 30 / 3600
    base = M.psds(dets_by_thr, gt, 3, M.PSDS_PRESETS["psds3"], hours).value
    reversed_gt = dict(reversed(list(gt.items())))
    reversed_dets = {thr: dict(reversed(list(d.items())))
                     for thr, d in dets_by_thr.items()}
    assert M.psds(reversed_dets, reversed_gt, 3, M.PSDS_PRESETS["psds3"],
                  hours).value == pytest.approx(base, abs=1e-12)


def test_psds_invariant_to_class_permutation():
    rng = np.random.default_rng(8)
    gt, dets_by_thr = random_scenario(rng)
    hours = len(gt) * 30 / 3600
    base = M.psds(dets_by_thr, gt, 3, M.PSDS_PRESETS["psds1"], hours).value
    perm = [2, 0, 1]

    def permute(events):
        return [SoundEvent(perm[ev.class_id], ev.onset, ev.offset) for ev in events]

    gt_p = {rid: permute(evs) for rid, evs in gt.items()}
    dets_p = {thr: {rid: permute(evs) for rid, evs in d.items()}
              for thr, d in dets_by_thr.items()}
    assert M.psds(dets_p, gt_p, 3, M.PSDS_PRESETS["psds1"],
                  hours).value == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# segment F1

def test_segment_f1_exact_predictions():
    gt = perfect_scenario()
    dets = {rid: list(events) for rid, events in gt.items()}
    assert M.segment_f1(dets, gt, 3) == pytest.approx(1.0)


def test_segment_f1_hand_counts():
    # GT (0, 1.0), detection (0, 0.5): 5 GT segments, 3 detected segments
    # (0.4-0.6 straddles), TP=3, FN=2, FP=0 -> F1 = 0.75
    gt = {"a": [SoundEvent(0, 0.0, 1.0)]}
    dets = {"a": [SoundEvent(0, 0.0, 0.5)]}
    assert M.segment_f1(dets, gt, 1) == pytest.approx(0.75)


def test_segment_f1_empty_predictions():
    gt = perfect_scenario()
    dets = {rid: [] for rid in gt}
    assert M.segment_f1(dets, gt, 3) == 0.0


def test_segment_f1_randomized_against_oracle():
    for seed in range(25):
        rng = np.random.default_rng(200 + seed)
        gt, dets_by_thr = random_scenario(rng, n_records=rng.integers(1, 5),
                                          n_classes=rng.integers(1, 4))
        dets = dets_by_thr[0.5]
        got = M.segment_f1(dets, gt, 3)
        want = naive_segment_f1(dets, gt, 3)
        assert got == pytest.approx(want, abs=1e-9), seed


# ---------------------------------------------------------------------------
# event F1

def test_event_f1_exact_predictions():
    gt = perfect_scenario()
    dets = {rid: list(events) for rid, events in gt.items()}
    assert M.event_f1(dets, gt, 3) == pytest.approx(1.0)


def test_event_f1_collar_violished_onset():
    gt = {"a": [SoundEvent(0, 5.0, 7.0)]}
    dets = {"a": [SoundEvent(0, 5.6, 7.0)]}   # onset off by 0.6 > 0.5 collar
    assert M.event_f1(dets, gt, 1) == 0.0


def test_event_f1_offset_collar_widens_with_duration():
    # 4 s event: offset tolerance max(0.5, 2.0) = 2.0
    gt = {"a": [SoundEvent(0, 5.0, 9.0)]}
    dets = {"a": [SoundEvent(0, 5.2, 10.8)]}
    assert M.event_f1(dets, gt, 1) == pytest.approx(1.0)


def test_event_f1_two_detections_one_gt():
    gt = {"a": [SoundEvent(0, 5.0, 6.0)]}
    dets = {"a": [SoundEvent(0, 5.1, 6.1), SoundEvent(0, 4.9, 6.0)]}
    tp, fp, fn, n_gt, n_det = M.event_counts(dets, gt, 1)
    assert (tp[0], fp[0], fn[0]) == (1, 1, 0)
    # enumeration oracle agrees: max matching size is 1
    assert max_matching_size([(5.1, 6.1), (4.9, 6.0)], [(5.0, 6.0)]) == 1


def test_event_f1_greedy_equals_max_matching_on_separated_events():
    for seed in range(15):
        rng = np.random.default_rng(300 + seed)
        gt, dets_by_thr = random_scenario(rng)
        dets = dets_by_thr[0.5]
        for rid in gt:
            for c in range(3):
                gts_c = [(e.onset, e.offset) for e in gt[rid] if e.class_id == c]
                dets_c = [(e.onset, e.offset) for e in dets[rid] if e.class_id == c]
                tp, _, _ = M._match_events(dets_c, gts_c, 0.5)
                assert tp == max_matching_size(dets_c, gts_c, 0.5)


def test_event_f1_randomized_against_oracle():
    for seed in range(25):
        rng = np.random.default_rng(400 + seed)
        gt, dets_by_thr = random_scenario(rng, n_records=rng.integers(1, 5),
                                          n_classes=rng.integers(1, 4))
        dets = dets_by_thr[0.5]
        got = M.event_f1(dets, gt, 3)
        want = naive_event_f1(dets, gt, 3)
        assert got == pytest.approx(want, abs=1e-9), seed


# ---------------------------------------------------------------------------
# optimal threshold search

def test_threshold_search_finds_unique_argmax():
    # class 0 separable exactly at >= 0.37
    rng = np.random.default_rng(9)
    n_t = 161
    gt = {"a": [SoundEvent(0, 10 * STEP, 30 * STEP)]}
    y = np.full((n_t, 1), 0.10)
    y[10:30, 0] = 0.375    # active run only once threshold <= 0.375
    y[40:90, 0] = 0.365    # long false region active below 0.37
    y_hat = {"a": y}
    result = M.optimal_threshold_search(y_hat, gt, 1, "segment", STEP)
    assert result.thresholds[0] == pytest.approx(0.37)
    assert result.macro_f1 == pytest.approx(1.0)


def test_threshold_search_exhaustive_grid_oracle():
    rng = np.random.default_rng(10)
    gt, _ = random_scenario(rng, n_records=2, n_classes=2)
    n_t = 161
    y_hat = {rid: rng.random((n_t, 2)) for rid in gt}
    result = M.optimal_threshold_search(y_hat, gt, 2, "segment", STEP)
    for c in range(2):
        best = -1.0
        best_thr = None
        for thr in M.search_grid():
            dets = {rid: M.binarize_to_events(y, thr, STEP)
                    for rid, y in y_hat.items()}
            tp, fp, fn, _ = M.segment_counts(dets, gt, 2)
            denom = 2 * tp[c] + fp[c] + fn[c]
            f1 = 2 * tp[c] / denom if denom else 0.0
            if f1 > best + 1e-12:
                best = f1
                best_thr = thr
        if not np.isnan(result.per_class_f1[c]):
            assert result.per_class_f1[c] == pytest.approx(best, abs=1e-12)
            assert result.thresholds[c] == pytest.approx(best_thr)


def test_threshold_search_perfectly_separable():
    gt = {"a": [SoundEvent(0, 0.0, 15.0)]}
    y = np.full((161, 1), 0.05)
    y[:81, 0] = 0.95     # steps 0..80 cover ~[0, 15.09]
    result = M.optimal_threshold_search({"a": y}, gt, 1, "segment", STEP)
    assert result.macro_f1 == pytest.approx(1.0, abs=0.02)


def test_threshold_search_constant_predictions():
    gt = {"a": [SoundEvent(0, 0.0, 15.0)]}
    y = np.full((161, 1), 0.5)
    result = M.optimal_threshold_search({"a": y}, gt, 1, "segment", STEP)
    # all-or-nothing: either the whole record is active (recall 1) or nothing
    dets_all = {"a": M.binarize_to_events(y, 0.4, STEP)}
    tp, fp, fn, _ = M.segment_counts(dets_all, gt, 1)
    f1_all = 2 * tp[0] / (2 * tp[0] + fp[0] + fn[0])
    assert result.macro_f1 == pytest.approx(max(f1_all, 0.0))


# ---------------------------------------------------------------------------
# mROC / mAP

def test_mroc_map_scores_equal_labels():
    rng = np.random.default_rng(11)
    labels = (rng.random((50, 4)) < 0.4).astype(float)
    labels[0] = 1.0
    labels[1] = 0.0     # ensure both labels present per class
    mroc, mean_ap = M.mroc_map(labels.copy(), labels)
    assert mroc == pytest.approx(1.0)
    assert mean_ap == pytest.approx(1.0)


def test_mroc_reversed_ranking_is_zero():
    labels = np.array([[1.0], [1.0], [0.0], [0.0]])
    scores = 1.0 - labels
    mroc, _ = M.mroc_map(scores, labels)
    assert mroc == pytest.approx(0.0)


def test_mroc_random_scores_near_half():
    rng = np.random.default_rng(12)
    n = 10 ** 4
    labels = (rng.random((n, 1)) < 0.5).astype(float)
    scores = rng.random((n, 1))
    mroc, _ = M.mroc_map(scores, labels)
    assert abs(mroc - 0.5) < 0.02


def test_mroc_map_against_sklearn():
    from sklearn.metrics import average_precision_score, roc_auc_score
    rng = np.random.default_rng(13)
    for trial in range(10):
        n, c = 40, 3
        labels = (rng.random((n, c)) < 0.4).astype(float)
        labels[0] = 1.0
        labels[1] = 0.0
        scores = rng.random((n, c))
        if trial % 2:
            scores = np.round(scores, 1)   # force ties
        mroc, mean_ap = M.mroc_map(scores, labels)
        want_auc = np.mean([roc_auc_score(labels[:, i], scores[:, i])
                            for i in range(c)])
        want_ap = np.mean([average_precision_score(labels[:, i], scores[:, i])
                           for i in range(c)])
        assert mroc == pytest.approx(want_auc, abs=1e-10)
        assert mean_ap == pytest.approx(want_ap, abs=1e-10)


def test_mroc_skips_single_label_classes():
    labels = np.array([[1.0, 1.0], [0.0, 1.0], [1.0, 1.0]])
    scores = np.array([[0.9, 0.5], [0.1, 0.5], [0.8, 0.5]])
    mroc, _ = M.mroc_map(scores, labels)
    assert mroc == pytest.approx(1.0)   # class 1 skipped (all positive)


def test_mroc_all_single_label_raises():
    with pytest.raises(DataError):
        M.mroc_map(np.ones((3, 1)), np.ones((3, 1)))
