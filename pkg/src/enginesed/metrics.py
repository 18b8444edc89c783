"""Detection evaluation: PSDS under three presets, segment/event F1 with
class-wise optimal thresholds, and sample-level mROC/mAP.

Detections and ground truth are dicts mapping record id to SoundEvent
lists. PSDS builds, per class, the non-decreasing upper envelope of
(effective-FPR, TPR) operating points (including the origin), averages the
envelopes across classes with an optional stability penalty on their
standard deviation, and integrates the resulting step function up to
`e_max` false positives per hour.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .signal_io import SoundEvent

log = logging.getLogger(__name__)

_OVERLAP_EPS = 1e-12


@dataclass(frozen=True)
class PSDSConfig:
    rho_dtc: float = 0.05
    rho_gtc: float = 0.05
    alpha_st: float = 0.0
    alpha_ct: float = 0.0
    e_max: float = 100.0


PSDS_PRESETS = {
    "psds1": PSDSConfig(0.05, 0.05, 0.0),
    "psds2": PSDSConfig(0.40, 0.40, 0.0),
    "psds3": PSDSConfig(0.05, 0.05, 1.0),
}


def operating_thresholds(n: int = 50) -> np.ndarray:
    return np.linspace(0.01, 0.99, n)


def search_grid() -> np.ndarray:
    return np.round(np.arange(1, 100) * 0.01, 2)


# ---------------------------------------------------------------------------
# events from frame predictions

def binarize_to_events(y_hat_s: np.ndarray, threshold, step_s: float) -> list[SoundEvent]:
    """Threshold frame predictions and merge maximal active runs per class.

    `threshold` is a scalar or per-class vector in (0, 1). Run [i, j]
    becomes an event (i * step_s, (j + 1) * step_s).
    """
    y_hat_s = np.asarray(y_hat_s)
    n_t, n_classes = y_hat_s.shape
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (n_classes,))
    if np.any(thr <= 0) or np.any(thr >= 1):
        raise ConfigError("thresholds must lie strictly inside (0, 1)")
    events = []
    active = y_hat_s >= thr
    for c in range(n_classes):
        for start, stop in _runs(active[:, c]):
            events.append(SoundEvent(c, start * step_s, stop * step_s))
    return events


def _runs(mask: np.ndarray):
    """Maximal runs of True as (start, stop_exclusive) pairs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return zip(edges[::2], edges[1::2])


def events_by_class(events: list[SoundEvent], n_classes: int) -> list[list[tuple]]:
    out = [[] for _ in range(n_classes)]
    for ev in events:
        out[ev.class_id].append((ev.onset, ev.offset))
    return out


def _merge(intervals):
    if not intervals:
        return []
    merged = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def _intersection(onset, offset, merged):
    total = 0.0
    for s, e in merged:
        if s >= offset:
            break
        total += max(0.0, min(offset, e) - max(onset, s))
    return total


# ---------------------------------------------------------------------------
# PSDS

@dataclass
class PSDSResult:
    value: float
    per_class: dict[int, float] = field(default_factory=dict)
    evaluated_classes: list[int] = field(default_factory=list)


def detection_counts(dets_by_record: dict, gt_by_record: dict, n_classes: int,
                     rho_dtc: float, rho_gtc: float,
                     count_cross_triggers: bool = False):
    """Per-class (TP, FP, cross-trigger matrix) for one operating point.

    A detection satisfies the DTC when at least rho_dtc of its duration
    intersects same-class ground truth; failing detections count as FPs.
    A ground-truth event is a TP when DTC-satisfying detections cover at
    least rho_gtc of its duration.
    """
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    ct = np.zeros((n_classes, n_classes))
    for rid, gt_events in gt_by_record.items():
        dets = dets_by_record.get(rid, [])
        gt_cls = events_by_class(gt_events, n_classes)
        det_cls = events_by_class(dets, n_classes)
        gt_merged = [_merge(iv) for iv in gt_cls]
        for c in range(n_classes):
            valid = []
            for onset, offset in det_cls[c]:
                dur = offset - onset
                inter = _intersection(onset, offset, gt_merged[c])
                if inter >= rho_dtc * dur - _OVERLAP_EPS:
                    valid.append((onset, offset))
                else:
                    fp[c] += 1
                    if count_cross_triggers:
                        for k in range(n_classes):
                            if k == c:
                                continue
                            cross = _intersection(onset, offset, gt_merged[k])
                            if cross >= rho_dtc * dur - _OVERLAP_EPS:
                                ct[c, k] += 1
            covered = _merge(valid)
            for onset, offset in gt_cls[c]:
                dur = offset - onset
                if _intersection(onset, offset, covered) >= rho_gtc * dur - _OVERLAP_EPS:
                    tp[c] += 1
    return tp, fp, ct


def _gt_totals(gt_by_record: dict, n_classes: int) -> np.ndarray:
    totals = np.zeros(n_classes)
    for events in gt_by_record.values():
        for ev in events:
            totals[ev.class_id] += 1
    return totals


def _envelope(points):
    """Non-decreasing upper envelope of (efpr, tpr) points including (0, 0);
    returns (breakpoints, values) of a right-continuous step function."""
    pts = sorted(set(points) | {(0.0, 0.0)})
    xs, ys = [], []
    best = 0.0
    for e, t in pts:
        best = max(best, t)
        if xs and xs[-1] == e:
            ys[-1] = best
        else:
            xs.append(e)
            ys.append(best)
    return np.asarray(xs), np.asarray(ys)


def _step_value(xs, ys, e):
    idx = np.searchsorted(xs, e, side="right") - 1
    return ys[np.maximum(idx, 0)] * (idx >= 0)


def _step_integral(xs, ys, e_max):
    """Integral of the step envelope over [0, e_max]."""
    keep = xs < e_max
    bx = np.concatenate([xs[keep], [e_max]])
    by = np.concatenate([ys[keep], [0.0]])    # last value unused
    widths = np.diff(bx)
    return float((by[:-1] * widths).sum())


def psds(detections_by_threshold: dict, gt_by_record: dict, n_classes: int,
         config: PSDSConfig, total_audio_hours: float) -> PSDSResult:
    """PSDS over a set of operating points (one detection dict per threshold)."""
    if not detections_by_threshold:
        raise ConfigError("psds needs at least one operating point")
    if total_audio_hours <= 0:
        raise ConfigError("total_audio_hours must be positive")
    totals = _gt_totals(gt_by_record, n_classes)
    classes = [c for c in range(n_classes) if totals[c] > 0]
    if not classes:
        raise DataError("ground truth contains no events")
    skipped = [c for c in range(n_classes) if totals[c] == 0]
    if skipped:
        log.info("psds: skipping classes without ground truth: %s", skipped)

    count_ct = config.alpha_ct > 0
    points = {c: [] for c in classes}
    for dets in detections_by_threshold.values():
        tp, fp, ct = detection_counts(dets, gt_by_record, n_classes,
                                      config.rho_dtc, config.rho_gtc, count_ct)
        for c in classes:
            tpr = tp[c] / totals[c]
            efpr = fp[c] / total_audio_hours
            if count_ct and len(classes) > 1:
                ctr = ct[c, classes].sum() / (len(classes) - 1) / total_audio_hours
                efpr += config.alpha_ct * ctr
            points[c].append((efpr, tpr))

    envelopes = {c: _envelope(points[c]) for c in classes}
    per_class = {
        c: _step_integral(xs, ys, config.e_max) / config.e_max
        for c, (xs, ys) in envelopes.items()
    }
    breakpoints = np.unique(np.concatenate(
        [[0.0, config.e_max]] + [xs[xs < config.e_max] for xs, _ in envelopes.values()]
    ))
    env_matrix = np.stack([
        _step_value(xs, ys, breakpoints) for xs, ys in envelopes.values()
    ])
    etpr = env_matrix.mean(axis=0) - config.alpha_st * env_matrix.std(axis=0)
    etpr = np.maximum(etpr, 0.0)
    widths = np.diff(breakpoints)
    value = float((etpr[:-1] * widths).sum() / config.e_max)
    return PSDSResult(value=value, per_class=per_class, evaluated_classes=classes)


def psds_suite(y_hat_by_record: dict, gt_by_record: dict, n_classes: int,
               step_s: float, total_audio_hours: float,
               thresholds: np.ndarray) -> dict[str, PSDSResult]:
    """All three presets from one prediction set, sharing binarization."""
    dets_by_thr = {
        float(thr): {
            rid: binarize_to_events(y_hat, thr, step_s)
            for rid, y_hat in y_hat_by_record.items()
        }
        for thr in thresholds
    }
    return {
        name: psds(dets_by_thr, gt_by_record, n_classes, cfg, total_audio_hours)
        for name, cfg in PSDS_PRESETS.items()
    }


# ---------------------------------------------------------------------------
# segment-based F1

def _segment_marks(events_c, n_seg: int, segment_s: float) -> np.ndarray:
    starts = np.arange(n_seg) * segment_s
    ends = np.arange(1, n_seg + 1) * segment_s
    mask = np.zeros(n_seg, dtype=bool)
    for onset, offset in events_c:
        mask |= (onset < ends) & (offset > starts)
    return mask


def segment_counts(dets_by_record: dict, gt_by_record: dict, n_classes: int,
                   segment_s: float = 0.2, record_duration_s: float = 30.0):
    """Per-class (TP, FP, FN) over fixed-length segments tiled per record."""
    n_seg = int(np.ceil(record_duration_s / segment_s))
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    gt_pos = np.zeros(n_classes)
    for rid, gt_events in gt_by_record.items():
        det_cls = events_by_class(dets_by_record.get(rid, []), n_classes)
        gt_cls = events_by_class(gt_events, n_classes)
        for c in range(n_classes):
            gt_mask = _segment_marks(gt_cls[c], n_seg, segment_s)
            det_mask = _segment_marks(det_cls[c], n_seg, segment_s)
            tp[c] += np.sum(gt_mask & det_mask)
            fp[c] += np.sum(~gt_mask & det_mask)
            fn[c] += np.sum(gt_mask & ~det_mask)
            gt_pos[c] += np.sum(gt_mask)
    return tp, fp, fn, gt_pos


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)


def segment_f1(dets_by_record: dict, gt_by_record: dict, n_classes: int,
               segment_s: float = 0.2, record_duration_s: float = 30.0) -> float:
    """Macro F1 over 0.2 s segments; classes without positive ground-truth
    segments are excluded from the average."""
    tp, fp, fn, gt_pos = segment_counts(dets_by_record, gt_by_record, n_classes,
                                        segment_s, record_duration_s)
    f1 = _f1(tp, fp, fn)
    included = gt_pos > 0
    if not included.any():
        return 0.0
    return float(f1[included].mean())


# ---------------------------------------------------------------------------
# event-based F1

def _match_events(dets_c, gts_c, collar: float):
    """Greedy onset-ordered one-to-one matching under the collar rule."""
    dets = sorted(dets_c)
    gts = sorted(gts_c)
    matched_gt = [False] * len(gts)
    tp = 0
    for d_on, d_off in dets:
        for gi, (g_on, g_off) in enumerate(gts):
            if matched_gt[gi]:
                continue
            offset_collar = max(collar, 0.5 * (g_off - g_on))
            if abs(d_on - g_on) <= collar and abs(d_off - g_off) <= offset_collar:
                matched_gt[gi] = True
                tp += 1
                break
    return tp, len(dets) - tp, len(gts) - tp


def event_counts(dets_by_record: dict, gt_by_record: dict, n_classes: int,
                 collar: float = 0.5):
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    n_gt = np.zeros(n_classes)
    n_det = np.zeros(n_classes)
    for rid, gt_events in gt_by_record.items():
        det_cls = events_by_class(dets_by_record.get(rid, []), n_classes)
        gt_cls = events_by_class(gt_events, n_classes)
        for c in range(n_classes):
            t, f, m = _match_events(det_cls[c], gt_cls[c], collar)
            tp[c] += t
            fp[c] += f
            fn[c] += m
            n_gt[c] += len(gt_cls[c])
            n_det[c] += len(det_cls[c])
    return tp, fp, fn, n_gt, n_det


def event_f1(dets_by_record: dict, gt_by_record: dict, n_classes: int,
             collar: float = 0.5) -> float:
    """Macro F1 with onset collar 0.5 s and offset collar
    max(0.5, half the ground-truth duration); macro over classes with any
    ground truth or detections."""
    tp, fp, fn, n_gt, n_det = event_counts(dets_by_record, gt_by_record,
                                           n_classes, collar)
    f1 = _f1(tp, fp, fn)
    included = (n_gt > 0) | (n_det > 0)
    if not included.any():
        return 0.0
    return float(f1[included].mean())


# ---------------------------------------------------------------------------
# class-wise optimal-threshold search

@dataclass
class ThresholdSearchResult:
    thresholds: np.ndarray       # (C,)
    macro_f1: float
    per_class_f1: np.ndarray     # (C,)
    included: np.ndarray         # (C,) bool


def optimal_threshold_search(y_hat_by_record: dict, gt_by_record: dict,
                             n_classes: int, metric: str, step_s: float,
                             grid: np.ndarray | None = None,
                             segment_s: float = 0.2, collar: float = 0.5,
                             record_duration_s: float = 30.0) -> ThresholdSearchResult:
    """Pick, per class, the grid threshold maximizing its F1 (ties go to
    the lowest threshold); macro-averages the winning per-class F1s."""
    if metric not in ("segment", "event"):
        raise ConfigError(f"unknown threshold-search metric {metric!r}")
    if grid is None:
        grid = search_grid()
    totals = _gt_totals(gt_by_record, n_classes)
    scores = np.zeros((len(grid), n_classes))
    for gi, thr in enumerate(grid):
        dets = {rid: binarize_to_events(y_hat, thr, step_s)
                for rid, y_hat in y_hat_by_record.items()}
        if metric == "segment":
            tp, fp, fn, _ = segment_counts(dets, gt_by_record, n_classes,
                                           segment_s, record_duration_s)
        else:
            tp, fp, fn, _, _ = event_counts(dets, gt_by_record, n_classes, collar)
        scores[gi] = _f1(tp, fp, fn)
    best_idx = scores.argmax(axis=0)
    thresholds = grid[best_idx]
    per_class = scores[best_idx, np.arange(n_classes)]
    included = totals > 0
    macro = float(per_class[included].mean()) if included.any() else 0.0
    return ThresholdSearchResult(thresholds, macro, per_class, included)


# ---------------------------------------------------------------------------
# sample-level metrics

def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with midranks for ties."""
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc needs both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (rank_pos + rank_pos + (j - i))
        rank_pos += j - i + 1
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP as precision-weighted recall steps at distinct score thresholds."""
    pos = labels > 0.5
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DataError("average_precision needs positive samples")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = pos[order].astype(np.float64)
    tps = np.cumsum(sorted_pos)
    fps = np.cumsum(1.0 - sorted_pos)
    distinct = np.flatnonzero(np.diff(np.concatenate([sorted_scores, [np.nan]])) != 0)
    tps, fps = tps[distinct], fps[distinct]
    precision = tps / (tps + fps)
    recall = tps / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - recall_prev) * precision).sum())


def mroc_map(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Macro-averaged ROC-AUC and average precision over usable classes
    (classes whose labels are all one value are skipped)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigError(f"scores {scores.shape} vs labels {labels.shape}")
    aucs, aps = [], []
    skipped = []
    for c in range(scores.shape[1]):
        col = labels[:, c]
        if col.min() == col.max():
            skipped.append(c)
            continue
        aucs.append(roc_auc(scores[:, c], col))
        aps.append(average_precision(scores[:, c], col))
    if skipped:
        log.info("mroc_map: skipping single-label classes: %s", skipped)
    if not aucs:
        raise DataError("no class has both positive and negative samples")
    return float(np.mean(aucs)), float(np.mean(aps))
