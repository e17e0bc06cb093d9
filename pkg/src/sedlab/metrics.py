"""Collar-based event F1 and the polyphonic sound detection score (PSDS)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import EventAnnotation

EventTable = Mapping[str, Sequence[EventAnnotation]]
TOL = 1e-9


@dataclass(frozen=True)
class CollarConfig:
    onset_collar: float = 0.200
    offset_collar_abs: float = 0.200
    offset_collar_rel: float = 0.2

    def __post_init__(self):
        if min(self.onset_collar, self.offset_collar_abs, self.offset_collar_rel) <= 0:
            raise ValueError("collars must be positive")


def psds_thresholds(n: int = 50) -> tuple[float, ...]:
    return tuple(float(x) for x in np.linspace(0.01, 0.99, n))


@dataclass(frozen=True)
class PsdsConfig:
    dtc_threshold: float = 0.5
    gtc_threshold: float = 0.5
    cttc_threshold: float = 0.3
    e_max: float = 100.0  # false positives per hour
    alpha_ct: float = 1.0
    alpha_st: float = 0.0
    thresholds: tuple[float, ...] = field(default_factory=psds_thresholds)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        for rho in (self.dtc_threshold, self.gtc_threshold, self.cttc_threshold):
            if not 0 < rho <= 1:
                raise ValueError("intersection criteria must lie in (0, 1]")
        if self.e_max <= 0:
            raise ValueError("e_max must be positive")
        th = np.asarray(self.thresholds)
        if th.size == 0 or np.any(np.diff(th) <= 0) or th[0] <= 0 or th[-1] >= 1:
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")


# -- event F1 -------------------------------------------------------------------

@dataclass
class MatchResult:
    tp_pairs: list[tuple[int, int]]  # (ref index, det index)
    unmatched_refs: list[int]
    unmatched_dets: list[int]


def within_collar(ref: EventAnnotation, det: EventAnnotation, collar: CollarConfig = CollarConfig()) -> bool:
    if ref.class_id != det.class_id:
        return False
    offset_collar = max(collar.offset_collar_abs, collar.offset_collar_rel * ref.duration)
    return (abs(det.onset - ref.onset) <= collar.onset_collar + TOL
            and abs(det.offset - ref.offset) <= offset_collar + TOL)


def match_events(refs: Sequence[EventAnnotation], dets: Sequence[EventAnnotation],
                 collar: CollarConfig = CollarConfig()) -> MatchResult:
    """Greedy one-to-one matching within one clip.

    References are visited by onset; each takes the earliest-onset eligible
    detection not yet matched.
    """
    ref_order = sorted(range(len(refs)), key=lambda i: (refs[i].onset, refs[i].offset, i))
    det_order = sorted(range(len(dets)), key=lambda j: (dets[j].onset, dets[j].offset, j))
    used = [False] * len(dets)
    pairs = []
    matched_refs = set()
    for i in ref_order:
        for j in det_order:
            if not used[j] and within_collar(refs[i], dets[j], collar):
                used[j] = True
                pairs.append((i, j))
                matched_refs.add(i)
                break
    return MatchResult(
        pairs,
        [i for i in range(len(refs)) if i not in matched_refs],
        [j for j in range(len(dets)) if not used[j]],
    )


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class F1Report:
    per_class: dict[int, ClassScore]
    macro_f1: float


def event_f1(refs: EventTable, dets: EventTable, collar: CollarConfig = CollarConfig()) -> F1Report:
    """Per-class counts pooled over all clips; macro average over classes seen in refs or dets."""
    per_class: dict[int, ClassScore] = {}
    for name in set(refs) | set(dets):
        r, d = list(refs.get(name, ())), list(dets.get(name, ()))
        res = match_events(r, d, collar)
        for i, _ in res.tp_pairs:
            per_class.setdefault(r[i].class_id, ClassScore()).tp += 1
        for i in res.unmatched_refs:
            per_class.setdefault(r[i].class_id, ClassScore()).fn += 1
        for j in res.unmatched_dets:
            per_class.setdefault(d[j].class_id, ClassScore()).fp += 1
    per_class = dict(sorted(per_class.items()))
    macro = float(np.mean([s.f1 for s in per_class.values()])) if per_class else 0.0
    return F1Report(per_class, macro)


# -- PSDS -----------------------------------------------------------------------

def _merge(intervals: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def _covered(onset: float, offset: float, union: Sequence[tuple[float, float]]) -> float:
    return sum(max(0.0, min(offset, b) - max(onset, a)) for a, b in union)


@dataclass
class OperatingPoint:
    threshold: float
    tpr: dict[int, float]
    efpr: dict[int, float]  # per hour
    fp: dict[int, int]
    ct: dict[tuple[int, int], int]


@dataclass
class PsdsResult:
    value: float
    operating_points: list[OperatingPoint]
    classes: list[int]
    curve_efpr: np.ndarray  # staircase breakpoints in [0, e_max]
    curve_tpr: np.ndarray  # effective TPR on [efpr[i], efpr[i+1])

    def per_class_curve(self, class_id: int) -> list[tuple[float, float, float]]:
        return [(op.threshold, op.efpr[class_id], op.tpr[class_id]) for op in self.operating_points]


def _operating_point(threshold: float, ground_truth: EventTable, detections: EventTable,
                     classes: list[int], hours: float, cfg: PsdsConfig) -> OperatingPoint:
    n_ref = {c: 0 for c in classes}
    hits = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    ct = {(c, o): 0 for c in classes for o in classes if o != c}
    class_set = set(classes)
    for name in set(ground_truth) | set(detections):
        gts = [e for e in ground_truth.get(name, ()) if e.class_id in class_set]
        dets = [e for e in detections.get(name, ()) if e.class_id in class_set]
        gt_union = {c: _merge([(e.onset, e.offset) for e in gts if e.class_id == c]) for c in classes}
        valid_by_class: dict[int, list[tuple[float, float]]] = {c: [] for c in classes}
        for d in dets:
            if _covered(d.onset, d.offset, gt_union[d.class_id]) >= cfg.dtc_threshold * d.duration - TOL:
                valid_by_class[d.class_id].append((d.onset, d.offset))
                continue
            fp[d.class_id] += 1
            for other in classes:
                if other != d.class_id and (
                    _covered(d.onset, d.offset, gt_union[other]) >= cfg.cttc_threshold * d.duration - TOL
                ):
                    ct[(d.class_id, other)] += 1
        for c in classes:
            union = _merge(valid_by_class[c])
            for g in (e for e in gts if e.class_id == c):
                n_ref[c] += 1
                if _covered(g.onset, g.offset, union) >= cfg.gtc_threshold * g.duration - TOL:
                    hits[c] += 1
    tpr, efpr = {}, {}
    for c in classes:
        tpr[c] = hits[c] / n_ref[c] if n_ref[c] else 0.0
        others = [o for o in classes if o != c]
        ct_rate = float(np.mean([ct[(c, o)] / hours for o in others])) if others else 0.0
        efpr[c] = fp[c] / hours + cfg.alpha_ct * ct_rate
    return OperatingPoint(threshold, tpr, efpr, fp, ct)


def _staircase(points: list[tuple[float, float]], e: float) -> float:
    """Upper-envelope TPR at eFPR ``e``; below the lowest eFPR the curve holds that point's TPR."""
    e_lo = min(p[0] for p in points)
    reachable = [t for x, t in points if x <= e + TOL or x == e_lo]
    return max(reachable)


def psds(ground_truth: EventTable, detections: Mapping[float, EventTable], durations: Mapping[str, float],
         cfg: PsdsConfig = PsdsConfig(), classes: Optional[Sequence[int]] = None) -> PsdsResult:
    """PSDS over ``cfg.thresholds``; ``detections`` maps each threshold to decoded events.

    ``classes`` defaults to the classes present in the ground truth; detections of
    other classes are ignored.
    """
    missing = [t for t in cfg.thresholds if not any(abs(t - k) < 1e-9 for k in detections)]
    if missing:
        raise ValueError(f"missing detection lists for thresholds {missing[:3]}...")
    total_s = float(sum(durations.values()))
    if total_s <= 0:
        raise ValueError("zero total duration")
    hours = total_s / 3600.0
    if classes is None:
        classes = sorted({e.class_id for evs in ground_truth.values() for e in evs})
    classes = sorted(classes)
    if not classes:
        raise ValueError("ground truth contains no events")
    by_threshold = {t: next(v for k, v in detections.items() if abs(t - k) < 1e-9) for t in cfg.thresholds}
    ops = [_operating_point(t, ground_truth, by_threshold[t], classes, hours, cfg) for t in cfg.thresholds]

    curves = {c: [(op.efpr[c], op.tpr[c]) for op in ops] for c in classes}
    breaks = sorted({0.0, cfg.e_max} | {x for pts in curves.values() for x, _ in pts if x < cfg.e_max})
    eff = []
    for e in breaks[:-1]:
        tprs = np.array([_staircase(curves[c], e) for c in classes])
        eff.append(tprs.mean() - cfg.alpha_st * tprs.std())
    widths = np.diff(breaks)
    value = float(np.dot(eff, widths) / cfg.e_max)
    return PsdsResult(value, ops, list(classes), np.asarray(breaks), np.asarray(eff))


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    f1: F1Report
    psds: Optional[PsdsResult] = None
    class_names: Optional[Sequence[str]] = None

    def _name(self, c: int) -> str:
        return self.class_names[c] if self.class_names is not None else str(c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1"])
        for c, s in self.f1.per_class.items():
            w.writerow([self._name(c), s.tp, s.fp, s.fn, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"])
        w.writerow(["macro_f1", "", "", "", "", "", f"{self.f1.macro_f1:.6f}"])
        if self.psds is not None:
            w.writerow(["psds", "", "", "", "", "", f"{self.psds.value:.6f}"])
        return buf.getvalue()

    def curve_csv(self) -> str:
        """TPR/eFPR operating points for external plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "threshold", "efpr_per_hour", "tpr"])
        if self.psds is not None:
            for c in self.psds.classes:
                for th, e, t in self.psds.per_class_curve(c):
                    w.writerow([self._name(c), f"{th:.4f}", f"{e:.6f}", f"{t:.6f}"])
        return buf.getvalue()
