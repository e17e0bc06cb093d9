"""Independent reference implementations used only by the tests."""
from fractions import Fraction
from itertools import product

import numpy as np
import torch


def central_differences(loss_fn, params, delta=1e-4):
    """Gradient of ``loss_fn(params)`` by central differences, element by element."""
    out = {}
    for name, tensor in params.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + delta
            plus = float(loss_fn(params))
            flat[i] = orig - delta
            minus = float(loss_fn(params))
            flat[i] = orig
            grad.view(-1)[i] = (plus - minus) / (2 * delta)
        out[name] = grad
    return out


def relative_error(a, b, floor=1e-8):
    """Norm-wise relative error; ``floor`` guards gradients that are identically zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


# -- event F1 -----------------------------------------------------------------

def brute_force_f1(refs, dets, onset_collar=0.2, offset_abs=0.2, offset_rel=0.2):
    """Greedy collar matching written from scratch with an explicit eligibility matrix."""
    tp, fp, fn = {}, {}, {}
    classes = set()
    for name in set(refs) | set(dets):
        r = [e for _, e in sorted(enumerate(refs.get(name, [])), key=lambda p: (p[1].onset, p[1].offset, p[0]))]
        d = [e for _, e in sorted(enumerate(dets.get(name, [])), key=lambda p: (p[1].onset, p[1].offset, p[0]))]
        ok = np.zeros((len(r), len(d)), dtype=bool)
        for i, j in product(range(len(r)), range(len(d))):
            ref, det = r[i], d[j]
            coll = max(offset_abs, offset_rel * (ref.offset - ref.onset))
            ok[i, j] = (ref.class_id == det.class_id
                        and abs(det.onset - ref.onset) <= onset_collar + 1e-9
                        and abs(det.offset - ref.offset) <= coll + 1e-9)
        taken = np.zeros(len(d), dtype=bool)
        for i in range(len(r)):
            c = r[i].class_id
            classes.add(c)
            cands = np.flatnonzero(ok[i] & ~taken)
            if len(cands):
                taken[cands[0]] = True
                tp[c] = tp.get(c, 0) + 1
            else:
                fn[c] = fn.get(c, 0) + 1
        for j in np.flatnonzero(~taken):
            c = d[j].class_id
            classes.add(c)
            fp[c] = fp.get(c, 0) + 1
    scores = {}
    for c in classes:
        t, f_p, f_n = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        p = t / (t + f_p) if t + f_p else 0.0
        rc = t / (t + f_n) if t + f_n else 0.0
        scores[c] = 2 * p * rc / (p + rc) if p + rc else 0.0
    macro = sum(scores.values()) / len(scores) if scores else 0.0
    return scores, macro


# -- PSDS, single class -----------------------------------------------------------

def _frac(x):
    return Fraction(x).limit_denominator(10**6)


def _union_cover(span, others):
    """Exact length of ``span`` covered by the union of ``others`` via an elementary-interval sweep."""
    cuts = sorted({span[0], span[1], *[x for o in others for x in o if span[0] <= x <= span[1]]})
    total = Fraction(0)
    for a, b in zip(cuts, cuts[1:]):
        mid = (a + b) / 2
        if any(o[0] <= mid <= o[1] for o in others):
            total += b - a
    return total


def brute_force_psds_single_class(gt, dets_per_threshold, total_seconds, rho_dtc=0.5, rho_gtc=0.5, e_max=100):
    """Exact rational PSDS for one class, one clip; no cross-triggers exist."""
    gt = [(_frac(a), _frac(b)) for a, b in gt]
    hours = Fraction(total_seconds) / 3600
    points = []
    for th in sorted(dets_per_threshold):
        dets = [(_frac(a), _frac(b)) for a, b in dets_per_threshold[th]]
        valid, fp = [], 0
        for d in dets:
            inter = _union_cover(d, gt)
            if inter >= Fraction(rho_dtc) * (d[1] - d[0]):
                valid.append(d)
            else:
                fp += 1
        hits = sum(1 for g in gt if _union_cover(g, valid) >= Fraction(rho_gtc) * (g[1] - g[0]))
        points.append((fp / hours, Fraction(hits, len(gt))))
    e_max = Fraction(e_max)
    lowest = min(x for x, _ in points)

    def tpr_at(e):
        return max(t for x, t in points if x <= e or x == lowest)

    xs = sorted({Fraction(0), e_max, *[x for x, _ in points if x < e_max]})
    area = sum(tpr_at(a) * (b - a) for a, b in zip(xs, xs[1:]))
    return float(area / e_max)
