"""
From posteriors to events and scores
====================================

Threshold, median-filter and extract runs, then score with collar F1 and
the polyphonic detection score over 50 thresholds.
"""

# %%
import numpy as np

from sedlab.data import EventAnnotation
from sedlab.decode import MODEL_HOP_S, DecodeConfig, decode, rasterize
from sedlab.metrics import event_f1
from sedlab.scoring import evaluate_posteriors

refs = {"a.wav": [EventAnnotation(1.0, 3.5, 0), EventAnnotation(6.0, 6.8, 2)],
        "b.wav": [EventAnnotation(0.2, 9.0, 1)]}

# posteriors: the reference raster, blurred and noised
rng = np.random.default_rng(0)
posteriors = []
for name in refs:
    target = rasterize(refs[name], 157, 3, MODEL_HOP_S).astype(float)
    noisy = np.clip(0.8 * target + 0.15 + rng.normal(0, 0.15, target.shape), 0, 1)
    posteriors.append(noisy)

# %%
for window in (1, 7):
    dets = {n: decode(p, DecodeConfig(median_window_frames=window)) for n, p in zip(refs, posteriors)}
    print(f"median window {window}: {sum(map(len, dets.values()))} events, F1 {event_f1(refs, dets).macro_f1:.3f}")

# %%
report, _ = evaluate_posteriors(list(refs), posteriors, refs, {n: 10.0 for n in refs},
                                class_names=["speech", "dog", "cat"])
print(report.to_csv())
print(report.curve_csv().splitlines()[:4])
