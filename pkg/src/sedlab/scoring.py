"""Decode posteriorgrams for a set of clips and score them."""
from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .data import EventAnnotation
from .decode import DecodeConfig, decode
from .metrics import CollarConfig, EvalReport, PsdsConfig, event_f1, psds


def decode_all(names: Sequence[str], strong: Sequence[np.ndarray], cfg: DecodeConfig) -> dict[str, list[EventAnnotation]]:
    return {name: decode(p, cfg) for name, p in zip(names, strong)}


def evaluate_posteriors(
    names: Sequence[str],
    strong: Sequence[np.ndarray],
    references: Mapping[str, Sequence[EventAnnotation]],
    durations: Mapping[str, float],
    decode_cfg: DecodeConfig = DecodeConfig(),
    collar: CollarConfig = CollarConfig(),
    psds_cfg: Optional[PsdsConfig] = PsdsConfig(),
    class_names: Optional[Sequence[str]] = None,
) -> tuple[EvalReport, dict[str, list[EventAnnotation]]]:
    """F1 at ``decode_cfg.threshold``; PSDS re-decodes the same posteriors at every operating point.

    Returns the report and the detections used for F1.
    """
    detections = decode_all(names, strong, decode_cfg)
    refs = {n: list(references.get(n, ())) for n in names}
    f1 = event_f1(refs, detections, collar)
    psds_result = None
    if psds_cfg is not None and any(refs.values()):
        per_threshold = {t: decode_all(names, strong, decode_cfg.with_threshold(t)) for t in psds_cfg.thresholds}
        psds_result = psds(refs, per_threshold, {n: durations[n] for n in names}, psds_cfg)
    return EvalReport(f1, psds_result, class_names), detections
