"""Posteriorgram -> event list: threshold, median filter, run extraction."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import median_filter as _nd_median

from .data import EventAnnotation

MODEL_HOP_S = 4 * 255 / 16000


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    median_window_frames: int = 7
    frame_hop_s: float = MODEL_HOP_S
    # upsample posteriors 4x (nearest) and filter with 27 frames at the feature hop
    upsample_to_feature_rate: bool = False
    upsampled_window_frames: int = 27
    upsample_factor: int = 4
    # the last model frame ends 8.75 ms after a 10 s clip; offsets are clamped to the clip
    clip_duration_s: Optional[float] = 10.0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        for w in (self.median_window_frames, self.upsampled_window_frames):
            if w < 1 or w % 2 == 0:
                raise ValueError("median windows must be odd and >= 1")

    def with_threshold(self, threshold: float) -> "DecodeConfig":
        return replace(self, threshold=threshold)


def binarize(strong: np.ndarray, threshold: float) -> np.ndarray:
    """1 where ``p >= threshold`` (inclusive)."""
    return (np.asarray(strong) >= threshold).astype(np.uint8)


def median_filter(binary: np.ndarray, window: int) -> np.ndarray:
    """Sliding median along time (axis 0) per class, edges replicated."""
    binary = np.asarray(binary, dtype=np.uint8)
    if window == 1:
        return binary.copy()
    size = (window,) + (1,) * (binary.ndim - 1)
    return _nd_median(binary, size=size, mode="nearest")


def frames_to_events(binary: np.ndarray, frame_hop_s: float) -> list[EventAnnotation]:
    """Maximal runs of ones per class, sorted by (class, onset)."""
    binary = np.asarray(binary, dtype=np.int8)
    if binary.ndim == 1:
        binary = binary[:, None]
    events = []
    for c in range(binary.shape[1]):
        padded = np.concatenate(([0], binary[:, c], [0]))
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        for s, e in zip(starts, stops):
            events.append(EventAnnotation(s * frame_hop_s, e * frame_hop_s, c))
    return events


def rasterize(events, n_frames: int, n_classes: int, frame_hop_s: float) -> np.ndarray:
    """Frame ``t`` is active for an event iff its center ``(t + 0.5) * hop`` lies in [onset, offset)."""
    out = np.zeros((n_frames, n_classes), dtype=np.uint8)
    centers = (np.arange(n_frames) + 0.5) * frame_hop_s
    for ev in events:
        out[(centers >= ev.onset) & (centers < ev.offset), ev.class_id] = 1
    return out


def decode(strong: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> list[EventAnnotation]:
    strong = np.asarray(strong)
    if cfg.upsample_to_feature_rate:
        strong = np.repeat(strong, cfg.upsample_factor, axis=0)
        window, hop = cfg.upsampled_window_frames, cfg.frame_hop_s / cfg.upsample_factor
    else:
        window, hop = cfg.median_window_frames, cfg.frame_hop_s
    events = frames_to_events(median_filter(binarize(strong, cfg.threshold), window), hop)
    if cfg.clip_duration_s is None:
        return events
    end = cfg.clip_duration_s
    return [e if e.offset <= end else EventAnnotation(e.onset, end, e.class_id) for e in events if e.onset < end]
