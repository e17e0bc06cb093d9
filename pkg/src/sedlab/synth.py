"""Procedural event bank and strongly-labeled soundscape generation.

A desk-scale stand-in for Scaper + FSD50k/SINS: every class is a parametric
signal family, backgrounds are coloured noise, reverberation uses synthetic
exponentially-decaying RIRs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import signal

from .data import (
    CLIP_SAMPLES,
    SAMPLE_RATE,
    AudioClip,
    EventAnnotation,
    EventBank,
    Strong,
)

FADE_SECONDS = 0.010
MAX_PLACEMENT_RETRIES = 10


@dataclass
class SynthConfig:
    max_events_per_clip: int = 5
    event_snr_range_db: tuple[float, float] = (6.0, 30.0)
    pitch_shift: bool = False
    semitone_range: tuple[float, float] = (-3.0, 3.0)
    reverb: bool = False
    rt_decay_range_s: tuple[float, float] = (0.1, 0.4)
    background_level_db: float = -30.0
    min_events_per_clip: int = 0
    seed: int = 0

    def __post_init__(self):
        self.event_snr_range_db = tuple(float(v) for v in self.event_snr_range_db)
        self.semitone_range = tuple(float(v) for v in self.semitone_range)
        self.rt_decay_range_s = tuple(float(v) for v in self.rt_decay_range_s)
        lo, hi = self.event_snr_range_db
        if lo > hi:
            raise ValueError("event_snr_range_db must satisfy lo <= hi")
        s_lo, s_hi = self.semitone_range
        if not (-12 <= s_lo <= s_hi <= 12):
            raise ValueError("semitone_range must lie within [-12, 12]")
        r_lo, r_hi = self.rt_decay_range_s
        if not (0.05 <= r_lo <= r_hi <= 0.5):
            raise ValueError("rt_decay_range_s must lie within [0.05, 0.5]")
        if not 0 <= self.min_events_per_clip <= self.max_events_per_clip:
            raise ValueError("need 0 <= min_events_per_clip <= max_events_per_clip")


@dataclass(frozen=True, eq=False)
class RoomImpulseResponse:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or len(taps) == 0:
            raise ValueError("empty rir")
        if len(taps) > self.sample_rate // 2:
            raise ValueError("rir longer than 0.5 s")
        if not np.all(np.isfinite(taps)):
            raise ValueError("rir taps must be finite")
        object.__setattr__(self, "taps", taps)


# -- procedural events -------------------------------------------------------

def _fade(wave: np.ndarray, sample_rate: int) -> np.ndarray:
    n = min(int(round(FADE_SECONDS * sample_rate)), len(wave) // 2)
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
        wave[:n] *= ramp
        wave[-n:] *= ramp[::-1]
    return wave


def _tone(t, rng):
    return np.sin(2 * np.pi * rng.uniform(300, 600) * t)


def _harmonic_stack(t, rng):
    f0 = rng.uniform(150, 250)
    return sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 7))


def _chirp_up(t, rng):
    f0, f1 = rng.uniform(800, 1200), rng.uniform(2500, 3500)
    return signal.chirp(t, f0, t[-1] if t[-1] > 0 else 1.0, f1)


def _am_noise(t, rng):
    noise = rng.standard_normal(len(t))
    sos = signal.butter(4, [1000, 2000], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    band = signal.sosfilt(sos, noise)
    return band * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(4, 8) * t))


def _impulse_train(t, rng):
    rate = rng.uniform(8, 14)
    out = np.zeros(len(t))
    period = int(SAMPLE_RATE / rate)
    click = np.exp(-np.arange(200) / 30.0) * np.sin(2 * np.pi * 3000 * np.arange(200) / SAMPLE_RATE)
    for start in range(0, len(t), period):
        seg = out[start : start + len(click)]
        seg += click[: len(seg)]
    return out


def _fm_tone(t, rng):
    fc, depth, rate = rng.uniform(1500, 1800), rng.uniform(100, 200), rng.uniform(5, 7)
    return np.sin(2 * np.pi * fc * t + (depth / rate) * np.sin(2 * np.pi * rate * t))


def _chirp_down(t, rng):
    f0, f1 = rng.uniform(5000, 6000), rng.uniform(3500, 4200)
    return signal.chirp(t, f0, t[-1] if t[-1] > 0 else 1.0, f1)


def _highpass_noise(t, rng):
    sos = signal.butter(6, 5500, btype="highpass", fs=SAMPLE_RATE, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(len(t)))


def _square(t, rng):
    f0 = rng.uniform(60, 100)
    return sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 16, 2))


def _plucks(t, rng):
    f = rng.uniform(700, 900)
    period = rng.uniform(0.15, 0.25)
    phase = np.mod(t, period)
    return np.exp(-phase / 0.03) * np.sin(2 * np.pi * f * t) * np.sin(2 * np.pi * 1.5 * f * t)


EVENT_FAMILIES: tuple[Callable[[np.ndarray, np.random.Generator], np.ndarray], ...] = (
    _tone,
    _harmonic_stack,
    _chirp_up,
    _am_noise,
    _impulse_train,
    _fm_tone,
    _chirp_down,
    _highpass_noise,
    _square,
    _plucks,
)


def procedural_event(class_id: int, duration_s: float, rng: np.random.Generator,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """One isolated event of ``class_id``: faded, peak amplitude in (0, 1]."""
    if not 0 <= class_id < len(EVENT_FAMILIES):
        raise ValueError(f"unknown class_id {class_id} (have {len(EVENT_FAMILIES)} families)")
    if not 0.25 <= duration_s <= 8:
        raise ValueError("duration_s must lie in [0.25, 8]")
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    wave = np.asarray(EVENT_FAMILIES[class_id](t, rng), dtype=np.float64)
    wave = _fade(wave - wave.mean(), sample_rate)
    peak = np.max(np.abs(wave))
    return wave * (rng.uniform(0.5, 1.0) / peak)


def procedural_background(duration_s: float, rng: np.random.Generator, color: str = "pink",
                          sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Coloured noise texture with unit RMS (``pink`` = 1/f, ``brown`` = 1/f^2 power)."""
    n = int(round(duration_s * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    exponent = {"pink": 0.5, "brown": 1.0}[color]
    shaping = np.ones_like(freqs)
    shaping[1:] = 1.0 / np.maximum(freqs[1:], 20.0) ** exponent
    shaping[0] = 0.0
    wave = np.fft.irfft(spec * shaping, n)
    return wave / np.sqrt(np.mean(wave**2))


def make_event_bank(n_classes: int, items_per_class: int, rng: np.random.Generator,
                    n_backgrounds: int = 4, duration_range_s: tuple[float, float] = (0.5, 3.0),
                    background_seconds: float = 5.0) -> EventBank:
    foreground, ids = [], []
    for c in range(n_classes):
        for i in range(items_per_class):
            dur = rng.uniform(*duration_range_s)
            foreground.append((c, procedural_event(c, dur, rng)))
            ids.append(f"c{c:02d}_{i:03d}")
    colors = ("pink", "brown")
    background = [procedural_background(background_seconds, rng, colors[i % 2]) for i in range(n_backgrounds)]
    return EventBank(foreground, background, ids)


# -- transforms ---------------------------------------------------------------

def _stft(x, n_fft, hop, window):
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * window, axis=-1)


def _istft(spec, n_fft, hop, window, length):
    frames = np.fft.irfft(spec, n_fft, axis=-1) * window
    out = np.zeros(n_fft + hop * (len(frames) - 1))
    norm = np.zeros_like(out)
    for i, frame in enumerate(frames):
        out[i * hop : i * hop + n_fft] += frame
        norm[i * hop : i * hop + n_fft] += window**2
    out /= np.where(norm > 1e-8, norm, 1.0)
    return out[:length]


def time_stretch(wave: np.ndarray, rate: float, n_fft: int = 1024) -> np.ndarray:
    """Phase-vocoder time stretch; output has ``round(len / rate)`` samples."""
    hop = n_fft // 4
    window = signal.get_window("hann", n_fft)
    pad = n_fft // 2
    x = np.pad(wave, (pad, pad + n_fft))
    spec = _stft(x, n_fft, hop, window)
    steps = np.arange(0, len(spec) - 1, rate)
    omega = 2 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    phase = np.angle(spec[0])
    out = np.empty((len(steps), spec.shape[1]), dtype=complex)
    for k, step in enumerate(steps):
        i = int(step)
        frac = step - i
        mag = (1 - frac) * np.abs(spec[i]) + frac * np.abs(spec[i + 1])
        out[k] = mag * np.exp(1j * phase)
        dphi = np.angle(spec[i + 1]) - np.angle(spec[i]) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi
    n_out = int(round(len(wave) / rate))
    y = _istft(out, n_fft, hop, window, pad + n_out)
    return y[pad : pad + n_out]


def pitch_shift(wave: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by ``semitones`` keeping the duration (stretch then resample)."""
    if abs(semitones) > 12:
        raise ValueError("|semitones| must be <= 12")
    wave = np.asarray(wave, dtype=np.float64)
    if semitones == 0:
        return wave.copy()
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(wave, 1.0 / ratio)
    return signal.resample(stretched, len(wave))


def apply_rir(wave: np.ndarray, rir: RoomImpulseResponse | np.ndarray) -> np.ndarray:
    """Full linear convolution, ``len(wave) + len(rir) - 1`` samples."""
    taps = rir.taps if isinstance(rir, RoomImpulseResponse) else np.asarray(rir, dtype=np.float64)
    if len(taps) == 0:
        raise ValueError("empty rir")
    return signal.fftconvolve(np.asarray(wave, dtype=np.float64), taps, mode="full")


def generate_rir(rt_decay_s: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> RoomImpulseResponse:
    """White noise under an exponential envelope reaching -60 dB energy at ``rt_decay_s``."""
    if not 0.05 <= rt_decay_s <= 0.5:
        raise ValueError("rt_decay_s must lie in [0.05, 0.5]")
    n = int(math.ceil(rt_decay_s * sample_rate))
    n = min(n, sample_rate // 2)
    t = np.arange(n) / sample_rate
    tau = rt_decay_s / (3.0 * math.log(10.0))
    taps = rng.standard_normal(n) * np.exp(-t / tau)
    taps[0] = abs(taps[0])
    return RoomImpulseResponse(taps / np.sqrt(np.sum(taps**2)), sample_rate)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def mix_at_snr(foreground: np.ndarray, background_segment: np.ndarray, snr_db: float) -> np.ndarray:
    """Scale ``foreground`` so its RMS sits ``snr_db`` above the background's."""
    fg_rms, bg_rms = rms(foreground), rms(background_segment)
    if fg_rms == 0:
        raise ValueError("silent foreground")
    if bg_rms == 0:
        raise ValueError("background segment has zero RMS")
    return np.asarray(foreground) * (bg_rms * 10 ** (snr_db / 20.0) / fg_rms)


# -- soundscapes --------------------------------------------------------------

@dataclass
class PlacedEvent:
    class_id: int
    bank_id: str
    onset_sample: int
    dry_samples: int
    wet: np.ndarray  # scaled contribution starting at ``onset_sample``
    snr_db: float
    semitones: float = 0.0
    rt_decay_s: Optional[float] = None


@dataclass
class SoundscapeParts:
    clip: AudioClip
    background: np.ndarray  # after the final gain
    stems: list[np.ndarray]  # full-length per-event contributions after the final gain
    events: list[PlacedEvent] = field(default_factory=list)
    gain: float = 1.0


def tile_background(background: np.ndarray, n_samples: int = CLIP_SAMPLES) -> np.ndarray:
    reps = int(math.ceil(n_samples / len(background)))
    return np.tile(background, reps)[:n_samples]


def place_events(name: str, background: np.ndarray, events: list[PlacedEvent],
                 sample_rate: int = SAMPLE_RATE) -> SoundscapeParts:
    """Sum already-scaled events onto ``background``; annotations use dry supports."""
    n = len(background)
    stems = []
    mix = background.copy()
    for ev in events:
        stem = np.zeros(n)
        end = min(n, ev.onset_sample + len(ev.wet))
        stem[ev.onset_sample : end] = ev.wet[: end - ev.onset_sample]
        stems.append(stem)
        mix += stem
    peak = np.max(np.abs(mix)) if n else 0.0
    gain = 0.9 / peak if peak > 1.0 else 1.0
    annotations = [
        EventAnnotation(ev.onset_sample / sample_rate, (ev.onset_sample + ev.dry_samples) / sample_rate, ev.class_id)
        for ev in events
    ]
    clip = AudioClip(name, mix * gain, Strong(tuple(annotations)), sample_rate)
    return SoundscapeParts(clip, background * gain, [s * gain for s in stems], events, gain)


def render_soundscape(bank: EventBank, config: SynthConfig, rng: np.random.Generator,
                      name: str = "soundscape.wav") -> SoundscapeParts:
    """Generate one soundscape and keep its parts (background, per-event stems).

    Placement draws come from ``rng``; pitch/reverb draws come from a child
    stream so toggling a transform leaves the placement draws untouched.
    """
    if len(bank) == 0 or not bank.background:
        raise ValueError("event bank needs foreground and background items")
    transform_rng = np.random.default_rng(rng.integers(2**63))
    bg_idx = int(rng.integers(len(bank.background)))
    background = tile_background(bank.background[bg_idx])
    background = background / rms(background) * 10 ** (config.background_level_db / 20.0)

    k = int(rng.integers(config.min_events_per_clip, config.max_events_per_clip + 1))
    events: list[PlacedEvent] = []
    for _ in range(k):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            fg_idx = int(rng.integers(len(bank)))
            snr_db = float(rng.uniform(*config.event_snr_range_db))
            u_onset = float(rng.uniform())
            class_id, dry = bank.foreground[fg_idx]
            wet = np.asarray(dry, dtype=np.float64)
            semitones, rt = 0.0, None
            if config.pitch_shift:
                semitones = float(transform_rng.uniform(*config.semitone_range))
                wet = pitch_shift(wet, semitones)
            dry_len = len(wet)
            if config.reverb:
                rt = float(transform_rng.uniform(*config.rt_decay_range_s))
                wet = apply_rir(wet, generate_rir(rt, transform_rng))
            if len(wet) <= CLIP_SAMPLES:
                break
        else:
            raise RuntimeError("could not place an event inside the clip after bounded retries")
        onset = int(u_onset * (CLIP_SAMPLES - len(wet)))
        segment = background[onset : onset + len(wet)]
        wet = mix_at_snr(wet, segment, snr_db)
        events.append(PlacedEvent(class_id, bank.foreground_ids[fg_idx], onset, dry_len, wet, snr_db, semitones, rt))
    events.sort(key=lambda e: (e.onset_sample, e.class_id))
    return place_events(name, background, events)


def generate_soundscape(bank: EventBank, config: SynthConfig, rng: np.random.Generator,
                        name: str = "soundscape.wav") -> AudioClip:
    return render_soundscape(bank, config, rng, name).clip
