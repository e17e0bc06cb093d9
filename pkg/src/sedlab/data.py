"""Clips, labels, class vocabulary and the annotation interchange formats."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
CLIP_SAMPLES = int(SAMPLE_RATE * CLIP_SECONDS)

STRONG_HEADER = "filename\tonset\toffset\tevent_label"
WEAK_HEADER = "filename\tevent_labels"


class AnnotationParseError(ValueError):
    """Raised for a malformed row in an annotation file."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise ValueError("vocabulary needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    @classmethod
    def default(cls, n_classes: int = 10) -> "ClassVocabulary":
        return cls(tuple(f"class_{i}" for i in range(n_classes)))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class label {name!r}") from None


@dataclass(frozen=True, order=True)
class EventAnnotation:
    onset: float
    offset: float
    class_id: int

    def __post_init__(self):
        if not (self.onset >= 0 and self.onset < self.offset):
            raise ValueError(f"invalid event span [{self.onset}, {self.offset})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class Strong:
    events: tuple[EventAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: (e.onset, e.class_id, e.offset))))

    def to_weak(self) -> "Weak":
        return Weak(frozenset(e.class_id for e in self.events))


@dataclass(frozen=True)
class Weak:
    tags: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))


@dataclass(frozen=True)
class Unlabeled:
    pass


Labels = Union[Strong, Weak, Unlabeled]


@dataclass(frozen=True, eq=False)
class AudioClip:
    name: str
    samples: np.ndarray
    labels: Labels = field(default_factory=Unlabeled)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("only mono audio is supported")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"clip {self.name!r} has non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if isinstance(self.labels, Strong):
            for ev in self.labels.events:
                if ev.offset > self.duration + 1e-9:
                    raise ValueError(f"event {ev} exceeds clip duration {self.duration}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_labels(self, labels: Labels) -> "AudioClip":
        return AudioClip(self.name, self.samples, labels, self.sample_rate)


def fit_to_clip(samples: np.ndarray, n_samples: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad ``samples`` to the fixed clip length; longer input is rejected."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) > n_samples:
        raise ValueError(f"audio longer than clip ({len(samples)} > {n_samples} samples)")
    out = np.zeros(n_samples)
    out[: len(samples)] = samples
    return out


@dataclass
class DatasetBundle:
    synthetic_strong: list[AudioClip] = field(default_factory=list)
    weak: list[AudioClip] = field(default_factory=list)
    unlabeled: list[AudioClip] = field(default_factory=list)
    xvalid: list[AudioClip] = field(default_factory=list)

    SUBSETS = ("synthetic_strong", "weak", "unlabeled", "xvalid")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = {"synthetic_strong": Strong, "weak": Weak, "unlabeled": Unlabeled, "xvalid": Strong}
        for subset, kind in expected.items():
            for clip in getattr(self, subset):
                if not isinstance(clip.labels, kind):
                    raise ValueError(f"{subset} clip {clip.name!r} carries {type(clip.labels).__name__} labels")

    def subset(self, name: str) -> list[AudioClip]:
        if name not in self.SUBSETS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass
class EventBank:
    """Isolated foreground events and background textures, all at 16 kHz."""

    foreground: list[tuple[int, np.ndarray]] = field(default_factory=list)
    background: list[np.ndarray] = field(default_factory=list)
    # stable identifiers of the foreground items, parallel to ``foreground``
    foreground_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.foreground_ids:
            self.foreground_ids = [f"fg{i:04d}" for i in range(len(self.foreground))]
        if len(self.foreground_ids) != len(self.foreground):
            raise ValueError("foreground_ids must parallel foreground")
        for class_id, wave in self.foreground:
            if len(wave) >= CLIP_SAMPLES:
                raise ValueError(f"foreground event of class {class_id} is not shorter than a clip")

    def class_ids(self) -> list[int]:
        return sorted({c for c, _ in self.foreground})

    def __len__(self) -> int:
        return len(self.foreground)


def split_event_bank(bank: EventBank, ratio: float, seed: int) -> tuple[EventBank, EventBank]:
    """Per-class random partition of the foreground items.

    The first bank receives ``ceil(ratio * n_c)`` items of every class ``c``
    (capped at ``n_c - 1`` so both sides see each class); backgrounds are shared.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, (c, _) in enumerate(bank.foreground):
        by_class.setdefault(c, []).append(i)
    first_idx, second_idx = [], []
    for c in sorted(by_class):
        idx = by_class[c]
        if len(idx) < 2:
            raise ValueError(f"class not splittable: class {c} has {len(idx)} item(s)")
        n_first = min(math.ceil(ratio * len(idx) - 1e-9), len(idx) - 1)
        perm = rng.permutation(len(idx))
        first_idx += sorted(idx[j] for j in perm[:n_first])
        second_idx += sorted(idx[j] for j in perm[n_first:])

    def take(indices):
        return EventBank(
            [bank.foreground[i] for i in indices],
            list(bank.background),
            [bank.foreground_ids[i] for i in indices],
        )

    return take(first_idx), take(second_idx)


# -- annotation interchange --------------------------------------------------

StrongTable = Mapping[str, Sequence[EventAnnotation]]


def _strong_items(clips) -> Iterable[tuple[str, Sequence[EventAnnotation]]]:
    if isinstance(clips, Mapping):
        return clips.items()
    items = []
    for clip in clips:
        if not isinstance(clip.labels, Strong):
            raise ValueError(f"clip {clip.name!r} does not carry strong labels")
        items.append((clip.name, clip.labels.events))
    return items


def write_strong_annotations(clips, vocab: ClassVocabulary, header: bool = True) -> str:
    """Render strong labels as tab-separated ``filename onset offset label`` rows.

    ``clips`` is a sequence of strongly-labeled :class:`AudioClip` or a mapping
    of filename to events.
    """
    lines = [STRONG_HEADER] if header else []
    for name, events in _strong_items(clips):
        for ev in sorted(events, key=lambda e: (e.onset, e.class_id)):
            lines.append(f"{name}\t{ev.onset:.3f}\t{ev.offset:.3f}\t{vocab.names[ev.class_id]}")
    return "\n".join(lines) + "\n"


def read_strong_annotations(text: str, vocab: ClassVocabulary) -> dict[str, list[EventAnnotation]]:
    out: dict[str, list[EventAnnotation]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line == STRONG_HEADER:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise AnnotationParseError(line_no, f"expected 4 tab-separated fields, got {len(parts)}")
        name, onset, offset, label = parts
        try:
            onset_f, offset_f = float(onset), float(offset)
        except ValueError:
            raise AnnotationParseError(line_no, "onset/offset are not numbers") from None
        try:
            class_id = vocab.index(label)
            ev = EventAnnotation(onset_f, offset_f, class_id)
        except (KeyError, ValueError) as err:
            raise AnnotationParseError(line_no, str(err)) from None
        out.setdefault(name, []).append(ev)
    return out


def write_weak_annotations(clips, vocab: ClassVocabulary, header: bool = True) -> str:
    lines = [WEAK_HEADER] if header else []
    items = clips.items() if isinstance(clips, Mapping) else [(c.name, _weak_tags(c)) for c in clips]
    for name, tags in items:
        if not tags:
            raise ValueError(f"weak clip with no tags: {name!r}")
        lines.append(f"{name}\t" + ",".join(vocab.names[c] for c in sorted(tags)))
    return "\n".join(lines) + "\n"


def _weak_tags(clip: AudioClip) -> frozenset[int]:
    if not isinstance(clip.labels, Weak):
        raise ValueError(f"clip {clip.name!r} does not carry weak labels")
    return clip.labels.tags


def read_weak_annotations(text: str, vocab: ClassVocabulary) -> dict[str, frozenset[int]]:
    out: dict[str, frozenset[int]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line == WEAK_HEADER:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1]:
            raise AnnotationParseError(line_no, "expected 'filename<TAB>label,label,...'")
        try:
            out[parts[0]] = frozenset(vocab.index(lbl) for lbl in parts[1].split(","))
        except KeyError as err:
            raise AnnotationParseError(line_no, str(err)) from None
    return out


# -- wav io -------------------------------------------------------------------

def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), sample_rate, pcm)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono audio is supported")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32767.0, sr
    return data.astype(np.float64), sr
