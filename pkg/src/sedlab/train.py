"""Mean-teacher training: heterogeneous batches, losses, ramp-ups, EMA teacher."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import AudioClip, DatasetBundle, EventAnnotation
from .decode import DecodeConfig, rasterize
from .features import (
    FeatureConfig,
    FeatureStats,
    add_noise_at_snr,
    add_wave_noise_at_snr,
    compute_log_mel,
    normalize,
)
from .metrics import CollarConfig, PsdsConfig
from .model import (
    AdamState,
    ModelConfig,
    ParameterSet,
    Posteriorgram,
    adam_step,
    detach_params,
    forward,
    gradients,
    init_params,
)
from .scoring import evaluate_posteriors

log = logging.getLogger(__name__)

TRAIN_SUBSETS = ("synthetic_strong", "weak", "unlabeled")
PROB_CLAMP = 1e-7
LOG_COLUMNS = (
    "epoch", "step", "loss_strong", "loss_weak", "loss_cons_strong", "loss_cons_weak", "loss_total",
    "consistency_weight", "lr", "xvalid_f1", "xvalid_psds",
)


class TrainingDiverged(RuntimeError):
    pass


def parse_ratio(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1000)
    return Fraction(str(value).strip())


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 24
    subset_ratios: tuple = ("1/3", "1/3", "1/3")  # synthetic_strong, weak, unlabeled
    ema_decay: float = 0.999
    consistency_max_weight: float = 2.0
    rampup_consistency: bool = True
    rampup_consistency_epochs: float = 50.0
    rampup_lr: bool = True
    rampup_lr_epochs: float = 50.0
    base_lr: float = 0.001
    teacher_snr_db: float = 30.0
    teacher_noise_domain: str = "features"  # or "waveform"
    seed: int = 0
    eval_psds_each_epoch: bool = False
    target_f1: Optional[float] = None  # stop once x-valid F1 reaches this value

    def __post_init__(self):
        self.subset_ratios = tuple(str(parse_ratio(r)) for r in self.subset_ratios)
        ratios = self.ratios
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) != 1:
            raise ValueError(f"subset_ratios must be three nonnegative fractions summing to 1, got {self.subset_ratios}")
        if self.consistency_max_weight < 0:
            raise ValueError("consistency_max_weight must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.teacher_noise_domain not in ("features", "waveform"):
            raise ValueError("teacher_noise_domain must be 'features' or 'waveform'")
        self.teacher_snr_db = float(self.teacher_snr_db)

    @property
    def ratios(self) -> tuple[Fraction, ...]:
        return tuple(parse_ratio(r) for r in self.subset_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subset_ratios"] = list(self.subset_ratios)
        return d


# -- prepared data --------------------------------------------------------------

@dataclass
class PreparedSubset:
    names: list[str]
    features: np.ndarray  # (N, T, F) raw log-mel, float32
    strong_targets: Optional[np.ndarray] = None  # (N, T', C)
    weak_targets: Optional[np.ndarray] = None  # (N, C)
    events: Optional[list[list[EventAnnotation]]] = None
    waves: Optional[list[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class TrainingData:
    subsets: dict[str, PreparedSubset]
    stats: FeatureStats
    n_classes: int
    n_out_frames: int
    out_hop_s: float
    durations: dict[str, float] = field(default_factory=dict)

    def subset(self, name: str) -> PreparedSubset:
        return self.subsets[name]


def _features_for(clips: Sequence[AudioClip], feature_cfg: FeatureConfig, cache: Optional[dict]) -> np.ndarray:
    out = []
    for clip in clips:
        if cache is not None and clip.name in cache:
            out.append(cache[clip.name])
        else:
            out.append(compute_log_mel(clip.samples, feature_cfg).astype(np.float32))
    if not out:
        return np.zeros((0, 0, feature_cfg.n_mels), dtype=np.float32)
    return np.stack(out)


def prepare_data(bundle: DatasetBundle, model_cfg: ModelConfig, feature_cfg: FeatureConfig = FeatureConfig(),
                 keep_waves: bool = False, feature_cache: Optional[dict] = None) -> TrainingData:
    """Log-mel features, frame targets at the model rate, and training-set statistics."""
    subsets = {}
    n_out = None
    out_hop = feature_cfg.frame_hop_s * model_cfg.time_pooling
    durations = {}
    for name in DatasetBundle.SUBSETS:
        clips = bundle.subset(name)
        feats = _features_for(clips, feature_cfg, feature_cache)
        if len(clips):
            n_out = model_cfg.output_frames(feats.shape[1])
        sub = PreparedSubset([c.name for c in clips], feats)
        if name in ("synthetic_strong", "xvalid"):
            sub.events = [list(c.labels.events) for c in clips]
            sub.strong_targets = np.stack(
                [rasterize(evs, n_out, model_cfg.n_classes, out_hop) for evs in sub.events]
            ) if clips else None
        if name == "weak":
            weak = np.zeros((len(clips), model_cfg.n_classes), dtype=np.float32)
            for i, c in enumerate(clips):
                weak[i, sorted(c.labels.tags)] = 1
            sub.weak_targets = weak
        if keep_waves:
            sub.waves = [c.samples for c in clips]
        for c in clips:
            durations[c.name] = c.duration
        subsets[name] = sub
    train_feats = [f for s in TRAIN_SUBSETS for f in subsets[s].features]
    if not train_feats:
        raise ValueError("no training clips")
    stats = FeatureStats.from_features(train_feats)
    return TrainingData(subsets, stats, model_cfg.n_classes, n_out, out_hop, durations)


# -- batches --------------------------------------------------------------------

def largest_remainder(ratios: Sequence[Fraction], total: int) -> list[int]:
    """Integer counts proportional to ``ratios`` summing to ``total``."""
    exact = [Fraction(r) * total for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class BatchSpec:
    features: np.ndarray  # (B, T, F) raw
    strong_mask: np.ndarray
    weak_mask: np.ndarray
    unlabeled_mask: np.ndarray
    strong_targets: np.ndarray  # (B, T', C)
    weak_targets: np.ndarray  # (B, C)
    sources: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.sources)


class _Cycler:
    """Without-replacement draws, reshuffled whenever the subset is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


class BatchComposer:
    def __init__(self, data: TrainingData, ratios: Sequence, batch_size: int, rng: np.random.Generator):
        self.data = data
        self.counts = largest_remainder([parse_ratio(r) for r in ratios], batch_size)
        self.cyclers = {}
        for subset, count, ratio in zip(TRAIN_SUBSETS, self.counts, ratios):
            n = len(data.subset(subset))
            if parse_ratio(ratio) > 0 and n == 0:
                raise ValueError(f"ratio > 0 for empty subset {subset!r}")
            if count > 0:
                self.cyclers[subset] = _Cycler(n, np.random.default_rng(rng.integers(2**63)))

    def steps_per_epoch(self) -> int:
        active = [s for s, c in zip(TRAIN_SUBSETS, self.counts) if c > 0]
        total = sum(len(self.data.subset(s)) for s in active)
        return max(1, math.ceil(total / sum(self.counts)))

    def next(self) -> BatchSpec:
        feats, sources = [], []
        c, t_out = self.data.n_classes, self.data.n_out_frames
        strong_t, weak_t, masks = [], [], []
        for subset, count in zip(TRAIN_SUBSETS, self.counts):
            if count == 0:
                continue
            sub = self.data.subset(subset)
            for i in self.cyclers[subset].take(count):
                feats.append(sub.features[i])
                sources.append((subset, i))
                strong_t.append(sub.strong_targets[i] if subset == "synthetic_strong" else np.zeros((t_out, c), np.uint8))
                weak_t.append(sub.weak_targets[i] if subset == "weak" else np.zeros(c, np.float32))
                masks.append(subset)
        masks = np.array(masks)
        return BatchSpec(
            np.stack(feats),
            masks == "synthetic_strong",
            masks == "weak",
            masks == "unlabeled",
            np.stack(strong_t).astype(np.float32),
            np.stack(weak_t).astype(np.float32),
            sources,
        )


def compose_batch(data: TrainingData, ratios: Sequence, batch_size: int, rng: np.random.Generator) -> BatchSpec:
    return BatchComposer(data, ratios, batch_size, rng).next()


# -- losses and schedules ---------------------------------------------------------

def rampup_weight(step: int, length: int, max_value: float) -> float:
    """``max_value * exp(-5 (1 - x)^2)`` with ``x = min(step / length, 1)``."""
    if length <= 0:
        return float(max_value)
    x = min(step / length, 1.0)
    return float(max_value * math.exp(-5.0 * (1.0 - x) ** 2))


def _bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def classification_terms(student: Posteriorgram, batch: BatchSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame-level BCE on strong samples, clip-level BCE on weak samples."""
    zero = student.strong.sum() * 0
    strong_mask = torch.as_tensor(batch.strong_mask)
    weak_mask = torch.as_tensor(batch.weak_mask)
    dtype = student.strong.dtype
    l_strong = zero
    if strong_mask.any():
        y = torch.as_tensor(batch.strong_targets[batch.strong_mask], dtype=dtype)
        l_strong = _bce(student.strong[strong_mask], y).mean()
    l_weak = zero
    if weak_mask.any():
        y = torch.as_tensor(batch.weak_targets[batch.weak_mask], dtype=dtype)
        l_weak = _bce(student.weak[weak_mask], y).mean()
    return l_strong, l_weak


def classification_loss(student: Posteriorgram, batch: BatchSpec) -> torch.Tensor:
    l_strong, l_weak = classification_terms(student, batch)
    return l_strong + l_weak


def consistency_terms(student: Posteriorgram, teacher: Posteriorgram) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame- and clip-level MSE over every sample; the teacher is a constant."""
    return (
        torch.mean((student.strong - teacher.strong.detach()) ** 2),
        torch.mean((student.weak - teacher.weak.detach()) ** 2),
    )


def consistency_loss(student: Posteriorgram, teacher: Posteriorgram) -> torch.Tensor:
    a, b = consistency_terms(student, teacher)
    return a + b


def ema_update(teacher: ParameterSet, student: ParameterSet, decay: float) -> ParameterSet:
    """``w_teacher <- decay * w_teacher + (1 - decay) * w_student``."""
    with torch.no_grad():
        return {k: decay * teacher[k] + (1.0 - decay) * student[k].detach() for k in teacher}


# -- trainer ----------------------------------------------------------------------

@dataclass
class LossTerms:
    strong: float
    weak: float
    cons_strong: float
    cons_weak: float
    weight: float
    lr: float

    @property
    def total(self) -> float:
        return self.strong + self.weak + self.weight * (self.cons_strong + self.cons_weak)


@dataclass
class TrainerState:
    student: ParameterSet
    teacher: ParameterSet
    optimizer: AdamState
    global_step: int = 0
    best_score: float = -1.0
    best_epoch: int = -1
    best_checkpoint: Optional[ParameterSet] = None


@dataclass
class TrainResult:
    best_params: ParameterSet
    best_epoch: int
    best_score: float
    log: list[dict]
    state: TrainerState
    stats: FeatureStats


def predict(features: np.ndarray, params: ParameterSet, model_cfg: ModelConfig, chunk: int = 16
            ) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode posteriors for already-normalized ``(N, T, F)`` features."""
    strong, weak = [], []
    with torch.no_grad():
        for i in range(0, len(features), chunk):
            post = forward(torch.as_tensor(features[i : i + chunk]), params, model_cfg, training=False)
            s, w = post.numpy()
            strong.append(s)
            weak.append(w)
    if not strong:
        return np.zeros((0,)), np.zeros((0,))
    return np.concatenate(strong), np.concatenate(weak)


class Trainer:
    def __init__(self, data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig,
                 feature_cfg: FeatureConfig = FeatureConfig(), decode_cfg: DecodeConfig = DecodeConfig(),
                 collar: CollarConfig = CollarConfig(), psds_cfg: PsdsConfig = PsdsConfig(),
                 dtype: torch.dtype = torch.float32):
        if model_cfg.n_classes != data.n_classes:
            raise ValueError("model and data disagree on the number of classes")
        if cfg.teacher_noise_domain == "waveform" and any(
            data.subset(s).waves is None for s in TRAIN_SUBSETS if len(data.subset(s))
        ):
            raise ValueError("waveform-domain teacher noise needs prepare_data(keep_waves=True)")
        self.data, self.model_cfg, self.cfg = data, model_cfg, cfg
        self.feature_cfg, self.decode_cfg, self.collar, self.psds_cfg = feature_cfg, decode_cfg, collar, psds_cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        init_seed = int(seeds[0].generate_state(1)[0])
        self.batch_rng = np.random.default_rng(seeds[1])
        self.noise_rng = np.random.default_rng(seeds[2])
        self.dropout_gen = torch.Generator().manual_seed(int(seeds[3].generate_state(1)[0]))
        self.composer = BatchComposer(data, cfg.ratios, cfg.batch_size, self.batch_rng)
        self.steps_per_epoch = self.composer.steps_per_epoch()
        self.cons_length = int(round(cfg.rampup_consistency_epochs * self.steps_per_epoch))
        self.lr_length = int(round(cfg.rampup_lr_epochs * self.steps_per_epoch))
        student = init_params(model_cfg, init_seed, dtype)
        self.state = TrainerState(
            student=detach_params(student, requires_grad=True),
            teacher=detach_params(student),
            optimizer=AdamState.zeros_like(student),
        )
        self.stats = data.stats

    def consistency_weight(self, step: int) -> float:
        if self.cfg.rampup_consistency:
            return rampup_weight(step, self.cons_length, self.cfg.consistency_max_weight)
        return float(self.cfg.consistency_max_weight)

    def learning_rate(self, step: int) -> float:
        if self.cfg.rampup_lr:
            return rampup_weight(step, self.lr_length, self.cfg.base_lr)
        return float(self.cfg.base_lr)

    def _teacher_input(self, batch: BatchSpec) -> np.ndarray:
        snr = self.cfg.teacher_snr_db
        if self.cfg.teacher_noise_domain == "waveform" and not math.isinf(snr):
            raw = np.stack([
                compute_log_mel(add_wave_noise_at_snr(self.data.subset(s).waves[i], snr, self.noise_rng),
                                self.feature_cfg).astype(np.float32)
                for s, i in batch.sources
            ])
        else:
            raw = np.stack([add_noise_at_snr(f, snr, self.noise_rng) for f in batch.features])
        return normalize(raw, self.stats).astype(np.float32)

    def step(self) -> LossTerms:
        st = self.state
        batch = self.composer.next()
        x_student = torch.as_tensor(normalize(batch.features, self.stats).astype(np.float32))
        x_teacher = torch.as_tensor(self._teacher_input(batch))
        student_post = forward(x_student, st.student, self.model_cfg, training=True, generator=self.dropout_gen)
        with torch.no_grad():
            teacher_post = forward(x_teacher, st.teacher, self.model_cfg, training=True, generator=self.dropout_gen)
        l_strong, l_weak = classification_terms(student_post, batch)
        c_strong, c_weak = consistency_terms(student_post, teacher_post)
        weight = self.consistency_weight(st.global_step)
        lr = self.learning_rate(st.global_step)
        total = l_strong + l_weak + weight * (c_strong + c_weak)
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {st.global_step}: strong={l_strong.item()} weak={l_weak.item()} "
                f"cons_strong={c_strong.item()} cons_weak={c_weak.item()} weight={weight}"
            )
        grads = gradients(total, st.student)
        st.student, st.optimizer = adam_step(st.student, grads, st.optimizer, lr)
        st.teacher = ema_update(st.teacher, st.student, self.cfg.ema_decay)
        st.global_step += 1
        return LossTerms(l_strong.item(), l_weak.item(), c_strong.item(), c_weak.item(), weight, lr)

    def evaluate_xvalid(self, params: Optional[ParameterSet] = None, with_psds: bool = False):
        sub = self.data.subset("xvalid")
        if len(sub) == 0:
            return None
        params = self.state.student if params is None else params
        strong, _ = predict(normalize(sub.features, self.stats).astype(np.float32), params, self.model_cfg)
        refs = dict(zip(sub.names, sub.events))
        report, _ = evaluate_posteriors(
            sub.names, list(strong), refs, self.data.durations, self.decode_cfg, self.collar,
            self.psds_cfg if with_psds else None,
        )
        return report

    def run(self, log_path: Optional[Path] = None,
            on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
        cfg, st = self.cfg, self.state
        rows: list[dict] = []
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
        try:
            for epoch in range(cfg.epochs):
                terms = [self.step() for _ in range(self.steps_per_epoch)]
                report = self.evaluate_xvalid(with_psds=cfg.eval_psds_each_epoch)
                score = report.f1.macro_f1 if report is not None else -float(np.mean([t.total for t in terms]))
                if score > st.best_score:
                    st.best_score, st.best_epoch = score, epoch
                    st.best_checkpoint = detach_params(st.student)
                row = {
                    "epoch": epoch,
                    "step": st.global_step,
                    "loss_strong": np.mean([t.strong for t in terms]),
                    "loss_weak": np.mean([t.weak for t in terms]),
                    "loss_cons_strong": np.mean([t.cons_strong for t in terms]),
                    "loss_cons_weak": np.mean([t.cons_weak for t in terms]),
                    "loss_total": np.mean([t.total for t in terms]),
                    "consistency_weight": terms[-1].weight,
                    "lr": terms[-1].lr,
                    "xvalid_f1": report.f1.macro_f1 if report is not None else "",
                    "xvalid_psds": report.psds.value if report is not None and report.psds is not None else "",
                }
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                log.info("epoch %d loss %.4f xvalid F1 %s", epoch, row["loss_total"], row["xvalid_f1"])
                if on_epoch is not None:
                    on_epoch(row)
                if cfg.target_f1 is not None and report is not None and report.f1.macro_f1 >= cfg.target_f1:
                    break
        finally:
            if fh is not None:
                fh.close()
        return TrainResult(st.best_checkpoint, st.best_epoch, st.best_score, rows, st, self.stats)


def train(data: TrainingData | DatasetBundle, model_cfg: ModelConfig, cfg: TrainConfig,
          feature_cfg: FeatureConfig = FeatureConfig(), decode_cfg: DecodeConfig = DecodeConfig(),
          collar: CollarConfig = CollarConfig(), log_path: Optional[Path] = None) -> TrainResult:
    """Train a student/teacher pair and return the best-on-x-valid student."""
    if isinstance(data, DatasetBundle):
        data = prepare_data(data, model_cfg, feature_cfg, keep_waves=cfg.teacher_noise_domain == "waveform")
    return Trainer(data, model_cfg, cfg, feature_cfg, decode_cfg, collar).run(log_path)
