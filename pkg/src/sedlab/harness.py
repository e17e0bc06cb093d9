"""Experiment orchestration: config schema, dataset generation, train/evaluate runs, ablation grids."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .data import (
    AudioClip,
    ClassVocabulary,
    DatasetBundle,
    EventAnnotation,
    Strong,
    Unlabeled,
    Weak,
    read_strong_annotations,
    read_wav,
    read_weak_annotations,
    split_event_bank,
    write_strong_annotations,
    write_wav,
    write_weak_annotations,
)
from .decode import DecodeConfig
from .features import FeatureConfig, FeatureStats, compute_log_mel, normalize
from .metrics import CollarConfig, EvalReport, PsdsConfig
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .scoring import evaluate_posteriors
from .synth import SynthConfig, make_event_bank, render_soundscape
from .train import TrainConfig, Trainer, TrainingData, prepare_data, predict

log = logging.getLogger(__name__)

SUBSET_DIRS = ("synthetic_strong", "weak", "unlabeled", "xvalid", "eval")


# -- config schema ------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 10
    items_per_class: int = 20
    bank_split: float = 0.9
    n_synthetic: int = 200
    n_weak: int = 200
    n_unlabeled: int = 400
    n_xvalid: int = 40
    n_eval: int = 40
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_synthetic, self.n_weak, self.n_unlabeled, self.n_xvalid, self.n_eval)
        if min(counts) < 0 or self.n_classes < 1 or self.items_per_class < 2:
            raise ValueError("clip counts must be >= 0, n_classes >= 1, items_per_class >= 2")


def _plain(obj: Any) -> Any:
    """Dataclass/tuple tree -> YAML-friendly dicts and lists."""
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(cls, d: Mapping, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown keys under {where!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on; the YAML document mirrors this tree."""

    synth_train: SynthConfig
    synth_xvalid: SynthConfig
    synth_recorded: SynthConfig  # weak, unlabeled and evaluation clips
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    collar: CollarConfig
    psds: PsdsConfig
    out: str = "runs"

    def to_dict(self) -> dict:
        return {
            "synth": {
                "train": _plain(self.synth_train),
                "xvalid": _plain(self.synth_xvalid),
                "recorded": _plain(self.synth_recorded),
            },
            "data": _plain(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "decode": _plain(self.decode),
            "eval": {"collar": _plain(self.collar), "psds": _plain(self.psds)},
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        unknown = set(d) - {"synth", "data", "model", "train", "decode", "eval", "out"}
        if unknown:
            raise KeyError(f"unknown top-level keys: {sorted(unknown)}")
        synth = d.get("synth", {})
        ev = d.get("eval", {})
        return cls(
            synth_train=_build(SynthConfig, synth.get("train", {}), "synth.train"),
            synth_xvalid=_build(SynthConfig, synth.get("xvalid", {}), "synth.xvalid"),
            synth_recorded=_build(SynthConfig, synth.get("recorded", {}), "synth.recorded"),
            data=_build(DataConfig, d.get("data", {}), "data"),
            model=_build(ModelConfig, d.get("model", {}), "model"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
            decode=_build(DecodeConfig, d.get("decode", {}), "decode"),
            collar=_build(CollarConfig, ev.get("collar", {}), "eval.collar"),
            psds=_build(PsdsConfig, ev.get("psds", {}), "eval.psds"),
            out=str(d.get("out", "runs")),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary.default(self.data.n_classes)

    def dataset_dict(self) -> dict:
        d = self.to_dict()
        return {"synth": d["synth"], "data": d["data"]}

    def dataset_hash(self) -> str:
        return content_hash(canonical_json(self.dataset_dict()))

    def run_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return content_hash(canonical_json(d))


def desk_profile() -> dict:
    """Laptop-scale defaults: 200/200/400 training clips, reduced CRNN, 30 epochs."""
    cfg = ExperimentConfig(
        synth_train=SynthConfig(pitch_shift=True, seed=0),
        synth_xvalid=SynthConfig(pitch_shift=True, seed=1),
        synth_recorded=SynthConfig(seed=2),
        data=DataConfig(),
        model=ModelConfig.desk(),
        train=TrainConfig(epochs=30, rampup_consistency_epochs=8, rampup_lr_epochs=8),
        decode=DecodeConfig(),
        collar=CollarConfig(),
        psds=PsdsConfig(),
    )
    return cfg.to_dict()


def full_profile() -> dict:
    """Full-size CRNN and 200-epoch schedule on a larger synthetic corpus."""
    d = desk_profile()
    d["model"] = ModelConfig().to_dict()
    d["train"].update(epochs=200, rampup_consistency_epochs=50, rampup_lr_epochs=50)
    d["data"].update(items_per_class=100, n_synthetic=2000, n_weak=1500, n_unlabeled=14000, n_xvalid=200,
                     n_eval=1000)
    return d


PROFILES = {"desk": desk_profile, "full": full_profile}


def parse_value(text: str) -> Any:
    """``--set`` values are YAML scalars or lists; ``inf`` and ``∞`` mean +infinity."""
    stripped = text.strip()
    if stripped.lower() in ("inf", "+inf", "infinity", "∞"):
        return math.inf
    if stripped.lower() in ("-inf", "-infinity", "-∞"):
        return -math.inf
    return yaml.safe_load(stripped)


def set_path(tree: dict, path: str, value: Any) -> None:
    """Assign ``value`` at dotted ``path``; the path must already exist in ``tree``."""
    keys = path.split(".")
    node = tree
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node, dict) or key not in node:
            raise KeyError(f"unknown config path {'.'.join(keys[: i + 1])!r}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise KeyError(f"unknown config path {path!r}")
    node[keys[-1]] = value


def load_config(profile: str = "desk", config_path: Optional[str | Path] = None,
                overrides: Sequence[str] | Mapping[str, Any] = (), seed: Optional[int] = None,
                out: Optional[str | Path] = None) -> ExperimentConfig:
    """Profile defaults <- YAML file <- ``--set`` overrides <- ``--seed`` / ``--out``."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    tree = PROFILES[profile]()
    if config_path is not None:
        doc = yaml.safe_load(Path(config_path).read_text()) or {}
        for path, value in _flatten(doc):
            set_path(tree, path, value)
    items = overrides.items() if isinstance(overrides, Mapping) else [_split_override(o) for o in overrides]
    for path, value in items:
        set_path(tree, path, value)
    if seed is not None:
        tree["data"]["seed"] = int(seed)
        tree["train"]["seed"] = int(seed)
    if out is not None:
        tree["out"] = str(out)
    return ExperimentConfig.from_dict(tree)


def _split_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ValueError(f"override must look like path=value, got {text!r}")
    path, value = text.split("=", 1)
    return path.strip(), parse_value(value)


def _flatten(doc: Mapping, prefix: str = "") -> Iterable[tuple[str, Any]]:
    # leaves only: nested sections are merged key by key onto the profile
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            yield from _flatten(value, path + ".")
        else:
            yield path, value


def canonical_json(obj: Any) -> bytes:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":")).encode()


def content_hash(data: bytes) -> str:
    """Git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# -- datasets on disk -----------------------------------------------------------------

def _clip_rng(cfg: ExperimentConfig, synth: SynthConfig, subset: str, index: int) -> np.random.Generator:
    # one independent stream per clip: counts of one subset never shift another's clips
    return np.random.default_rng([cfg.data.seed, synth.seed, SUBSET_DIRS.index(subset), index])


def generate_dataset(cfg: ExperimentConfig) -> tuple[DatasetBundle, list[AudioClip], dict]:
    """All five subsets in memory plus the manifest describing them."""
    d = cfg.data
    bank = make_event_bank(d.n_classes, d.items_per_class, np.random.default_rng([d.seed, 1000]))
    train_bank, xvalid_bank = split_event_bank(bank, d.bank_split, seed=d.seed)
    weak_cfg = replace(cfg.synth_recorded, min_events_per_clip=max(1, cfg.synth_recorded.min_events_per_clip),
                       max_events_per_clip=max(1, cfg.synth_recorded.max_events_per_clip))
    plan = [
        ("synthetic_strong", d.n_synthetic, train_bank, cfg.synth_train),
        ("weak", d.n_weak, train_bank, weak_cfg),
        ("unlabeled", d.n_unlabeled, train_bank, cfg.synth_recorded),
        ("xvalid", d.n_xvalid, xvalid_bank, cfg.synth_xvalid),
        ("eval", d.n_eval, xvalid_bank, cfg.synth_recorded),
    ]
    clips: dict[str, list[AudioClip]] = {}
    entries = []
    for subset, count, side, synth in plan:
        out = []
        for i in range(count):
            name = f"{subset}_{i:05d}.wav"
            parts = render_soundscape(side, synth, _clip_rng(cfg, synth, subset, i), name)
            clip = parts.clip
            strong = list(clip.labels.events)
            if subset == "weak":
                clip = clip.with_labels(clip.labels.to_weak())
            elif subset == "unlabeled":
                clip = clip.with_labels(Unlabeled())
            out.append(clip)
            entries.append({
                "name": name,
                "subset": subset,
                "bank_side": "train" if side is train_bank else "xvalid",
                "bank_ids": [e.bank_id for e in parts.events],
                "events": [[e.onset, e.offset, e.class_id] for e in strong],
                "seed": [d.seed, synth.seed, SUBSET_DIRS.index(subset), i],
            })
        clips[subset] = out
    bundle = DatasetBundle(clips["synthetic_strong"], clips["weak"], clips["unlabeled"], clips["xvalid"])
    manifest = {
        "dataset_hash": cfg.dataset_hash(),
        "seed": d.seed,
        "classes": list(cfg.vocabulary.names),
        "bank": {"train": train_bank.foreground_ids, "xvalid": xvalid_bank.foreground_ids},
        "counts": {s: len(c) for s, c in clips.items()},
        "clips": entries,
    }
    return bundle, clips["eval"], manifest


def cmd_synth(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None) -> Path:
    """Write WAVs, annotation tables, manifest and config snapshot; returns the dataset directory."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle, eval_clips, manifest = generate_dataset(cfg)
    vocab = cfg.vocabulary
    subsets = {s: bundle.subset(s) for s in DatasetBundle.SUBSETS}
    subsets["eval"] = eval_clips
    for subset, clips in subsets.items():
        (out / "audio" / subset).mkdir(parents=True, exist_ok=True)
        for clip in clips:
            write_wav(out / "audio" / subset / clip.name, clip.samples)
    for subset in ("synthetic_strong", "xvalid", "eval"):
        (out / f"{subset}.tsv").write_text(write_strong_annotations(subsets[subset], vocab))
    (out / "weak.tsv").write_text(write_weak_annotations(subsets["weak"], vocab))
    (out / "unlabeled.tsv").write_text("filename\n" + "".join(c.name + "\n" for c in subsets["unlabeled"]))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (out / "config.yaml").write_text(cfg.to_yaml())
    log.info("wrote dataset %s to %s", manifest["dataset_hash"][:10], out)
    return out


def load_dataset(path: str | Path) -> tuple[DatasetBundle, list[AudioClip], ClassVocabulary, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    vocab = ClassVocabulary(tuple(manifest["classes"]))
    strong = {s: read_strong_annotations((path / f"{s}.tsv").read_text(), vocab)
              for s in ("synthetic_strong", "xvalid", "eval")}
    weak = read_weak_annotations((path / "weak.tsv").read_text(), vocab)
    clips: dict[str, list[AudioClip]] = {s: [] for s in SUBSET_DIRS}
    for entry in manifest["clips"]:
        subset, name = entry["subset"], entry["name"]
        samples, _ = read_wav(path / "audio" / subset / name)
        if subset == "weak":
            labels = Weak(weak[name])
        elif subset == "unlabeled":
            labels = Unlabeled()
        else:
            labels = Strong(tuple(strong[subset].get(name, ())))
        clips[subset].append(AudioClip(name, samples, labels))
    bundle = DatasetBundle(clips["synthetic_strong"], clips["weak"], clips["unlabeled"], clips["xvalid"])
    return bundle, clips["eval"], vocab, manifest


def ensure_dataset(cfg: ExperimentConfig, root: str | Path) -> Path:
    """Dataset directory keyed by the content hash of the synth and data sections."""
    path = Path(root) / cfg.dataset_hash()[:12]
    if not (path / "manifest.json").exists():
        cmd_synth(cfg, path)
    return path


# -- runs -------------------------------------------------------------------------------

def _write_run_header(cfg: ExperimentConfig, run_dir: Path, dataset: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_bytes = (dataset / "manifest.json").read_bytes()
    info = {
        "seed": cfg.train.seed,
        "data_seed": cfg.data.seed,
        "config_hash": cfg.run_hash(),
        "dataset_hash": content_hash(manifest_bytes),
        "input_hash": content_hash(cfg.run_hash().encode() + manifest_bytes),
        "dataset": str(dataset),
    }
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    (run_dir / "run.json").write_text(json.dumps(info, indent=1))
    return info


class _FeatureMemo:
    """Per-process cache of prepared features, keyed by dataset directory."""

    def __init__(self):
        self.items: dict[tuple[str, str], tuple[TrainingData, list[AudioClip], ClassVocabulary]] = {}

    def get(self, dataset: Path, model_cfg: ModelConfig, keep_waves: bool):
        key = (str(dataset.resolve()), canonical_json((model_cfg.time_pooling, model_cfg.n_classes, keep_waves)).decode())
        if key not in self.items:
            bundle, eval_clips, vocab, _ = load_dataset(dataset)
            self.items[key] = (prepare_data(bundle, model_cfg, keep_waves=keep_waves), eval_clips, vocab)
        return self.items[key]


FEATURES = _FeatureMemo()


def cmd_train(cfg: ExperimentConfig, dataset: Optional[str | Path] = None,
              out_dir: Optional[str | Path] = None) -> Path:
    """Train into ``out_dir``: ``model.ckpt`` (best x-valid epoch), ``train_log.csv``, ``run.json``.

    Raises :class:`sedlab.train.TrainingDiverged` on a non-finite loss.
    """
    run_dir = Path(out_dir if out_dir is not None else cfg.out)
    dataset = Path(dataset) if dataset is not None else cmd_synth(cfg, run_dir / "dataset")
    if cfg.model.n_classes != cfg.data.n_classes:
        raise ValueError("model.n_classes must equal data.n_classes")
    _write_run_header(cfg, run_dir, dataset)
    data, _, vocab = FEATURES.get(dataset, cfg.model, cfg.train.teacher_noise_domain == "waveform")
    trainer = Trainer(data, cfg.model, cfg.train, decode_cfg=cfg.decode, collar=cfg.collar, psds_cfg=cfg.psds)
    result = trainer.run(run_dir / "train_log.csv")
    meta = {
        "model": cfg.model.to_dict(),
        "stats": {"mean": result.stats.mean.tolist(), "std": result.stats.std.tolist()},
        "train": cfg.train.to_dict(),
        "classes": list(vocab.names),
        "best_epoch": result.best_epoch,
        "best_xvalid_f1": result.best_score,
    }
    save_checkpoint(run_dir / "model.ckpt", result.best_params, meta)
    return run_dir


def _detections_tsv(detections: Mapping[str, Sequence[EventAnnotation]], vocab: ClassVocabulary) -> str:
    return write_strong_annotations({n: list(e) for n, e in detections.items()}, vocab)


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | Path, dataset: str | Path, subset: str = "eval",
                 out_dir: Optional[str | Path] = None) -> EvalReport:
    """Score a checkpoint on a strongly labeled subset; writes report, PSDS curve and detections."""
    run_dir = Path(out_dir if out_dir is not None else cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    params, meta = load_checkpoint(checkpoint)
    model_cfg = ModelConfig.from_dict(meta["model"])
    stats = FeatureStats(np.asarray(meta["stats"]["mean"]), np.asarray(meta["stats"]["std"]))
    bundle, eval_clips, vocab, _ = load_dataset(dataset)
    clips = eval_clips if subset == "eval" else bundle.subset(subset)
    if clips and not isinstance(clips[0].labels, Strong):
        raise ValueError(f"subset {subset!r} has no strong labels to score against")
    feats = np.stack([compute_log_mel(c.samples, FeatureConfig()) for c in clips]).astype(np.float32)
    strong, _ = predict(normalize(feats, stats).astype(np.float32), params, model_cfg)
    names = [c.name for c in clips]
    refs = {c.name: list(c.labels.events) for c in clips}
    report, detections = evaluate_posteriors(
        names, list(strong), refs, {c.name: c.duration for c in clips}, cfg.decode, cfg.collar, cfg.psds,
        class_names=vocab.names,
    )
    (run_dir / f"report_{subset}.csv").write_text(report.to_csv())
    (run_dir / f"psds_curve_{subset}.csv").write_text(report.curve_csv())
    (run_dir / f"detections_{subset}.tsv").write_text(_detections_tsv(detections, vocab))
    metrics = {"subset": subset, "f1": report.f1.macro_f1,
               "psds": report.psds.value if report.psds is not None else None}
    (run_dir / f"metrics_{subset}.json").write_text(json.dumps(metrics, indent=1))
    return report


def run_cell(cfg: ExperimentConfig, run_dir: str | Path, dataset_root: Optional[str | Path] = None) -> dict:
    """Synthesize (or reuse), train and evaluate one configuration."""
    run_dir = Path(run_dir)
    dataset = ensure_dataset(cfg, dataset_root if dataset_root is not None else run_dir / "datasets")
    cmd_train(cfg, dataset, run_dir)
    report = cmd_evaluate(cfg, run_dir / "model.ckpt", dataset, "eval", run_dir)
    return {"f1": report.f1.macro_f1, "psds": report.psds.value if report.psds is not None else float("nan")}


# -- ablation grids ------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationGrid:
    name: str
    columns: tuple[tuple[str, tuple[tuple[str, Any], ...]], ...]  # (label, ((path, value), ...))

    @classmethod
    def explicit(cls, name: str, columns: Sequence[tuple[str, Mapping[str, Any]]]) -> "AblationGrid":
        return cls(name, tuple((label, tuple(over.items())) for label, over in columns))

    @classmethod
    def product(cls, name: str, axes: Mapping[str, Sequence[Any]]) -> "AblationGrid":
        cols = [((), {})]
        for path, values in axes.items():
            cols = [(lbl + (f"{path.split('.')[-1]}={v}",), {**over, path: v}) for lbl, over in cols for v in values]
        return cls.explicit(name, [(" ".join(lbl), over) for lbl, over in cols])

    @classmethod
    def from_dict(cls, d: Mapping) -> "AblationGrid":
        name = str(d.get("name", "grid"))
        if "axes" in d:
            return cls.product(name, d["axes"])
        return cls.explicit(name, [(str(c["label"]), c.get("set", {})) for c in d["columns"]])

    def validate(self, base: Mapping) -> None:
        for _, overrides in self.columns:
            tree = copy.deepcopy(dict(base))
            for path, value in overrides:
                set_path(tree, path, value)

    def configs(self, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
        base_tree = base.to_dict()
        self.validate(base_tree)
        out = []
        for label, overrides in self.columns:
            tree = copy.deepcopy(base_tree)
            for path, value in overrides:
                set_path(tree, path, value)
            out.append((label, ExperimentConfig.from_dict(tree)))
        return out


def _on_off(flag: bool) -> str:
    return "on" if flag else "off"


def builtin_grids() -> dict[str, AblationGrid]:
    ratios = [("1/3", "1/3", "1/3"), ("1", "0", "0"), ("1/4", "0", "3/4"), ("0", "1", "0"),
              ("0", "1/4", "3/4"), ("1/2", "1/2", "0")]
    table5 = [(False, False, 1.0), (False, False, 2.0), (True, False, 2.0), (False, True, 1.0),
              (False, True, 2.0), (True, True, 2.0)]
    pitch = [(False, False), (False, True), (True, True)]
    reverb = [(True, True), (False, True), (False, False)]
    table6 = [(True, True), (True, False), (False, True), (False, False)]
    return {
        "table1": AblationGrid.explicit("table1", [
            ("S:W:U=" + ":".join(r), {"train.subset_ratios": list(r)}) for r in ratios]),
        "table2": AblationGrid.explicit("table2", [
            (f"pitch train {_on_off(t)} / x-valid {_on_off(x)}",
             {"synth.train.pitch_shift": t, "synth.xvalid.pitch_shift": x}) for t, x in pitch]),
        "table3": AblationGrid.explicit("table3", [
            (f"reverb train {_on_off(t)} / x-valid {_on_off(x)}",
             {"synth.train.reverb": t, "synth.xvalid.reverb": x}) for t, x in reverb]),
        "table4": AblationGrid.explicit("table4", [
            (f"teacher SNR {'inf' if math.isinf(s) else int(s)}", {"train.teacher_snr_db": s})
            for s in (0.0, 15.0, 30.0, math.inf)]),
        "table5": AblationGrid.explicit("table5", [
            (f"ramp CC {_on_off(cc)} / LR {_on_off(lr)} / w {w:g}",
             {"train.rampup_consistency": cc, "train.rampup_lr": lr, "train.consistency_max_weight": w})
            for cc, lr, w in table5]),
        "table6": AblationGrid.explicit("table6", [
            (f"x-valid reverb {_on_off(r)} / pitch {_on_off(p)}",
             {"train.teacher_snr_db": math.inf, "synth.train.pitch_shift": False, "synth.train.reverb": False,
              "synth.xvalid.reverb": r, "synth.xvalid.pitch_shift": p}) for r, p in table6]),
    }


def resolve_grid(spec: str | Path | AblationGrid) -> AblationGrid:
    if isinstance(spec, AblationGrid):
        return spec
    grids = builtin_grids()
    if str(spec) in grids:
        return grids[str(spec)]
    path = Path(spec)
    if path.exists():
        return AblationGrid.from_dict(yaml.safe_load(path.read_text()))
    raise KeyError(f"unknown grid {spec!r}; built-in grids: {sorted(grids)}")


@dataclass
class CellResult:
    label: str
    status: str
    f1: float = float("nan")
    psds: float = float("nan")
    seconds: float = 0.0
    run_dir: str = ""


def _cell_dir_name(i: int, label: str) -> str:
    slug = "".join(ch if ch.isalnum() else "_" for ch in label).strip("_")
    return f"{i:02d}_{slug}"


def cmd_ablate(base: ExperimentConfig, grid: str | Path | AblationGrid,
               out_dir: Optional[str | Path] = None, only: Optional[Sequence[int]] = None) -> list[CellResult]:
    """Run every grid cell; a failing cell is recorded and the grid continues."""
    grid = resolve_grid(grid)
    out = Path(out_dir if out_dir is not None else base.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, (label, cfg) in enumerate(grid.configs(base)):
        if only is not None and i not in only:
            continue
        run_dir = out / "cells" / _cell_dir_name(i, label)
        t0 = time.perf_counter()
        try:
            metrics = run_cell(cfg, run_dir, out / "datasets")
            res = CellResult(label, "ok", metrics["f1"], metrics["psds"], run_dir=str(run_dir))
        except Exception as err:  # recorded per cell, grid keeps going
            log.error("cell %r failed: %s", label, err)
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "error.txt").write_text(traceback.format_exc())
            res = CellResult(label, f"failed: {type(err).__name__}: {err}", run_dir=str(run_dir))
        res.seconds = time.perf_counter() - t0
        results.append(res)
        log.info("cell %d %r: %s F1 %.4f PSDS %.4f", i, label, res.status, res.f1, res.psds)
    (out / "results.csv").write_text(results_csv(results))
    (out / "results.md").write_text(results_markdown(grid.name, results))
    return results


def results_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "status", "f1", "psds", "seconds", "run_dir"])
    for r in results:
        w.writerow([r.label, r.status, repr(r.f1), repr(r.psds), f"{r.seconds:.1f}", r.run_dir])
    return buf.getvalue()


def read_results_csv(text: str) -> list[CellResult]:
    rows = csv.DictReader(io.StringIO(text))
    return [CellResult(r["label"], r["status"], float(r["f1"]), float(r["psds"]), float(r["seconds"]), r["run_dir"])
            for r in rows]


def results_markdown(title: str, results: Sequence[CellResult]) -> str:
    """One column per configuration; rows F1-score and PSDS."""
    def fmt(r: CellResult, value: float, percent: bool) -> str:
        if r.status != "ok" or math.isnan(value):
            return "failed"
        return f"{100 * value:.2f}%" if percent else f"{value:.3f}"

    header = ["", *[r.label for r in results]]
    rows = [
        ["F1-score", *[fmt(r, r.f1, True) for r in results]],
        ["PSDS", *[fmt(r, r.psds, False) for r in results]],
    ]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return f"### {title}\n\n" + "\n".join([line(header), sep, *map(line, rows)]) + "\n"


def collect_results(run_dirs: Sequence[str | Path], subset: str = "eval") -> list[CellResult]:
    """Gather per-run metrics files into rows for :func:`results_markdown`."""
    out = []
    for d in map(Path, run_dirs):
        metrics_path = d / f"metrics_{subset}.json"
        if metrics_path.exists():
            m = json.loads(metrics_path.read_text())
            psds_value = m["psds"] if m["psds"] is not None else float("nan")
            out.append(CellResult(d.name, "ok", m["f1"], psds_value, run_dir=str(d)))
        else:
            out.append(CellResult(d.name, "missing metrics", run_dir=str(d)))
    return out
