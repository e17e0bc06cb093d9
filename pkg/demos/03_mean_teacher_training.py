"""
Mean-teacher training on a small heterogeneous set
==================================================

Strong synthetic clips, weakly tagged clips and unlabeled clips share every
batch. The teacher is an EMA of the student and sees a noisier input.
Eight epochs take a couple of minutes on one CPU: enough to watch the
ramp-ups and the loss, not enough for x-valid F1 to leave zero.
"""

# %%
import numpy as np

from sedlab.data import DatasetBundle, Unlabeled
from sedlab.model import ModelConfig
from sedlab.synth import SynthConfig, generate_soundscape, make_event_bank
from sedlab.train import TrainConfig, Trainer, compose_batch, prepare_data

rng = np.random.default_rng(0)
bank = make_event_bank(10, 6, rng)
synth = SynthConfig(max_events_per_clip=3, min_events_per_clip=1)


def clips(prefix, n):
    return [generate_soundscape(bank, synth, rng, f"{prefix}{i}.wav") for i in range(n)]


strong = clips("s", 24)
weak = [c.with_labels(c.labels.to_weak()) for c in clips("w", 24)]
unlabeled = [c.with_labels(Unlabeled()) for c in clips("u", 24)]
bundle = DatasetBundle(strong, weak, unlabeled, xvalid=clips("x", 8))

model_cfg = ModelConfig.desk()
data = prepare_data(bundle, model_cfg)

# %%
batch = compose_batch(data, ("1/4", "1/4", "1/2"), 12, np.random.default_rng(0))
print("strong/weak/unlabeled per batch:", batch.strong_mask.sum(), batch.weak_mask.sum(), batch.unlabeled_mask.sum())

# %%
cfg = TrainConfig(epochs=8, batch_size=12, rampup_consistency_epochs=3, rampup_lr_epochs=3, base_lr=3e-3)
trainer = Trainer(data, model_cfg, cfg)
result = trainer.run(on_epoch=lambda row: print(
    f"epoch {row['epoch']}: loss {row['loss_total']:.4f}  w {row['consistency_weight']:.3f}  "
    f"lr {row['lr']:.2e}  x-valid F1 {row['xvalid_f1']:.3f}"))
print("best epoch", result.best_epoch)
