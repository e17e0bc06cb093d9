"""
An ablation grid through the harness
====================================

The same call the ``sedlab ablate`` command makes. Clip counts and epochs are
cut down so the four teacher-SNR cells finish in a few minutes; numbers at
this scale say little about the ablation directions.
"""

# %%
import tempfile
from pathlib import Path

from sedlab.harness import builtin_grids, cmd_ablate, load_config

cfg = load_config("desk", overrides={
    "data.n_synthetic": 32, "data.n_weak": 32, "data.n_unlabeled": 64, "data.n_xvalid": 16, "data.n_eval": 16,
    "data.items_per_class": 10, "train.epochs": 6, "train.batch_size": 12,
    "train.rampup_consistency_epochs": 2, "train.rampup_lr_epochs": 2,
})
for label, overrides in builtin_grids()["table4"].columns:
    print(label, dict(overrides))

# %%
out = Path(tempfile.mkdtemp(prefix="table4_"))
results = cmd_ablate(cfg, "table4", out)
print((out / "results.md").read_text())
