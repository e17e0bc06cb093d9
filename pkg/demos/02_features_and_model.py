"""
Log-mel features and the gated CRNN
===================================

A 10 s clip becomes a 628 x 128 log-mel matrix; the CRNN pools time by 4
and returns frame posteriors (157 frames) plus attention-pooled clip tags.
"""

# %%
import numpy as np
import torch

from sedlab.features import FeatureStats, compute_log_mel, normalize
from sedlab.model import ModelConfig, forward, init_params
from sedlab.synth import SynthConfig, generate_soundscape, make_event_bank

rng = np.random.default_rng(0)
bank = make_event_bank(10, 4, rng)
clip = generate_soundscape(bank, SynthConfig(min_events_per_clip=1), rng)
feats = compute_log_mel(clip.samples)
print("features", feats.shape)

# %%
stats = FeatureStats.from_features([feats])
x = torch.as_tensor(normalize(feats, stats), dtype=torch.float32)

for name, cfg in [("desk", ModelConfig.desk()), ("full", ModelConfig())]:
    params = init_params(cfg, seed=0)
    n = sum(p.numel() for p in params.values())
    post = forward(x, params, cfg)
    print(f"{name}: {n} parameters, strong {tuple(post.strong.shape)}, weak {tuple(post.weak.shape)}")

# %%
# The clip-level score is a convex combination of frame scores, so it is
# bounded by their per-class min and max.
s, w = post.numpy()
print(np.all(w >= s.min(0) - 1e-6) and np.all(w <= s.max(0) + 1e-6))
