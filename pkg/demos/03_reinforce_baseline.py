#!/usr/bin/env python3
"""Why ML-VAE-RL learns a baseline: variance of the REINFORCE reward.

The score-function gradient multiplies each sampled reward by the gradient of
ln q(pi). Subtracting a learned per-frame baseline b(x) leaves the expectation
unchanged but shrinks the spread of what gets multiplied.
"""

import numpy as np

from mlvae import synthdata
from mlvae import training as tr
from mlvae.models import autodiff as ad
from mlvae.models.mlvae import baseline_values

corpus = synthdata.gen_dataset(synthdata.CorpusConfig(total=120, seed=3))
train_u, held = corpus["train"], corpus["valid"]
model = tr.build_model(train_u, seed=0)
cfg = tr.TrainConfig(variant="ml-vae-rl", reinforce=tr.ReinforceConfig(baseline_lr=1e-2))

# E-step labels for every training batch; the rest of the model stays frozen
batches = []
for i in range(0, len(train_u), 16):
    b = model.batch([u.X for u in train_u[i:i + 16]])
    batches.append((b, np.concatenate([a.Y for a in tr.e_step(model, train_u[i:i + 16], b)])))

hb = model.batch([u.X for u in held])
Y = np.concatenate([a.Y for a in tr.e_step(model, held, hb)])
_, rewards, _, _ = tr.sample_rewards(model, hb, Y, np.random.default_rng(5), 4, cfg.weights)
print(f"held-out frames {rewards.shape[1]}, Monte-Carlo samples {rewards.shape[0]}")
print(f"raw reward: mean {rewards.mean():8.3f}  variance {rewards.var():8.3f}")

done = 0
for steps in (0, 100, 300, 600):
    if steps > done:
        tr.fit_baseline(model, batches, cfg, steps=steps - done)
        done = steps
    with ad.no_grad():
        b = baseline_values(model, hb).data
    print(f"after {steps:3d} baseline steps: variance of R - b(x) {np.var(rewards - b):8.3f}")
