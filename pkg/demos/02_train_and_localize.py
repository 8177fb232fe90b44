#!/usr/bin/env python3
"""Train ML-VAE on a small synthetic digit corpus and compare it with the baselines.

Runs in about a minute on one CPU. The full-size version of this experiment
(1000 training utterances, 50 epochs) is what the acceptance tests run.
"""

from mlvae import lattice, metrics, synthdata
from mlvae import training as tr

# 400 utterances of 3-7 "digits"; about one digit in five is mislabelled
cfg = synthdata.CorpusConfig(total=400, seed=1)
corpus = synthdata.gen_dataset(cfg)
train_u, valid_u, test_u = corpus["train"], corpus["valid"], corpus["test"]
print(f"train/valid/test = {len(train_u)}/{len(valid_u)}/{len(test_u)}, "
      f"mismatched digits {synthdata.mismatch_fraction(train_u):.3f}")

u = test_u[0]
print(f"\nexample {u.id}: labels {u.C.tolist()}, actually spoken {u.truth.pronounced.tolist()}, "
      f"{u.num_frames} frames of dimension {u.X.shape[1]}")

# flat start from a uniform alignment, three warmup epochs, then hard EM with
# a forced-alignment refresh every five epochs
res = tr.train(train_u, valid_u, tr.TrainConfig(epochs=15, seed=0))
for rec in res.history[::2]:
    v = rec["valid"]
    print(f"epoch {rec['epoch']:2d} {rec['phase']:6s} valid F1_ML {v['F1_ML']:.3f} "
          f"alignment IoU {v['fa_alignment_avg_iou']:.3f}")
print(f"best epoch {res.best_epoch}")

model = res.model
posts = model.posteriors(model.batch([x.X for x in test_u]))
predictions = {
    "ML-VAE": [lattice.decode_posteriors(p, x.C, model.inventory.prior).localization(x.C)
               for x, p in zip(test_u, posts)],
    "Two-Pass-FA": [lattice.two_pass_from_posteriors(p, x.C, model.inventory.prior) for x, p in zip(test_u, posts)],
    "FA": [lattice.fa_localize_posteriors(p, x.C, model.inventory.prior) for x, p in zip(test_u, posts)],
}
print("\ntest set")
for name, preds in predictions.items():
    agg = metrics.aggregate(metrics.evaluate({x.id: p for x, p in zip(test_u, preds)}, test_u))
    print(f"  {name:12s} PR_ML {agg['PR_ML']:.3f}  RE_ML {agg['RE_ML']:.3f}  F1_ML {agg['F1_ML']:.3f}")

# what the model says about the example utterance
loc = predictions["ML-VAE"][0]
truth_spans = u.truth.segments(u.num_frames)
print(f"\n{u.id}")
for seg, span, flag in zip(loc.segments, truth_spans, u.truth.mismatch):
    print(f"  label {seg.phoneme}: predicted {seg.start:3d}-{seg.end:3d} {'MISMATCH' if seg.mismatch else 'ok':8s}"
          f" truth {span[0]:3d}-{span[1]:3d} {'MISMATCH' if flag else 'ok'}")
