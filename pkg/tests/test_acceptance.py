"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed again in the terminal summary)
before asserting, so a failing criterion still reports its measured values.
The end-to-end criteria 7 and 8 train full models and take several minutes.
"""

import time

import numpy as np
import pytest

from conftest import record_criterion
from mlvae import lattice, metrics, probmath, synthdata
from mlvae import training as tr
from mlvae.core import LocalizationResult
from mlvae.models import autodiff as ad
from mlvae.models.nets import NetSpec
from mlvae.models.mlvae import (
    LossWeights, baseline_values, correctness_log_posterior_tensor, loss_boundary, loss_correct, loss_h,
    loss_phoneme, loss_recon,
)
from oracles import enumerate_best, finite_difference_check, mc_beta_kl, mc_gaussian_kl
from test_lattice import random_scores
from test_models import assignments, small_batch, small_model
from test_training import TINY, quick_cfg


def check(number, ok, detail):
    record_criterion(number, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 1-6: oracles that run in seconds

def test_c01_metrics_oracle():
    # truth segments of 10 frames; the two hits overlap 3 and 6 of them, the segments between absorb the offsets
    pron = np.arange(5)
    flags = np.array([True, False, True, True, False])
    truth = synthdata.Utterance("u", np.zeros((50, 1)), np.where(flags, pron + 1, pron),
                                synthdata.Truth(pron, np.array([0, 10, 20, 30, 40]), flags))
    pred = LocalizationResult(((0, True, 0, 3), (1, False, 3, 20), (2, True, 20, 26), (3, False, 26, 40),
                               (4, True, 40, 50)))
    c = metrics.score_localization(pred, truth)
    ious = sorted(metrics.iou((s.start, s.end), span) for s, span, f in
                  zip(pred.segments, truth.truth.segments(50), flags) if f and s.mismatch)
    pr, re = c.tp_ml / (c.tp + c.fp), c.tp_ml / (c.tp + c.fn)
    f1 = 2 * pr * re / (pr + re)
    ok = (ious == [0.3, 0.6] and (c.tp, c.fp, c.fn) == (2, 1, 1) and abs(c.tp_ml - 0.9) <= 1e-15
          and abs(c.pr_ml - 0.3) <= 1e-12 and abs(c.re_ml - 0.3) <= 1e-12 and abs(c.f1_ml - f1) <= 1e-12
          and abs(c.f1_ml - 0.3) <= 1e-12)
    check(1, ok, f"TP_ML={c.tp_ml!r} PR_ML={c.pr_ml:.12f} RE_ML={c.re_ml:.12f} F1_ML={c.f1_ml:.12f}")


def test_c02_fa_baseline_zero():
    corpus = synthdata.gen_dataset(synthdata.CorpusConfig(total=100, seed=3))
    utts = corpus["test"]
    assert any(u.truth.mismatch.any() for u in utts)
    model = tr.build_model(corpus["train"], TINY, seed=1)
    posts = model.posteriors(model.batch([u.X for u in utts]), with_correctness=False)
    preds = {u.id: lattice.fa_localize_posteriors(p, u.C, model.inventory.prior) for u, p in zip(utts, posts)}
    agg = metrics.aggregate(metrics.evaluate(preds, utts))
    ok = agg["PR_ML"] == agg["RE_ML"] == agg["F1_ML"] == 0.0
    check(2, ok, f"PR_ML={agg['PR_ML']} RE_ML={agg['RE_ML']} F1_ML={agg['F1_ML']} "
                 f"over {agg['tp'] + agg['fn']} true mismatches")


def test_c03_dp_optimality():
    rng = np.random.default_rng(2024)
    worst_joint = worst_fa = 0.0
    for _ in range(200):
        L = int(rng.integers(1, 5))
        T = int(rng.integers(L, 13))
        s = random_scores(rng, T, L)
        joint = lattice.best_path(lattice.build_sentence_fsa(range(L)), s)
        worst_joint = max(worst_joint, abs(joint.log_score - enumerate_best(s.emit, s.stay, s.advance, s.log_pi)[0]))
        fa = lattice.best_path(lattice.build_single_path_fsa(range(L)), s)
        ref = enumerate_best(s.emit, s.stay, s.advance, s.log_pi, allow_mismatch=False)[0]
        worst_fa = max(worst_fa, abs(fa.log_score - ref))
    check(3, worst_joint <= 1e-9 and worst_fa <= 1e-9,
          f"200 instances, max |best_path - brute force| = {worst_joint:.2e}, forced alignment {worst_fa:.2e}")


def test_c04_gradients():
    model = small_model()
    batch = small_batch(model)
    Y, B, Pi = assignments(batch, 3)
    gen = model.generator
    gmm = [gen.gmm_mean, gen.gmm_var_raw]
    w = LossWeights(0.01, 1.0, 0.5)
    checks = {
        "L_b": (lambda: loss_boundary(model, batch, B, 0.01), model.boundary.parameters()),
        "L_p": (lambda: loss_phoneme(model, batch, Y), model.phoneme.parameters()),
        # the variant net only receives the straight-through gradient, which
        # finite differences cannot see; it is excluded here and covered by unit tests
        "L_r": (lambda: loss_recon(model, batch, Y, B, Pi, np.random.default_rng(5), 1.0),
                gen.encoder.parameters() + gen.decoder.parameters() + gmm),
        "L_l": (lambda: loss_correct(model, batch, Y, B, Pi), gen.encoder.parameters() + gmm
                + gen.variant_net.parameters()),
        "L_h": (lambda: loss_h(model, batch, Y, B, Pi, np.random.default_rng(7), w),
                gen.encoder.parameters() + gen.decoder.parameters() + gmm),
        "reinforce_pathwise": (lambda: loss_h(model, batch, Y, None, Pi, np.random.default_rng(3), w),
                               gen.encoder.parameters() + gen.decoder.parameters() + gmm),
        "baseline_mse": (lambda: ((baseline_values(model, batch) - 1.5) ** 2).sum(), model.baseline.parameters()),
    }
    samples = np.random.default_rng(4).random((3, len(batch))) < 0.3
    cal = np.random.default_rng(5).normal(size=(3, len(batch)))

    def surrogate():
        l0, l1 = correctness_log_posterior_tensor(model, batch, Y)
        s = sum((ad.where(samples[i], l1, l0) * cal[i]).sum() for i in range(3))
        return s - (ad.exp(l0) * l0 + ad.exp(l1) * l1).sum()
    checks["reinforce_score"] = (surrogate, gen.encoder.parameters() + gmm + gen.variant_net.parameters())

    n_params = sum(m.num_parameters() for m in model.modules().values())
    errors = {name: finite_difference_check(fn, params, step=1e-5, max_entries=10_000)
              for name, (fn, params) in checks.items()}
    worst = max(errors.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    check(4, worst < 1e-4 and n_params <= 10_000, f"{n_params} parameters, max rel err {worst:.1e} ({detail})")


def test_c05_closed_forms_vs_monte_carlo():
    rng = np.random.default_rng(77)
    n = 1_000_000
    rel = []
    for mq, vq, mp, vp in [(0.5, 0.4, -0.3, 1.7), (2.0, 1.0, 0.0, 1.0), (-1.0, 0.2, -0.5, 0.3)]:
        exact = probmath.gaussian_kl(probmath.GaussianParams(np.array([mq]), np.array([vq])),
                                     probmath.GaussianParams(np.array([mp]), np.array([vp])))
        rel.append(abs(mc_gaussian_kl(mq, vq, mp, vp, n, rng) - exact) / exact)
    for a, b, a0, b0 in [(2.0, 2.0, 1.0, 1.0), (1.0, 1.0, 2.0, 2.0), (3.0, 5.0, 1.0, 11.0)]:
        exact = probmath.beta_kl(probmath.BetaParams(a, b), probmath.BetaParams(a0, b0))
        rel.append(abs(mc_beta_kl(a, b, a0, b0, n, rng) - exact) / exact)
    # E[ln] cases are chosen so that 1e-3 is at least three Monte Carlo standard errors; with a or b
    # below ~5 the variance of ln(eta) is too large for 10^6 samples to resolve 1e-3
    absdev, se = [], []
    for a, b in [(8.0, 8.0), (12.0, 12.0), (15.0, 9.0), (9.0, 15.0)]:
        e1, e2 = probmath.beta_expect_log(probmath.BetaParams(a, b))
        x = rng.beta(a, b, size=n)
        for v, e in ((np.log(x), e1), (np.log1p(-x), e2)):
            absdev.append(abs(v.mean() - e))
            se.append(v.std() / np.sqrt(n))
    ok = max(rel) < 0.01 and max(absdev) < 1e-3
    check(5, ok, f"max KL rel dev {max(rel):.4f} (<0.01), max E[ln] abs dev {max(absdev):.1e} (<1e-3, "
                 f"largest MC std err {max(se):.1e})")


def test_c06_baseline_reduces_variance():
    corpus = synthdata.gen_dataset(synthdata.CorpusConfig(total=40, d_min=3, d_max=6, seed=4))
    m = tr.build_model(corpus["train"], TINY, seed=0)
    cfg = quick_cfg(reinforce=tr.ReinforceConfig(baseline_lr=1e-2))
    train_u, held = corpus["train"], corpus["valid"]
    batches = []
    for i in range(0, len(train_u), 8):
        b = m.batch([u.X for u in train_u[i:i + 8]])
        batches.append((b, np.concatenate([a.Y for a in tr.e_step(m, train_u[i:i + 8], b)])))
    before = m.state_dict()
    tr.fit_baseline(m, batches, cfg, steps=600)
    frozen = all(np.array_equal(v, m.state_dict()[k]) for k, v in before.items() if not k.startswith("baseline"))
    hb = m.batch([u.X for u in held])
    Y = np.concatenate([a.Y for a in tr.e_step(m, held, hb)])
    _, rewards, _, _ = tr.sample_rewards(m, hb, Y, np.random.default_rng(5), 4, cfg.weights)
    with ad.no_grad():
        base = baseline_values(m, hb).data
    v_raw, v_cal = float(rewards.var()), float((rewards - base).var())
    check(6, frozen and v_cal <= v_raw, f"held-out Var[R]={v_raw:.3f}, Var[R - b]={v_cal:.3f}, model frozen={frozen}")


# ---------------------------------------------------------------------------
# 7-8: end-to-end training on the default synthetic corpus

def _two_pass_f1(model, utts):
    preds = {}
    for i in range(0, len(utts), 128):
        part = utts[i:i + 128]
        for u, p in zip(part, model.posteriors(model.batch([u.X for u in part]), with_correctness=False)):
            preds[u.id] = lattice.two_pass_from_posteriors(p, u.C, model.inventory.prior)
    return metrics.aggregate(metrics.evaluate(preds, utts))["F1_ML"]


@pytest.fixture(scope="module")
def default_corpus():
    return synthdata.gen_dataset(synthdata.CorpusConfig())


def test_c07_end_to_end_localization(default_corpus):
    train_u, valid_u, test_u = default_corpus["train"][:1000], default_corpus["valid"], default_corpus["test"]
    t0 = time.process_time()
    scores = {}
    for variant in ("ml-vae", "ml-vae-rl"):
        res = tr.train(train_u, valid_u, tr.TrainConfig(variant=variant, epochs=50, seed=0))
        scores[variant] = tr.evaluate_model(res.model, test_u)["F1_ML"]
        if variant == "ml-vae":
            scores["two-pass"] = _two_pass_f1(res.model, test_u)
    minutes = (time.process_time() - t0) / 60
    # two-pass recognises by greedy per-frame argmax, which favours a smoothing
    # context window; give it that recogniser as well so the comparison is not a straw man
    ctx = tr.ModelConfig(phoneme_net=NetSpec(context_window=5))
    res = tr.train(train_u, valid_u, tr.TrainConfig(epochs=50, seed=0), ctx)
    scores["two-pass-w5"] = _two_pass_f1(res.model, test_u)
    f1, rl, tp = scores["ml-vae"], scores["ml-vae-rl"], max(scores["two-pass"], scores["two-pass-w5"])
    ok = f1 >= 0.25 and f1 > tp and rl >= f1 - 0.02 and minutes <= 30
    check(7, ok, f"test F1_ML: ML-VAE {f1:.4f}, ML-VAE-RL {rl:.4f}, Two-Pass-FA {scores['two-pass']:.4f} "
                 f"(context-window recogniser {scores['two-pass-w5']:.4f}); {minutes:.1f} CPU-min for ML-VAE + RL")


def test_c08_alignment_on_clean_corpus():
    corpus = synthdata.gen_dataset(synthdata.CorpusConfig(mismatch_rate=0.0))
    res = tr.train(corpus["train"][:1000], corpus["valid"], tr.TrainConfig(epochs=50, seed=0))
    val = tr.evaluate_model(res.model, corpus["valid"])
    acc, iou = val["fa_boundary_accuracy"], val["fa_alignment_avg_iou"]
    check(8, acc >= 0.9 and iou >= 0.8, f"validation boundary accuracy (+-2) {acc:.4f}, alignment_avg_iou {iou:.4f}")


# ---------------------------------------------------------------------------
# 9-10: corpus statistics and determinism

def test_c09_dataset_statistics(default_corpus):
    from scipy import stats
    sizes = tuple(len(default_corpus[k]) for k in ("train", "valid", "test"))
    utts = [u for k in ("train", "valid", "test") for u in default_corpus[k]]
    frac = synthdata.mismatch_fraction(utts)
    counts = np.bincount([u.num_phonemes for u in utts], minlength=8)[3:8]
    p = stats.chisquare(counts).pvalue
    ok = sizes == (1800, 600, 600) and abs(frac - 0.201) <= 0.01 and p > 0.01
    check(9, ok, f"splits {sizes}, mismatched-digit fraction {frac:.4f}, digit counts {counts.tolist()} "
                 f"(chi2 p={p:.3f})")


def test_c10_determinism(tmp_path):
    cfg = synthdata.CorpusConfig(total=40, d_min=3, d_max=6, seed=11)
    for name in ("a", "b"):
        synthdata.write_corpus(tmp_path / name, synthdata.gen_dataset(cfg), cfg)
    same_data = synthdata.corpus_digest(tmp_path / "a") == synthdata.corpus_digest(tmp_path / "b")
    corpus = synthdata.read_corpus(tmp_path / "a")
    run = lambda out, **kw: tr.train(corpus["train"], corpus["valid"], quick_cfg(epochs=5), TINY, out_dir=out, **kw)
    run(tmp_path / "r1")
    run(tmp_path / "r2")
    files = ("metrics.jsonl", "last.ckpt", "model.ckpt")
    same_runs = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files)
    run(tmp_path / "cut", stop_after=3)
    tr.resume(tmp_path / "cut" / "last.ckpt", corpus["train"], corpus["valid"], out_dir=tmp_path / "cut")
    same_resume = all((tmp_path / "cut" / f).read_bytes() == (tmp_path / "r1" / f).read_bytes() for f in files)
    check(10, same_data and same_runs and same_resume,
          f"dataset digests equal={same_data}, repeated runs byte-identical={same_runs}, "
          f"resume from epoch 3 byte-identical={same_resume}")
