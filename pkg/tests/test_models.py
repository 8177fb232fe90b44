import math

import numpy as np
import pytest

from mlvae import probmath
from mlvae.core import PhonemeInventory, Priors
from mlvae.models import autodiff as ad
from mlvae.models.autodiff import Tensor
from mlvae.models.mlvae import (
    MLVAE, LossWeights, ModelConfig, baseline_values, beta_kl_tensor, component_index,
    correctness_log_posterior, correctness_posterior, joint_elbo, joint_elbo_tensor,
    loss_boundary, loss_boundary_terms, loss_correct, loss_h, loss_phoneme, loss_recon, phoneme_posterior,
    boundary_posterior,
)
from mlvae.models.nets import Adam, NetSpec, context_windows
from oracles import finite_difference_check

SMALL = ModelConfig(
    boundary_net=NetSpec(1, (6,)),
    phoneme_net=NetSpec(1, (6,)),
    encoder_net=NetSpec(0, (6,)),
    decoder_hidden=(6,),
    selector_hidden=(4,),
    variant_hidden=(5,),
    baseline_net=NetSpec(1, (4,)),
    latent_dim=2,
    n_variants=2,
)


def small_model(dtype=np.float64, seed=0, n=3, dim=3, gamma=0.3):
    return MLVAE(dim, PhonemeInventory.uniform(n), Priors(1.0, 4.0, gamma), SMALL, seed=seed, dtype=dtype)


def small_batch(model, seed=1, lengths=(5, 4)):
    rng = np.random.default_rng(seed)
    return model.batch([rng.normal(size=(T, model.feature_dim)) for T in lengths])


def assignments(batch, n, seed=2):
    rng = np.random.default_rng(seed)
    T = len(batch)
    Y = rng.integers(0, n, size=T)
    B = np.zeros(T, dtype=int)
    B[batch.offsets[:-1]] = 1
    Pi = rng.random(T) < 0.4
    return Y, B, Pi


class TestAutodiff:
    @pytest.mark.parametrize("fn", [
        lambda a, b: (a * b + a / (b * b + 1.0)).sum(),
        lambda a, b: ad.logsumexp(a @ b.T, axis=1).sum(),
        lambda a, b: (ad.tanh(a) * ad.sigmoid(b) + ad.softplus(a - b)).mean(),
        lambda a, b: ad.log_softmax(a, axis=-1)[np.arange(3), [0, 2, 1]].sum(),
        lambda a, b: (ad.digamma(ad.exp(a)) + ad.log_gamma(ad.exp(b))).sum(),
        lambda a, b: ad.concat([a, b ** 2], axis=1).sum(axis=0)[1] * 3.0,
        lambda a, b: ad.where(a.data > 0, a, b).sum() + ad.log_sigmoid(a).sum(),
    ])
    def test_gradients(self, fn):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert finite_difference_check(lambda: fn(a, b), [a, b]) < 1e-6

    def test_broadcast_reduces(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3, 3, 3, 3])

    def test_no_grad_builds_no_graph(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            out = a * 2.0
        assert out._backward is None


class TestNets:
    def test_context_windows(self):
        X = np.arange(6, dtype=float).reshape(3, 2)
        W = context_windows(X, 1)
        np.testing.assert_array_equal(W[0], [0, 1, 0, 1, 2, 3])
        np.testing.assert_array_equal(W[2], [2, 3, 4, 5, 4, 5])

    def test_netspec_validation(self):
        with pytest.raises(ValueError):
            NetSpec(-1)
        with pytest.raises(ValueError):
            NetSpec(1, (0,))
        with pytest.raises(ValueError):
            NetSpec(1, (4,), "swish")

    def test_adam_rejects_non_finite(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError):
            Adam([p]).step()

    def test_adam_clips(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p], lr=0.1, clip_norm=1.0)
        p.grad = np.array([300.0, 400.0])
        assert opt.step() == pytest.approx(500.0)
        np.testing.assert_allclose(p.data, [-0.1, -0.1], rtol=1e-6)


class TestBoundary:
    def test_posterior_mean(self):
        a, b = Tensor(np.array([1.0, 3.0])), Tensor(np.array([1.0, 1.0]))
        q = a.data / (a.data + b.data)
        np.testing.assert_allclose(q, [0.5, 0.75])

    def test_range_on_random_net(self):
        model = small_model()
        alpha, beta, q = boundary_posterior(model, small_batch(model))
        assert np.all((q > 0) & (q < 1)) and np.all(alpha > 0) and np.all(beta > 0)

    def test_loss_examples(self):
        one = Tensor(np.array([1.0]))
        assert loss_boundary_terms(one, one, [1], 1.0, 1.0, 0.01).item() == pytest.approx(1.0, abs=1e-12)
        two = Tensor(np.array([2.0]))
        assert loss_boundary_terms(two, one, [1], 1.0, 1.0, 0.0).item() == pytest.approx(0.5, abs=1e-12)

    def test_beta_kl_tensor_matches_probmath(self):
        a, b = Tensor(np.array([0.7, 3.0])), Tensor(np.array([2.5, 0.4]))
        got = beta_kl_tensor(a, b, 1.0, 4.0).data
        ref = [probmath.beta_kl(probmath.BetaParams(x, y), probmath.BetaParams(1.0, 4.0)) for x, y in zip(a.data, b.data)]
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_gradient(self):
        model = small_model()
        batch = small_batch(model)
        _, B, _ = assignments(batch, 3)
        err = finite_difference_check(lambda: loss_boundary(model, batch, B, 0.01), model.boundary.parameters())
        assert err < 1e-4

    def test_descent(self):
        model = small_model()
        batch = small_batch(model)
        _, B, _ = assignments(batch, 3)
        opt = Adam(model.boundary.parameters(), lr=1e-3)
        losses = []
        for _ in range(100):
            loss = loss_boundary(model, batch, B, 0.01)
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]


class TestPhoneme:
    def test_zero_head_is_uniform(self):
        model = small_model()
        q = phoneme_posterior(model, small_batch(model))
        np.testing.assert_allclose(q, 1 / 3, atol=1e-12)

    def test_rows_sum_to_one(self):
        model = small_model()
        rng = np.random.default_rng(3)
        model.phoneme.net.out.weight.data = rng.normal(size=model.phoneme.net.out.weight.data.shape)
        q = phoneme_posterior(model, small_batch(model))
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)

    def test_uniform_loss(self):
        model = MLVAE(3, PhonemeInventory.uniform(10), Priors(), SMALL, dtype=np.float64)
        batch = model.batch([np.zeros((1, 3))])
        assert loss_phoneme(model, batch, [4]).item() == pytest.approx(math.log(10), abs=1e-12)

    def test_gradient(self):
        model = small_model()
        rng = np.random.default_rng(4)
        model.phoneme.net.out.weight.data = rng.normal(size=model.phoneme.net.out.weight.data.shape)
        batch = small_batch(model)
        Y, _, _ = assignments(batch, 3)
        assert finite_difference_check(lambda: loss_phoneme(model, batch, Y), model.phoneme.parameters()) < 1e-4


class TestSelector:
    def test_index_examples(self):
        # 1-based layout: j=2, pi=0 -> 5 ; j=1, pi=1, k=2 -> 3 (with N_m = 3)
        assert component_index(1, 0, 0, 3) + 1 == 5
        assert component_index(0, 1, 2, 3) + 1 == 3
        with pytest.raises(ValueError):
            component_index(0, 1, 4, 3)

    def test_index_bijection(self):
        N, Nm = 5, 3
        seen = [component_index(j, 0, 0, Nm) for j in range(N)]
        seen += [component_index(j, 1, k, Nm) for j in range(N) for k in range(1, Nm + 1)]
        assert sorted(seen) == list(range(N * (Nm + 1)))

    def test_simplex_concentration(self):
        model = small_model()
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        w, s = model.generator.component_weights(batch, Y, B, Pi, np.random.default_rng(0))
        K = model.generator.n_components
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
        margin = math.e / (math.e + (K - 1) * math.exp(1e-6))
        assert np.all(w.data[np.arange(len(Y)), s] >= margin - 1e-9)
        assert np.all(s // (SMALL.n_variants + 1) == Y)
        assert np.all((s % (SMALL.n_variants + 1) == 0) == ~Pi)

    def test_out_of_range_phoneme(self):
        model = small_model()
        batch = small_batch(model, lengths=(2,))
        with pytest.raises(ValueError):
            model.generator.component_weights(batch, [0, 3], [1, 0], [0, 0], np.random.default_rng(0))


class TestRecon:
    def test_gradient(self):
        model = small_model()
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        gen = model.generator
        params = gen.encoder.parameters() + gen.decoder.parameters() + [gen.gmm_mean, gen.gmm_var_raw]
        err = finite_difference_check(
            lambda: loss_recon(model, batch, Y, B, Pi, np.random.default_rng(5), 1.0), params)
        assert err < 1e-4

    def test_variant_net_gets_straight_through_gradient(self):
        # the forward value uses the hard variant, so finite differences see a flat
        # loss; the relaxed sample still routes a gradient to the variant net
        model = small_model()
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        loss_recon(model, batch, Y, B, np.ones_like(Pi), np.random.default_rng(5), 1.0).backward()
        grads = [p.grad for p in model.generator.variant_net.parameters()]
        assert any(g is not None and np.abs(g).sum() > 0 for g in grads)

    def test_perfect_decoder_floor(self):
        model = small_model()
        gen = model.generator
        batch = model.batch([np.zeros((2, 3))])
        for p in gen.decoder.parameters():
            p.data[:] = 0.0
        gen.decoder.out.bias.data[3:] = probmath.softplus(-0.0) * 0 + math.log(math.expm1(1 - probmath.VAR_FLOOR))
        loss = loss_recon(model, batch, [0, 0], [1, 0], [0, 0], np.random.default_rng(0), 0.0).item()
        assert loss == pytest.approx(2 * 3 * 0.5 * math.log(2 * math.pi), abs=1e-9)

    def test_kl_zero_when_matching_component(self):
        model = small_model()
        gen = model.generator
        batch = model.batch([np.zeros((1, 3))])
        mq, vq = gen.encode(batch)
        gen.gmm_mean.data[0] = mq.data[0]
        gen.gmm_var_raw.data[0] = np.log(np.expm1(vq.data[0] - probmath.VAR_FLOOR))
        with_kl = loss_recon(model, batch, [0], [1], [0], np.random.default_rng(0), 5.0).item()
        without = loss_recon(model, batch, [0], [1], [0], np.random.default_rng(0), 0.0).item()
        assert with_kl == pytest.approx(without, abs=1e-9)


class TestCorrectness:
    def _pin_encoder(self, model, mean, var):
        out = model.generator.encoder.out
        out.weight.data[:] = 0.0
        out.bias.data[:2] = mean
        out.bias.data[2:] = np.log(np.expm1(var - probmath.VAR_FLOOR))

    def test_far_mismatch_components(self):
        model = small_model(gamma=0.5)
        self._pin_encoder(model, [0.3, -0.2], 0.1)
        gen = model.generator
        gen.gmm_mean.data[0] = [0.3, -0.2]
        gen.gmm_mean.data[1:3] = [[20.0, 20.0], [-20.0, 20.0]]
        batch = small_batch(model, lengths=(3,))
        q1 = correctness_posterior(model, batch, np.zeros(3, dtype=int))
        assert np.all(q1 < 1e-6)

    def test_identical_components_give_prior(self):
        model = small_model(gamma=0.3)
        gen = model.generator
        gen.gmm_mean.data[:] = 0.7
        batch = small_batch(model)
        Y, _, _ = assignments(batch, 3)
        np.testing.assert_allclose(correctness_posterior(model, batch, Y), 0.3, atol=1e-9)

    def test_normalised(self):
        model = small_model()
        batch = small_batch(model)
        Y, _, _ = assignments(batch, 3)
        lp = correctness_log_posterior(model, batch, Y)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        # a common factor on every component density (here a shared mean shift of
        # encoder and GMM) leaves the posterior unchanged
        model = small_model()
        batch = small_batch(model)
        Y, _, _ = assignments(batch, 3)
        before = correctness_posterior(model, batch, Y)
        model.generator.encoder.out.bias.data[:2] += 1.5
        model.generator.gmm_mean.data += 1.5
        np.testing.assert_allclose(correctness_posterior(model, batch, Y), before, atol=1e-9)

    def test_loss_examples(self):
        model = small_model(gamma=0.5)
        model.generator.gmm_mean.data[:] = 0.0
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        assert loss_correct(model, batch, Y, B, Pi).item() == pytest.approx(len(batch) * math.log(2) / 2, abs=1e-9)

    def test_loss_h_without_lambda_l(self):
        model = small_model()
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        lh = loss_h(model, batch, Y, B, Pi, np.random.default_rng(6), LossWeights(0.01, 1.0, 0.0)).item()
        lr = loss_recon(model, batch, Y, B, Pi, np.random.default_rng(6), 1.0).item()
        assert lh == pytest.approx(lr, abs=1e-12)

    def test_gradients(self):
        model = small_model()
        batch = small_batch(model)
        Y, B, Pi = assignments(batch, 3)
        gen = model.generator
        params = gen.encoder.parameters() + [gen.gmm_mean, gen.gmm_var_raw] + gen.variant_net.parameters()
        assert finite_difference_check(lambda: loss_correct(model, batch, Y, B, Pi), params) < 1e-4
        w = LossWeights(0.01, 1.0, 0.5)
        params = gen.encoder.parameters() + [gen.gmm_mean, gen.gmm_var_raw] + gen.decoder.parameters()
        assert finite_difference_check(
            lambda: loss_h(model, batch, Y, B, Pi, np.random.default_rng(7), w), params) < 1e-4


class TestJointElbo:
    def test_finite_and_kl_nonnegative(self):
        model = small_model()
        parts = joint_elbo(model, small_batch(model), np.random.default_rng(0))
        assert all(np.isfinite(v) for v in parts.values())
        assert parts["kl"] >= 0
        assert parts["elbo"] == pytest.approx(parts["log_px"] - parts["kl"], abs=1e-9)

    def test_gradient(self):
        model = small_model()
        batch = small_batch(model)
        params = [p for m in (model.boundary, model.phoneme, model.generator) for p in m.parameters()]
        err = finite_difference_check(lambda: joint_elbo_tensor(model, batch, np.random.default_rng(8))[0],
                                      params, max_entries=4)
        assert err < 1e-4


def test_baseline_gradient():
    model = small_model()
    batch = small_batch(model)
    target = np.random.default_rng(9).normal(size=len(batch))
    err = finite_difference_check(lambda: ((baseline_values(model, batch) - target) ** 2).sum(),
                                  model.baseline.parameters())
    assert err < 1e-4


def test_parameter_budget_for_gradient_checks():
    assert sum(m.num_parameters() for m in small_model().modules().values()) <= 10_000


def test_state_dict_round_trip():
    a, b = small_model(np.float32, seed=1), small_model(np.float32, seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], v)
