"""Boundary detector, phoneme estimator and speech generator with their losses.

All batch-level losses take a :class:`FrameBatch` (several utterances stacked
along the frame axis) and return a scalar :class:`Tensor`: the per-frame terms
are summed within each utterance and averaged over utterances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import probmath
from ..core import PhonemeInventory, Priors
from . import autodiff as ad
from .autodiff import Tensor
from .nets import MLP, FeatureNormalizer, Linear, Module, NetSpec, context_windows

HEAD_FLOOR = 1e-3
SELECTOR_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    lambda_b: float = 0.01
    lambda_r: float = 1.0
    lambda_l: float = 0.001

    def __post_init__(self):
        if min(self.lambda_b, self.lambda_r, self.lambda_l) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    boundary_net: NetSpec = field(default_factory=NetSpec)
    # per-frame phoneme estimator: with a context window, hard EM learns to reproduce
    # its own misaligned boundaries from neighbouring frames
    phoneme_net: NetSpec = field(default_factory=lambda: NetSpec(context_window=0))
    encoder_net: NetSpec = field(default_factory=lambda: NetSpec(context_window=0, hidden=(32, 32)))
    decoder_hidden: tuple = (32, 32)
    selector_hidden: tuple = (16, 16)
    variant_hidden: tuple = (32, 32)
    baseline_net: NetSpec = field(default_factory=lambda: NetSpec(context_window=2, hidden=(32,)))
    latent_dim: int = 4
    n_variants: int = 3
    gumbel_temperature: float = 1.0

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_variants < 1:
            raise ValueError("latent_dim and n_variants must be >= 1")
        if self.gumbel_temperature <= 0:
            raise ValueError("gumbel_temperature must be positive")


class FrameBatch:
    """Utterances stacked along the frame axis, with cached context windows."""

    def __init__(self, frames: Sequence[np.ndarray], dtype=np.float32):
        self.parts = [np.asarray(f, dtype=dtype) for f in frames]
        self.lengths = np.array([p.shape[0] for p in self.parts])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.x = np.concatenate(self.parts, axis=0)
        self.num_utts = len(self.parts)
        self._windows: dict[int, np.ndarray] = {}

    def __len__(self):
        return self.x.shape[0]

    def window(self, w: int) -> np.ndarray:
        if w not in self._windows:
            self._windows[w] = np.concatenate([context_windows(p, w) for p in self.parts], axis=0)
        return self._windows[w]

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def component_index(j: int, pi: int, k: int, n_variants: int) -> int:
    """0-based GMM component for phoneme ``j`` (0-based), correctness ``pi`` and variant ``k`` in 1..N_m.

    The 1-based layout is ``s = (j-1)(N_m+1) + 1`` for correct content and
    ``s + k`` for the k-th mismatch variant.
    """
    if pi == 0:
        return j * (n_variants + 1)
    if not 1 <= k <= n_variants:
        raise ValueError(f"variant k must be in [1, {n_variants}], got {k}")
    return j * (n_variants + 1) + k


def _diag_gauss_logpdf(x, mean, var) -> Tensor:
    """Sum over the last axis of elementwise Gaussian log densities."""
    diff = x - mean
    return (-0.5 * (LOG_2PI + ad.log(var) + diff * diff / var)).sum(axis=-1)


def _diag_gauss_kl(mq, vq, mp, vp) -> Tensor:
    diff = mq - mp
    return (0.5 * (ad.log(vp) - ad.log(vq) + (vq + diff * diff) / vp - 1.0)).sum(axis=-1)


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


class BoundaryDetector(Module):
    def __init__(self, n_in: int, spec: NetSpec, rng, dtype=np.float32):
        self.spec = spec
        self.trunk = MLP(n_in * (2 * spec.context_window + 1), spec.hidden, 1, rng, spec.activation, dtype)
        self.head_a = Linear(spec.hidden[-1], 1, rng, dtype)
        self.head_b = Linear(spec.hidden[-1], 1, rng, dtype)
        del self.trunk.out  # the two heads replace the trunk output layer

    def __call__(self, batch: FrameBatch) -> tuple[Tensor, Tensor]:
        h = self.trunk.features(Tensor(batch.window(self.spec.context_window)))
        alpha = ad.softplus(self.head_a(h)).reshape(-1) + HEAD_FLOOR
        beta = ad.softplus(self.head_b(h)).reshape(-1) + HEAD_FLOOR
        return alpha, beta


class PhonemeEstimator(Module):
    def __init__(self, n_in: int, n_phonemes: int, spec: NetSpec, rng, dtype=np.float32):
        self.spec = spec
        self.net = MLP(n_in * (2 * spec.context_window + 1), spec.hidden, n_phonemes, rng,
                       spec.activation, dtype, zero_output=True)

    def __call__(self, batch: FrameBatch) -> Tensor:
        """Log posteriors ``ln q(y_t | x_t)``, shape (frames, N)."""
        return ad.log_softmax(self.net(Tensor(batch.window(self.spec.context_window))), axis=-1)


class SpeechGenerator(Module):
    """Encoder q(h|x), decoder p(x|h), the GMM table and the component selector."""

    def __init__(self, n_in: int, n_phonemes: int, cfg: ModelConfig, rng, dtype=np.float32):
        self.n_phonemes = n_phonemes
        self.n_variants = cfg.n_variants
        self.latent_dim = cfg.latent_dim
        self.temperature = cfg.gumbel_temperature
        self.enc_spec = cfg.encoder_net
        self.n_components = n_phonemes * (cfg.n_variants + 1)
        d_h = cfg.latent_dim
        self.encoder = MLP(n_in * (2 * cfg.encoder_net.context_window + 1), cfg.encoder_net.hidden,
                           2 * d_h, rng, cfg.encoder_net.activation, dtype)
        self.decoder = MLP(d_h, cfg.decoder_hidden, 2 * n_in, rng, "tanh", dtype)
        self.gmm_mean = Tensor(rng.normal(size=(self.n_components, d_h)).astype(dtype), requires_grad=True)
        self.gmm_var_raw = Tensor(np.full((self.n_components, d_h), _softplus_inv(1.0 - probmath.VAR_FLOOR),
                                          dtype=dtype), requires_grad=True)
        self.rho_net = MLP(n_phonemes + 2, cfg.selector_hidden, 1, rng, "sigmoid", dtype)
        self.variant_net = MLP(n_in + n_phonemes, cfg.variant_hidden, cfg.n_variants, rng, "tanh", dtype)

    # -- pieces ----------------------------------------------------------------
    def encode(self, batch: FrameBatch) -> tuple[Tensor, Tensor]:
        out = self.encoder(Tensor(batch.window(self.enc_spec.context_window)))
        d = self.latent_dim
        return out[:, :d], ad.softplus(out[:, d:]) + probmath.VAR_FLOOR

    def decode(self, h: Tensor) -> tuple[Tensor, Tensor]:
        out = self.decoder(h)
        d = out.shape[1] // 2
        return out[:, :d], ad.softplus(out[:, d:]) + probmath.VAR_FLOOR

    def gmm_var(self) -> Tensor:
        return ad.softplus(self.gmm_var_raw) + probmath.VAR_FLOOR

    def _onehot(self, Y: np.ndarray, dtype) -> np.ndarray:
        return np.eye(self.n_phonemes, dtype=dtype)[np.asarray(Y, dtype=np.int64)]

    def rho(self, Y, B, Pi, dtype) -> Tensor:
        inp = np.concatenate([self._onehot(Y, dtype), np.asarray(B, dtype=dtype)[:, None],
                              np.asarray(Pi, dtype=dtype)[:, None]], axis=1)
        return ad.sigmoid(self.rho_net(Tensor(inp))).reshape(-1)

    def variant_logits(self, batch: FrameBatch, Y) -> Tensor:
        inp = np.concatenate([batch.x, self._onehot(Y, batch.x.dtype)], axis=1)
        return self.variant_net(Tensor(inp))

    def sample_variants(self, batch: FrameBatch, Y, rng) -> tuple[Tensor, np.ndarray]:
        """Straight-through Gumbel-softmax: exact one-hot values, relaxed gradients."""
        logits = self.variant_logits(batch, Y)
        g = probmath.sample_gumbel(logits.shape, rng).astype(batch.x.dtype)
        soft = ad.softmax((logits + g) * (1.0 / self.temperature), axis=-1)
        k = np.argmax(soft.data, axis=1)
        hard = np.eye(self.n_variants, dtype=batch.x.dtype)[k]
        return soft - ad.stop_gradient(soft) + hard, k + 1

    def component_weights(self, batch: FrameBatch, Y, B, Pi, rng) -> tuple[Tensor, np.ndarray]:
        """Selector output ``softmax(rho * eps + delta)`` over all K components and the hard index."""
        Y = np.asarray(Y, dtype=np.int64)
        if np.any((Y < 0) | (Y >= self.n_phonemes)):
            raise ValueError("phoneme index out of range")
        Pi = np.asarray(Pi, dtype=bool)
        _, k = self.sample_variants(batch, Y, rng)
        s = Y * (self.n_variants + 1) + np.where(Pi, k, 0)
        delta = np.zeros((len(Y), self.n_components), dtype=batch.x.dtype)
        delta[np.arange(len(Y)), s] = 1.0
        rho = self.rho(Y, B, Pi, batch.x.dtype)
        logits = rho.reshape(-1, 1) * SELECTOR_EPS + delta
        return ad.softmax(logits, axis=-1), s

    def block_indices(self, Y) -> np.ndarray:
        """Component indices of each frame's phoneme block, shape (frames, N_m + 1)."""
        Y = np.asarray(Y, dtype=np.int64)
        return Y[:, None] * (self.n_variants + 1) + np.arange(self.n_variants + 1)[None, :]

    # -- correctness -------------------------------------------------------------
    def correctness_loglik(self, batch: FrameBatch, Y, enc=None) -> tuple[Tensor, Tensor]:
        """Per-frame log marginal likelihoods of the encoder mean under each hypothesis.

        Correct content uses the phoneme's own component; mismatched content mixes
        the variant components with the selector's variant probabilities.
        """
        mq, vq = self.encode(batch) if enc is None else enc
        idx = self.block_indices(Y)
        means = self.gmm_mean[idx]
        var = self.gmm_var()[idx] + vq.reshape(len(batch), 1, self.latent_dim)
        ll = _diag_gauss_logpdf(mq.reshape(len(batch), 1, self.latent_dim), means, var)
        log_g = ad.log_softmax(self.variant_logits(batch, Y), axis=-1)
        return ll[:, 0], ad.logsumexp(ll[:, 1:] + log_g, axis=-1)


@dataclass
class Posteriors:
    """Per-frame model outputs consumed by the lattice."""

    log_qy: np.ndarray        # (T, N)
    q_b1: np.ndarray          # (T,)
    alpha: np.ndarray
    beta: np.ndarray
    log_qpi: Optional[np.ndarray] = None  # (T, 2): ln q(pi=0), ln q(pi=1)

    @property
    def y_hat(self) -> np.ndarray:
        return np.argmax(self.log_qy, axis=1)


class MLVAE:
    """Container for all trainable parts plus the fixed priors."""

    def __init__(self, feature_dim: int, inventory: PhonemeInventory, priors: Priors,
                 config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
                 normalizer: Optional[FeatureNormalizer] = None):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7301]))
        self.feature_dim = feature_dim
        self.inventory = inventory
        self.priors = priors
        self.config = config
        self.dtype = dtype
        self.normalizer = normalizer or FeatureNormalizer(np.zeros(feature_dim, np.float32),
                                                          np.ones(feature_dim, np.float32))
        n = inventory.size
        self.boundary = BoundaryDetector(feature_dim, config.boundary_net, rng, dtype)
        self.phoneme = PhonemeEstimator(feature_dim, n, config.phoneme_net, rng, dtype)
        self.generator = SpeechGenerator(feature_dim, n, config, rng, dtype)
        bs = config.baseline_net
        self.baseline = MLP(feature_dim * (2 * bs.context_window + 1), bs.hidden, 1, rng, bs.activation, dtype)

    @property
    def n_phonemes(self) -> int:
        return self.inventory.size

    def modules(self) -> dict[str, Module]:
        return {"boundary": self.boundary, "phoneme": self.phoneme,
                "generator": self.generator, "baseline": self.baseline}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                out[f"{name}.{k}"] = v
        out["normalizer.mean"] = self.normalizer.mean
        out["normalizer.std"] = self.normalizer.std
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, mod in self.modules().items():
            prefix = name + "."
            mod.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
        self.normalizer = FeatureNormalizer(np.asarray(state["normalizer.mean"], np.float32),
                                            np.asarray(state["normalizer.std"], np.float32))

    def astype(self, dtype):
        for mod in self.modules().values():
            mod.astype(dtype)
        self.dtype = dtype
        return self

    def batch(self, Xs: Sequence[np.ndarray]) -> FrameBatch:
        return FrameBatch([self.normalizer(X) for X in Xs], dtype=self.dtype)

    # -- inference ---------------------------------------------------------------
    def posteriors(self, batch: FrameBatch, with_correctness: bool = True) -> list[Posteriors]:
        with ad.no_grad():
            log_qy = self.phoneme(batch).data.astype(np.float64)
            alpha, beta = (t.data.astype(np.float64) for t in self.boundary(batch))
            log_qpi = None
            if with_correctness:
                y_hat = np.argmax(log_qy, axis=1)
                log_qpi = correctness_log_posterior(self, batch, y_hat).astype(np.float64)
        out = []
        for a, b in zip(batch.offsets[:-1], batch.offsets[1:]):
            out.append(Posteriors(log_qy[a:b], alpha[a:b] / (alpha[a:b] + beta[a:b]), alpha[a:b], beta[a:b],
                                  None if log_qpi is None else log_qpi[a:b]))
        return out


# ---------------------------------------------------------------------------
# losses

def _per_utt_mean(per_frame_sum: Tensor, batch: FrameBatch) -> Tensor:
    return per_frame_sum * (1.0 / batch.num_utts)


def boundary_posterior(model: MLVAE, batch: FrameBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alpha_t, beta_t, q(b_t = 1 | x_t)) using the Beta posterior mean."""
    with ad.no_grad():
        alpha, beta = model.boundary(batch)
    a, b = alpha.data.astype(np.float64), beta.data.astype(np.float64)
    return a, b, a / (a + b)


def beta_kl_tensor(a: Tensor, b: Tensor, a0: float, b0: float) -> Tensor:
    dg_ab = ad.digamma(a + b)
    return (float(probmath.log_beta_fn(a0, b0)) - (ad.log_gamma(a) + ad.log_gamma(b) - ad.log_gamma(a + b))
            + (a - a0) * ad.digamma(a) + (b - b0) * ad.digamma(b) + (a0 + b0 - a - b) * dg_ab)


def loss_boundary_terms(alpha: Tensor, beta: Tensor, bbar: np.ndarray, a0: float, b0: float,
                        lambda_b: float) -> Tensor:
    """Per-frame boundary loss given Beta parameters."""
    dg_ab = ad.digamma(alpha + beta)
    e_log = ad.digamma(alpha) - dg_ab
    e_log1m = ad.digamma(beta) - dg_ab
    bbar = np.asarray(bbar, dtype=alpha.data.dtype)
    kl = beta_kl_tensor(alpha, beta, a0, b0)
    return -(bbar * e_log + (1.0 - bbar) * e_log1m - lambda_b * kl)


def loss_boundary(model: MLVAE, batch: FrameBatch, bbar: np.ndarray, lambda_b: float) -> Tensor:
    alpha, beta = model.boundary(batch)
    terms = loss_boundary_terms(alpha, beta, bbar, model.priors.alpha, model.priors.beta, lambda_b)
    return _per_utt_mean(terms.sum(), batch)


def phoneme_posterior(model: MLVAE, batch: FrameBatch) -> np.ndarray:
    with ad.no_grad():
        return np.exp(model.phoneme(batch).data.astype(np.float64))


def loss_phoneme(model: MLVAE, batch: FrameBatch, labels: np.ndarray) -> Tensor:
    log_q = model.phoneme(batch)
    labels = np.asarray(labels, dtype=np.int64)
    return _per_utt_mean(-log_q[np.arange(len(labels)), labels].sum(), batch)


def recon_terms(model: MLVAE, batch: FrameBatch, Y, Pi, rng, lambda_r: float, enc=None) -> Tensor:
    """Per-frame negative ELBO of the speech generator (one reparameterised sample)."""
    gen = model.generator
    mq, vq = gen.encode(batch) if enc is None else enc
    eps = rng.standard_normal(mq.shape).astype(mq.data.dtype)
    h = mq + ad.power(vq, 0.5) * eps
    mx, vx = gen.decode(h)
    log_px = _diag_gauss_logpdf(Tensor(batch.x), mx, vx)

    Y = np.asarray(Y, dtype=np.int64)
    Pi = np.asarray(Pi, dtype=bool)
    idx = gen.block_indices(Y)
    d = gen.latent_dim
    kl = _diag_gauss_kl(mq.reshape(len(batch), 1, d), vq.reshape(len(batch), 1, d),
                        gen.gmm_mean[idx], gen.gmm_var()[idx])
    tau, _ = gen.sample_variants(batch, Y, rng)
    mis = Pi.astype(batch.x.dtype)[:, None]
    weights = ad.concat([Tensor((1.0 - mis)), tau * mis], axis=1)
    kl_sel = (weights * kl).sum(axis=-1)
    return -(log_px - lambda_r * kl_sel)


def loss_recon(model: MLVAE, batch: FrameBatch, Y, B, Pi, rng, lambda_r: float) -> Tensor:
    return _per_utt_mean(recon_terms(model, batch, Y, Pi, rng, lambda_r).sum(), batch)


def correctness_log_posterior_tensor(model: MLVAE, batch: FrameBatch, Y, enc=None) -> tuple[Tensor, Tensor]:
    """(ln q(pi=0|.), ln q(pi=1|.)) as tensors, combining the GMM likelihoods with gamma_pi."""
    ll0, ll1 = model.generator.correctness_loglik(batch, Y, enc)
    g = model.priors.gamma_pi
    a0 = ll0 + math.log1p(-g)
    a1 = ll1 + math.log(g)
    both = ad.concat([a0.reshape(-1, 1), a1.reshape(-1, 1)], axis=1)
    norm = ad.logsumexp(both, axis=1)
    return a0 - norm, a1 - norm


def correctness_log_posterior(model: MLVAE, batch: FrameBatch, Y, B=None) -> np.ndarray:
    with ad.no_grad():
        l0, l1 = correctness_log_posterior_tensor(model, batch, Y)
    return np.stack([l0.data, l1.data], axis=1).astype(np.float64)


def correctness_posterior(model: MLVAE, batch: FrameBatch, Y, B=None) -> np.ndarray:
    """q(pi_t = 1 | x_t, y_t, b_t) per frame."""
    return np.exp(correctness_log_posterior(model, batch, Y, B)[:, 1])


def correct_terms(model: MLVAE, batch: FrameBatch, Y, Pi_hat, enc=None) -> Tensor:
    l0, l1 = correctness_log_posterior_tensor(model, batch, Y, enc)
    return -ad.where(np.asarray(Pi_hat, dtype=bool), l1, l0)


def loss_correct(model: MLVAE, batch: FrameBatch, Y, B, Pi_hat) -> Tensor:
    return _per_utt_mean(correct_terms(model, batch, Y, Pi_hat).sum(), batch)


def loss_h(model: MLVAE, batch: FrameBatch, Y, B, Pi_hat, rng, weights: LossWeights) -> Tensor:
    gen = model.generator
    enc = gen.encode(batch)
    total = recon_terms(model, batch, Y, Pi_hat, rng, weights.lambda_r, enc).sum()
    if weights.lambda_l:
        total = total + weights.lambda_l * correct_terms(model, batch, Y, Pi_hat, enc).sum()
    return _per_utt_mean(total, batch)


def baseline_values(model: MLVAE, batch: FrameBatch) -> Tensor:
    w = model.config.baseline_net.context_window
    return model.baseline(Tensor(batch.window(w))).reshape(-1)


# ---------------------------------------------------------------------------
# joint objective (diagnostic and the joint-optimisation ablation)

def joint_elbo_tensor(model: MLVAE, batch: FrameBatch, rng) -> tuple[Tensor, dict[str, float]]:
    """Per-utterance-averaged ELBO with a factorised q(y) q(b) q(pi | y).

    The expectations over y and pi are exact; h uses one reparameterised sample.
    """
    gen = model.generator
    dtype = batch.x.dtype
    n = model.n_phonemes
    nv = gen.n_variants
    d = gen.latent_dim
    frames = len(batch)

    mq, vq = gen.encode(batch)
    eps = rng.standard_normal(mq.shape).astype(dtype)
    h = mq + ad.power(vq, 0.5) * eps
    mx, vx = gen.decode(h)
    log_px = _diag_gauss_logpdf(Tensor(batch.x), mx, vx)

    log_qy = model.phoneme(batch)
    qy = ad.exp(log_qy)
    log_py = np.log(model.inventory.prior).astype(dtype)
    kl_y = (qy * (log_qy - log_py)).sum(axis=-1)

    alpha, beta = model.boundary(batch)
    qb = alpha / (alpha + beta)
    pb = model.priors.boundary_rate
    tiny = 1e-12
    kl_b = qb * (ad.log(qb + tiny) - math.log(pb)) + (1.0 - qb) * (ad.log(1.0 - qb + tiny) - math.log1p(-pb))

    # KL(q(h|x) || component) for every component: (frames, K)
    kl_all = _diag_gauss_kl(mq.reshape(frames, 1, d), vq.reshape(frames, 1, d),
                            gen.gmm_mean.reshape(1, -1, d), gen.gmm_var().reshape(1, -1, d))
    kl_all = kl_all.reshape(frames, n, nv + 1)
    g = model.priors.gamma_pi
    exp_kl_h = 0.0
    exp_kl_pi = 0.0
    for j in range(n):
        Yj = np.full(frames, j)
        l0, l1 = correctness_log_posterior_tensor(model, batch, Yj, (mq, vq))
        q0, q1 = ad.exp(l0), ad.exp(l1)
        w_var = ad.softmax(gen.variant_logits(batch, Yj), axis=-1)
        kl_j = q0 * kl_all[:, j, 0] + q1 * (w_var * kl_all[:, j, 1:]).sum(axis=-1)
        kl_pi_j = q0 * (l0 - math.log1p(-g)) + q1 * (l1 - math.log(g))
        exp_kl_h = exp_kl_h + qy[:, j] * kl_j
        exp_kl_pi = exp_kl_pi + qy[:, j] * kl_pi_j
    kl_total = exp_kl_h + kl_y + kl_b + exp_kl_pi
    elbo = _per_utt_mean((log_px - kl_total).sum(), batch)
    parts = {
        "log_px": float(log_px.data.sum()) / batch.num_utts,
        "kl": float(kl_total.data.sum()) / batch.num_utts,
    }
    return elbo, parts


def joint_elbo(model: MLVAE, batch: FrameBatch, rng) -> dict[str, float]:
    with ad.no_grad():
        elbo, parts = joint_elbo_tensor(model, batch, rng)
    parts["elbo"] = float(elbo.data)
    return parts
