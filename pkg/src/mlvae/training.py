"""Alternating hard-EM training, the REINFORCE variant, checkpoints and the metric log."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import lattice, metrics
from .core import PhonemeInventory, Priors, Utterance, ValidationError, expand_phonemes, uniform_alignment
from .models import autodiff as ad
from .models.autodiff import Tensor
from .models.mlvae import (
    MLVAE, FrameBatch, LossWeights, ModelConfig, baseline_values, correctness_log_posterior_tensor,
    joint_elbo, joint_elbo_tensor, loss_boundary, loss_h, loss_phoneme, loss_recon, recon_terms,
)
from .models.nets import Adam, FeatureNormalizer, NetSpec

log = logging.getLogger("mlvae.training")

VARIANTS = ("ml-vae", "ml-vae-rl")
ABLATIONS = ("bhat-align", "joint", "separate-e")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class ReinforceConfig:
    n_mc: int = 4
    entropy_weight: float = 1.0
    baseline_lr: float = 1e-3

    def __post_init__(self):
        if self.n_mc < 1:
            raise ConfigError("reinforce.n_mc must be >= 1")
        if self.entropy_weight < 0 or self.baseline_lr <= 0:
            raise ConfigError("reinforce.entropy_weight must be >= 0 and baseline_lr > 0")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "ml-vae"
    epochs: int = 50                 # total budget, warmup included
    warmup_epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    reinforce: ReinforceConfig = field(default_factory=ReinforceConfig)
    realign_every: int = 5
    patience: int = 10
    seed: int = 0
    ablation: Optional[str] = None
    gamma_pi: float = 0.15
    max_valid: Optional[int] = None  # validation subset size (None = all)
    elbo_utts: int = 16              # validation utterances used for the logged ELBO

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.realign_every < 1 or self.warmup_epochs < 1:
            raise ConfigError("realign_every and warmup_epochs must be >= 1")
        if self.epochs < self.warmup_epochs:
            raise ConfigError("epochs must cover the warmup epochs")
        if self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ConfigError("batch_size, lr and patience must be positive")


_NESTED = {"weights": LossWeights, "reinforce": ReinforceConfig}
_NETSPEC_KEYS = ("boundary_net", "phoneme_net", "encoder_net", "baseline_net")


def _build(cls, data: dict, where: str, nested: dict):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            value = nested[key](value, f"{where}{key}.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {where or 'config'}: {exc}") from None


def train_config_from_dict(data: dict, where: str = "") -> TrainConfig:
    nested = {k: (lambda v, w, c=c: _build(c, v, w, {})) for k, c in _NESTED.items()}
    return _build(TrainConfig, data, where, nested)


def model_config_from_dict(data: dict, where: str = "model.") -> ModelConfig:
    nested = {k: (lambda v, w: _build(NetSpec, v, w, {})) for k in _NETSPEC_KEYS}
    return _build(ModelConfig, data, where, nested)


def config_from_dict(data: dict) -> tuple[TrainConfig, ModelConfig]:
    """Split a user config document into training and model settings; unknown keys raise."""
    data = dict(data)
    model = model_config_from_dict(data.pop("model", {}) or {})
    return train_config_from_dict(data), model


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


# ---------------------------------------------------------------------------
# model construction and (de)serialisation

def infer_num_phonemes(utts: Sequence[Utterance]) -> int:
    return max(2, int(max(u.C.max() for u in utts)) + 1)


def build_model(train_utts: Sequence[Utterance], model_config: ModelConfig = ModelConfig(),
                gamma_pi: float = 0.15, seed: int = 0, n_phonemes: Optional[int] = None,
                bbar: Optional[list] = None) -> MLVAE:
    """Fit the fixed priors and feature normaliser from training data and initialise every network."""
    if not train_utts:
        raise ValidationError("training set is empty")
    n = n_phonemes or infer_num_phonemes(train_utts)
    bbar = bbar or [uniform_alignment(u.num_frames, u.num_phonemes) for u in train_utts]
    frame_labels = np.concatenate([expand_phonemes(u.C, b) for u, b in zip(train_utts, bbar)])
    inventory = PhonemeInventory.from_counts([str(i) for i in range(n)], np.bincount(frame_labels, minlength=n))
    rate = sum(u.num_phonemes for u in train_utts) / sum(u.num_frames for u in train_utts)
    priors = Priors(alpha=1.0, beta=(1.0 - rate) / rate, gamma_pi=gamma_pi)
    model = MLVAE(train_utts[0].X.shape[1], inventory, priors, model_config, seed=seed,
                  normalizer=FeatureNormalizer.fit([u.X for u in train_utts]))
    init_gmm(model, train_utts, bbar, np.random.default_rng(np.random.SeedSequence([seed, 4242])))
    return model


def init_gmm(model: MLVAE, utts: Sequence[Utterance], bbar: Sequence[np.ndarray], rng: np.random.Generator,
             chunk: int = 128):
    """Anchor each phoneme's components at the mean encoder output of its frames; variants are jittered."""
    gen = model.generator
    d, nv, n = gen.latent_dim, gen.n_variants, model.n_phonemes
    sums = np.zeros((n, d))
    counts = np.zeros(n)
    for i in range(0, len(utts), chunk):
        part = utts[i:i + chunk]
        batch = model.batch([u.X for u in part])
        with ad.no_grad():
            mq, _ = gen.encode(batch)
        labels = np.concatenate([expand_phonemes(u.C, b) for u, b in zip(part, bbar[i:i + chunk])])
        np.add.at(sums, labels, mq.data.astype(np.float64))
        counts += np.bincount(labels, minlength=n)
    means = sums / np.maximum(counts, 1)[:, None]
    table = np.repeat(means, nv + 1, axis=0)
    jitter = rng.standard_normal((n, nv, d))
    for j in range(n):
        table[j * (nv + 1) + 1: (j + 1) * (nv + 1)] += jitter[j]
    gen.gmm_mean.data = table.astype(gen.gmm_mean.data.dtype)


def _model_meta(model: MLVAE) -> dict:
    return {
        "feature_dim": model.feature_dim,
        "symbols": list(model.inventory.symbols),
        "prior": [float(v) for v in model.inventory.prior],
        "zeta": [float(v) for v in model.inventory.zeta],
        "priors": {"alpha": model.priors.alpha, "beta": model.priors.beta, "gamma_pi": model.priors.gamma_pi},
        "config": json.loads(json.dumps(asdict(model.config))),
    }


def _model_from_meta(meta: dict) -> MLVAE:
    inv = PhonemeInventory(tuple(meta["symbols"]), np.array(meta["prior"]), np.array(meta["zeta"]))
    return MLVAE(meta["feature_dim"], inv, Priors(**meta["priors"]),
                 model_config_from_dict(meta["config"]), seed=0)


def save_model(path, model: MLVAE, extra: Optional[dict] = None):
    meta = {"kind": "model", "model": _model_meta(model), **(extra or {})}
    ckpt.write(path, meta, {f"model.{k}": v for k, v in model.state_dict().items()})


def load_model(path) -> MLVAE:
    """Model from a model file or a training checkpoint (which yields the best parameters)."""
    meta, tensors = ckpt.read(path)
    if "model" not in meta:
        raise ckpt.CheckpointError(f"{path}: no model description in checkpoint")
    model = _model_from_meta(meta["model"])
    prefix = "best." if any(k.startswith("best.") for k in tensors) else "model."
    model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return model


# ---------------------------------------------------------------------------
# training state

@dataclass
class TrainState:
    model: MLVAE
    cfg: TrainConfig
    optimizers: dict[str, Adam]
    bbar: list
    epoch: int = 0
    history: list = field(default_factory=list)
    best_score: float = -1.0
    best_epoch: int = 0
    bad_epochs: int = 0
    best_params: Optional[dict] = None
    finished: bool = False

    @classmethod
    def fresh(cls, model: MLVAE, cfg: TrainConfig, bbar: list) -> "TrainState":
        return cls(model, cfg, make_optimizers(model, cfg), bbar)


def make_optimizers(model: MLVAE, cfg: TrainConfig) -> dict[str, Adam]:
    opts = {name: Adam(model.modules()[name].parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
            for name in ("boundary", "phoneme", "generator")}
    opts["baseline"] = Adam(model.baseline.parameters(), lr=cfg.reinforce.baseline_lr, clip_norm=cfg.clip_norm)
    return opts


def save_checkpoint(path, state: TrainState):
    meta = {
        "kind": "training",
        "model": _model_meta(state.model),
        "train_config": train_config_to_dict(state.cfg),
        "epoch": state.epoch,
        "history": state.history,
        "best_score": state.best_score,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "finished": state.finished,
        "bbar_lengths": [int(len(b)) for b in state.bbar],
    }
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    if state.best_params is not None:
        tensors.update({f"best.{k}": v for k, v in state.best_params.items()})
    for name, opt in state.optimizers.items():
        tensors.update({f"opt.{name}.{k}": v for k, v in opt.state().items()})
    tensors["bbar"] = np.concatenate(state.bbar).astype(np.float32)
    ckpt.write(path, meta, tensors)


def load_checkpoint(path) -> TrainState:
    meta, tensors = ckpt.read(path)
    if meta.get("kind") != "training":
        raise ckpt.CheckpointError(f"{path}: not a training checkpoint")
    model = _model_from_meta(meta["model"])
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    cfg = train_config_from_dict(meta["train_config"])
    opts = make_optimizers(model, cfg)
    for name, opt in opts.items():
        prefix = f"opt.{name}."
        opt.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    flat = tensors["bbar"].astype(np.int8).astype(bool)
    bbar = np.split(flat, np.cumsum(meta["bbar_lengths"])[:-1])
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")} or None
    return TrainState(model, cfg, opts, list(bbar), meta["epoch"], meta["history"], meta["best_score"],
                      meta["best_epoch"], meta["bad_epochs"], best, meta["finished"])


# ---------------------------------------------------------------------------
# E-step

@dataclass(frozen=True)
class Assignment:
    Y: np.ndarray
    B: np.ndarray
    Pi: np.ndarray


def e_step(model: MLVAE, utts: Sequence[Utterance], batch: Optional[FrameBatch] = None,
           separate: bool = False) -> list[Assignment]:
    """Hard assignments (Y-hat, B-hat, Pi-hat) per utterance; never touches parameters."""
    batch = batch or model.batch([u.X for u in utts])
    posts = model.posteriors(batch, with_correctness=not separate)
    prior = model.inventory.prior
    out = []
    for u, post in zip(utts, posts):
        if separate:
            B, Pi = lattice.separate_from_posteriors(post, u.C, prior, model.priors.gamma_pi)
        else:
            res = lattice.decode_posteriors(post, u.C, prior)
            B, Pi = res.boundaries, res.correctness
        out.append(Assignment(post.y_hat, np.asarray(B, dtype=bool), np.asarray(Pi, dtype=bool)))
    return out


def realign(model: MLVAE, utts: Sequence[Utterance], chunk: int = 128) -> list[np.ndarray]:
    """Forced alignment of every utterance with the current model."""
    out = []
    for i in range(0, len(utts), chunk):
        part = utts[i:i + chunk]
        posts = model.posteriors(model.batch([u.X for u in part]), with_correctness=False)
        out.extend(lattice.align_posteriors(p, u.C, model.inventory.prior).astype(bool) for u, p in zip(part, posts))
    return out


# ---------------------------------------------------------------------------
# REINFORCE

@dataclass
class RewardState:
    reward: np.ndarray       # (n_mc, frames): per-frame raw reward
    baseline: np.ndarray     # (frames,)
    calibrated: np.ndarray   # reward - baseline
    entropy: float


def sample_rewards(model: MLVAE, batch: FrameBatch, Y, rng: np.random.Generator, n_mc: int,
                   weights: LossWeights, enc=None):
    """Draw Pi ~ q(pi | .) per frame and evaluate the per-frame loss under each draw.

    Returns the samples, the per-frame rewards (n_mc, frames) and the log posterior tensors.
    """
    gen = model.generator
    enc = enc or gen.encode(batch)
    l0, l1 = correctness_log_posterior_tensor(model, batch, Y, enc)
    q1 = np.exp(l1.data.astype(np.float64))
    samples = rng.random((n_mc, len(batch))) < q1[None, :]
    rewards = np.empty((n_mc, len(batch)))
    with ad.no_grad():
        enc_fixed = (ad.stop_gradient(enc[0]), ad.stop_gradient(enc[1]))
        for i in range(n_mc):
            r = recon_terms(model, batch, Y, samples[i], rng, weights.lambda_r, enc_fixed).data
            nll = -np.where(samples[i], l1.data, l0.data)
            rewards[i] = r + weights.lambda_l * nll
    return samples, rewards, (l0, l1), enc


def reinforce_step(model: MLVAE, batch: FrameBatch, assign_Y, assign_Pi, optimizers: dict[str, Adam],
                   cfg: TrainConfig, rng: np.random.Generator) -> Optional[RewardState]:
    """One generator update: pathwise loss at Pi-hat plus the baselined score-function term and entropy bonus.

    Returns ``None`` (and leaves parameters untouched) when the sampled reward is non-finite.
    """
    rc, w = cfg.reinforce, cfg.weights
    samples, rewards, (l0, l1), enc = sample_rewards(model, batch, assign_Y, rng, rc.n_mc, w)
    if not np.all(np.isfinite(rewards)):
        log.warning("non-finite REINFORCE reward; batch skipped")
        model.generator.zero_grad()
        return None
    base = baseline_values(model, batch)
    calibrated = rewards - base.data.astype(np.float64)[None, :]

    pathwise = loss_h(model, batch, assign_Y, None, assign_Pi, rng, w)
    score = 0.0
    dtype = batch.x.dtype
    for i in range(rc.n_mc):
        log_q = ad.where(samples[i], l1, l0)
        score = score + (log_q * calibrated[i].astype(dtype)).sum()
    score = score * (1.0 / (rc.n_mc * batch.num_utts))
    q1 = ad.exp(l1)
    q0 = ad.exp(l0)
    entropy = -(q0 * l0 + q1 * l1).sum() * (1.0 / batch.num_utts)
    total = pathwise + score - rc.entropy_weight * entropy
    total.backward()
    optimizers["generator"].step()

    target = rewards.mean(axis=0).astype(dtype)
    mse = (((base - target) ** 2).sum()) * (1.0 / batch.num_utts)
    mse.backward()
    optimizers["baseline"].step()
    return RewardState(rewards, base.data.astype(np.float64), calibrated, float(entropy.data))


def fit_baseline(model: MLVAE, batches: Sequence[tuple[FrameBatch, np.ndarray]], cfg: TrainConfig,
                 steps: int, seed: int = 0) -> list[float]:
    """Train only the baseline net against sampled rewards of a frozen model; returns the MSE trace."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.baseline.parameters(), lr=cfg.reinforce.baseline_lr, clip_norm=cfg.clip_norm)
    trace = []
    for s in range(steps):
        batch, Y = batches[s % len(batches)]
        with ad.no_grad():
            _, rewards, _, _ = sample_rewards(model, batch, Y, rng, cfg.reinforce.n_mc, cfg.weights)
        base = baseline_values(model, batch)
        target = rewards.mean(axis=0).astype(batch.x.dtype)
        mse = ((base - target) ** 2).sum() * (1.0 / len(batch))
        trace.append(mse.item())
        mse.backward()
        opt.step()
    return trace


# ---------------------------------------------------------------------------
# validation

def evaluate_model(model: MLVAE, utts: Sequence[Utterance], chunk: int = 128) -> dict:
    """Corpus metrics of joint decoding plus the forced-alignment IoU."""
    reports, fa_iou, hits, total = [], [], 0, 0
    for i in range(0, len(utts), chunk):
        part = utts[i:i + chunk]
        posts = model.posteriors(model.batch([u.X for u in part]))
        for u, p in zip(part, posts):
            loc = lattice.decode_posteriors(p, u.C, model.inventory.prior).localization(u.C)
            reports.append(metrics.UtteranceReport(u.id, metrics.score_localization(loc, u),
                                                   metrics.segment_ious(loc, u)))
            B = lattice.align_posteriors(p, u.C, model.inventory.prior)
            fa = lattice.LocalizationResult.from_path(u.C, B, np.zeros(u.num_phonemes, bool))
            fa_iou.append(metrics.segment_ious(fa, u))
            h, t = metrics.boundary_hits(np.flatnonzero(B), u)
            hits, total = hits + h, total + t
    agg = metrics.aggregate(reports)
    return {"F1_ML": agg["F1_ML"], "PR_ML": agg["PR_ML"], "RE_ML": agg["RE_ML"],
            "alignment_avg_iou": agg["alignment_avg_iou"],
            "fa_alignment_avg_iou": float(np.concatenate(fa_iou).mean()),
            "fa_boundary_accuracy": hits / total if total else 1.0}


# ---------------------------------------------------------------------------
# main loop

@dataclass
class TrainResult:
    model: MLVAE
    history: list
    best_epoch: int
    best_score: float
    state: TrainState


def _check(loss: Tensor, what: str):
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite {what}")


def _step(loss: Tensor, opt: Adam, what: str) -> float:
    _check(loss, what)
    loss.backward()
    opt.step()
    return float(loss.data)


def _run_epoch(state: TrainState, train_utts: Sequence[Utterance], epoch: int) -> dict:
    cfg, model, opts = state.cfg, state.model, state.optimizers
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
    warm = epoch <= cfg.warmup_epochs
    order = rng.permutation(len(train_utts))
    sums: dict[str, float] = {}
    n_batches = 0

    def add(key, value):
        sums[key] = sums.get(key, 0.0) + value

    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        utts = [train_utts[i] for i in idx]
        bbar = [state.bbar[i] for i in idx]
        batch = model.batch([u.X for u in utts])
        labels = np.concatenate([expand_phonemes(u.C, b) for u, b in zip(utts, bbar)])
        bbar_flat = np.concatenate(bbar).astype(np.int64)
        n_batches += 1

        if warm:
            add("loss_p", _step(loss_phoneme(model, batch, labels), opts["phoneme"], "phoneme loss"))
            add("loss_b", _step(loss_boundary(model, batch, bbar_flat, cfg.weights.lambda_b),
                                opts["boundary"], "boundary loss"))
            zeros = np.zeros(len(batch), dtype=bool)
            add("loss_h", _step(loss_recon(model, batch, labels, bbar_flat, zeros, rng, cfg.weights.lambda_r),
                                opts["generator"], "reconstruction loss"))
            continue

        if cfg.ablation == "joint":
            elbo, _ = joint_elbo_tensor(model, batch, rng)
            loss = -elbo
            _check(loss, "joint ELBO")
            loss.backward()
            for name in ("phoneme", "boundary", "generator"):
                opts[name].step()
            add("loss_joint", float(loss.data))
            continue

        # E-step: hard assignments from the current parameters
        assign = e_step(model, utts, batch, separate=cfg.ablation == "separate-e")
        Y = np.concatenate([a.Y for a in assign])
        B_hat = np.concatenate([a.B for a in assign]).astype(np.int64)
        Pi_hat = np.concatenate([a.Pi for a in assign])
        add("mismatch_rate", float(Pi_hat.mean()))

        # M-step
        add("loss_p", _step(loss_phoneme(model, batch, labels), opts["phoneme"], "phoneme loss"))
        b_target = B_hat if cfg.ablation == "bhat-align" else bbar_flat
        add("loss_b", _step(loss_boundary(model, batch, b_target, cfg.weights.lambda_b),
                            opts["boundary"], "boundary loss"))
        if cfg.variant == "ml-vae":
            add("loss_h", _step(loss_h(model, batch, Y, B_hat, Pi_hat, rng, cfg.weights),
                                opts["generator"], "generator loss"))
        else:
            rs = reinforce_step(model, batch, Y, Pi_hat, opts, cfg, rng)
            if rs is not None:
                add("reward", float(rs.reward.mean()))
                add("reward_var", float(rs.reward.var()))
                add("calibrated_var", float(rs.calibrated.var()))
                add("entropy", rs.entropy)
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def _record(state: TrainState, epoch: int, losses: dict, valid_utts, realigned: bool) -> dict:
    cfg, model = state.cfg, state.model
    subset = valid_utts if cfg.max_valid is None else valid_utts[:cfg.max_valid]
    val = evaluate_model(model, subset)
    rec = {"epoch": epoch, "phase": "warmup" if epoch <= cfg.warmup_epochs else "em",
           "train": losses, "valid": val, "realigned": realigned}
    if cfg.elbo_utts > 0:
        eb = model.batch([u.X for u in valid_utts[:cfg.elbo_utts]])
        rec["elbo"] = joint_elbo(model, eb, np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 99])))
    # F1_ML is identically 0 on a mismatch-free validation set, so select on alignment there
    key = "F1_ML" if any(u.truth.mismatch.any() for u in subset) else "fa_alignment_avg_iou"
    rec["selection_metric"] = key
    rec["best"] = False
    if epoch > cfg.warmup_epochs:
        if val[key] > state.best_score:
            state.best_score, state.best_epoch, state.bad_epochs = val[key], epoch, 0
            state.best_params = model.state_dict()
            rec["best"] = True
        else:
            state.bad_epochs += 1
    return rec


def train(train_utts: Sequence[Utterance], valid_utts: Sequence[Utterance], cfg: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(), out_dir=None, state: Optional[TrainState] = None,
          stop_after: Optional[int] = None) -> TrainResult:
    """Run (or continue) training.

    ``out_dir`` receives ``metrics.jsonl``, ``last.ckpt`` (full training state,
    rewritten every epoch) and ``model.ckpt`` (best parameters). ``stop_after``
    halts after that epoch as if interrupted; pass the saved state back to resume.
    """
    if not train_utts or not valid_utts:
        raise ValidationError("training and validation sets must be non-empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if state is None:
        bbar = [uniform_alignment(u.num_frames, u.num_phonemes).astype(bool) for u in train_utts]
        model = build_model(train_utts, model_config, cfg.gamma_pi, cfg.seed, bbar=bbar)
        state = TrainState.fresh(model, cfg, bbar)
    elif len(state.bbar) != len(train_utts):
        raise ValidationError("checkpoint was trained on a different number of utterances")
    cfg, model = state.cfg, state.model
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.jsonl"
        # rewrite the log from the state so a resumed run's log equals the unbroken one
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in state.history))

    while not state.finished and state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        try:
            losses = _run_epoch(state, train_utts, epoch)
        except FloatingPointError as exc:
            path = None
            if out_dir is not None:
                path = out_dir / "diverged.ckpt"
                state.epoch = epoch
                save_checkpoint(path, state)
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", path) from exc
        realigned = epoch % cfg.realign_every == 0
        if realigned:
            state.bbar = realign(model, train_utts)
        rec = _record(state, epoch, losses, valid_utts, realigned)
        state.history.append(rec)
        state.epoch = epoch
        log.info("epoch %d %s valid F1_ML=%.4f", epoch, rec["phase"], rec["valid"]["F1_ML"])
        if epoch > cfg.warmup_epochs and state.bad_epochs >= cfg.patience:
            state.finished = True
        if state.epoch >= cfg.epochs:
            state.finished = True
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            save_checkpoint(out_dir / "last.ckpt", state)
        if stop_after is not None and epoch >= stop_after:
            break

    best = _best_model(state)
    if out_dir is not None and state.finished:
        save_model(out_dir / "model.ckpt", best, {"best_epoch": state.best_epoch, "best_score": state.best_score})
    return TrainResult(best, state.history, state.best_epoch, state.best_score, state)


def _best_model(state: TrainState) -> MLVAE:
    if state.best_params is None:
        return state.model
    best = _model_from_meta(_model_meta(state.model))
    best.load_state_dict(state.best_params)
    return best


def resume(path, train_utts, valid_utts, out_dir=None, stop_after: Optional[int] = None) -> TrainResult:
    return train(train_utts, valid_utts, out_dir=out_dir, state=load_checkpoint(path), stop_after=stop_after)
