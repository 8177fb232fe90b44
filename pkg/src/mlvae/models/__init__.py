from .autodiff import Tensor, no_grad
from .nets import Adam, FeatureNormalizer, MLP, NetSpec, PAPER_NET_SIZES, context_windows
from .mlvae import (
    MLVAE,
    FrameBatch,
    LossWeights,
    ModelConfig,
    Posteriors,
    boundary_posterior,
    component_index,
    correctness_log_posterior,
    correctness_posterior,
    joint_elbo,
    loss_boundary,
    loss_correct,
    loss_h,
    loss_phoneme,
    loss_recon,
    phoneme_posterior,
)
