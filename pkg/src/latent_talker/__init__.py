"""Audio-driven latent manipulation over a toy invertible generator.

The package covers the full pipeline: a synthetic, exactly invertible
world standing in for a pretrained style-based generator; a contrastive
audio-video sync discriminator; a conditional sequential VAE over motion
latents with a flow-augmented autoregressive prior; smoothed two-way style
code manipulation; windowed training; two inference modes; and the oracle
evaluation suite.
"""

from .config import ConfigError, ModelConfig, TrainConfig
from .core import (
    AudioFeatureSequence,
    GaussianParams,
    MotionLatentSequence,
    StylePlus,
    StyleSequence,
    cosine_similarity,
    diag_gaussian_log_prob,
    sample_diag_gaussian,
    seeded_generator,
)
from .inference import GenerationRequest, GenerationResult, assemble_video, generate
from .metrics import EvalReport, evaluate_reconstruction, lmd, lse_c, motion_stats, ssim
from .model import TalkerModel, build_model
from .posterior import PosteriorEncoder, posterior_log_prob, sample_posterior
from .prior_flow import MotionFlow, MotionPrior, kl_loss, prior_log_prob, sample_prior
from .sync import SyncEncoders, contrastive_loss, pretrain_sync, sync_score
from .training import Trainer, train_model
from .world import (
    FactorState,
    SyntheticClip,
    WorldParams,
    build_world,
    invert_style,
    landmarks_of,
    render,
    sample_clip,
    style_of,
)

__version__ = "0.1.0"
