import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from latent_talker.config import ModelConfig
from latent_talker.world import build_world, sample_clip

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small geometry so finite-difference sweeps stay fast."""
    return ModelConfig(
        n_style_layers=4,
        n_edit_layers=2,
        style_dim=8,
        motion_dim=4,
        audio_dim=4,
        id_dim=2,
        lip_dim=2,
        n_distractors=3,
        seq_len=16,
        window_len=8,
        image_size=8,
        n_landmarks=4,
        n_mouth_landmarks=2,
        post_stem_hidden=8,
        post_stem_out=8,
        post_audio_proj=6,
        post_rnn_hidden=8,
        prior_audio_proj=6,
        prior_rnn_hidden=8,
        flow_steps=2,
        flow_rnn_hidden=8,
        flow_audio_proj=6,
        smooth_channels=16,
        manip_hidden=16,
        audio_enc_hidden=8,
        sync_embed_dim=8,
        sync_conv1=4,
        sync_conv2=4,
        sync_video_hidden=8,
        sync_audio_hidden=8,
    )


@pytest.fixture(scope="session")
def world(cfg):
    return build_world(cfg, seed=7)


@pytest.fixture(scope="session")
def tiny_world(tiny_cfg):
    return build_world(tiny_cfg, seed=11)


@pytest.fixture(scope="session")
def clip(world):
    return sample_clip(world, 64, seed=123)


@pytest.fixture(scope="session")
def tiny_clip(tiny_world):
    return sample_clip(tiny_world, 16, seed=5)
