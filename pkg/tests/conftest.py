import numpy as np
import pytest
import torch

from mmflow.batching import Conditions, collate, pad_latents
from mmflow.config import ModelConfig

torch.set_num_threads(1)

# small enough for fast unit tests, with every stream and block type present
TINY = dict(d_model=16, d_cond=16, n_joint_layers=1, n_unimodal_layers=1, n_heads=2,
            d_latent=4, video_dim=6, sync_dim=5, d_fourier=8, n_convnext_blocks=1,
            frame_budget=96, max_seconds=2, warmup_steps=10, batch_size=2)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


def random_conditions(rng, cfg, duration, caption=True, video=True, sync=True, lyrics=True,
                      start_sec=0):
    n_video = int(np.ceil(duration * 24))
    return Conditions(
        duration_sec=duration, start_sec=start_sec,
        caption=rng.standard_normal((int(rng.integers(1, 5)), 768)) if caption else None,
        video=rng.standard_normal((n_video, cfg.video_dim)) if video else None,
        sync=rng.standard_normal((n_video, cfg.sync_dim)) if sync else None,
        lyrics_ids=rng.integers(1, 20, size=int(rng.integers(1, 8))).tolist() if lyrics else None)


def random_batch(cfg, durations, seed=0, dtype=torch.float32, **presence):
    rng = np.random.default_rng(seed)
    conds = [random_conditions(rng, cfg, d, **presence) for d in durations]
    cond = collate(conds, cfg, dtype=dtype)
    x1 = pad_latents([rng.standard_normal((c.n_frames, cfg.d_latent)) for c in conds],
                     cond.n_frames, cfg.d_latent, dtype=dtype)
    return x1, cond, conds


def perturb_parameters(model, scale=0.05, seed=0):
    """Move every parameter off its (partly zero) initialisation."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model
