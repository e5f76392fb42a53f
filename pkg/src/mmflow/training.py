"""Training / evaluation loops over loaded examples."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import rng as rng_mod
from .batching import collate, pad_latents
from .dataset import Example, batch_indices
from .flow import FlowBatch, StepResult, Trainer, cfm_loss, sample, sample_noise
from .model import FlowNetwork, set_state


def make_batch(examples: Sequence[Example], idx, cfg, dtype=torch.float32):
    chosen = [examples[i] for i in idx]
    cond = collate([e.conditions for e in chosen], cfg, dtype=dtype)
    x1 = pad_latents([e.latents for e in chosen], cond.n_frames, cfg.d_latent, dtype=dtype)
    return x1, cond


def train_loop(trainer: Trainer, examples: Sequence[Example], n_steps: int,
               on_step: Optional[Callable[[StepResult], None]] = None,
               on_checkpoint: Optional[Callable[[Trainer], None]] = None) -> list[StepResult]:
    """Run ``n_steps`` more steps; batch order is a pure function of (seed, step)."""
    if not examples:
        raise ValueError("no training examples")
    cfg = trainer.cfg
    results = []
    for _ in range(n_steps):
        idx = batch_indices(len(examples), cfg.batch_size, trainer.seed, trainer.step)
        x1, cond = make_batch(examples, idx, cfg, trainer.model.dtype)
        res = trainer.train_step(x1, cond)
        results.append(res)
        if on_step:
            on_step(res)
        if on_checkpoint and trainer.step % cfg.checkpoint_interval == 0:
            on_checkpoint(trainer)
    return results


@torch.no_grad()
def evaluation_loss(model: FlowNetwork, examples: Sequence[Example], cfg, seed: int,
                    n_draws: int = 4, chunk: Optional[int] = None) -> float:
    """CFM loss over every example with fixed (t, noise) draws and no modality dropout."""
    chunk = chunk or cfg.batch_size
    total, count = 0.0, 0
    for d in range(n_draws):
        gen = rng_mod.stream(seed, "eval", "loss", d)
        for lo in range(0, len(examples), chunk):
            idx = list(range(lo, min(lo + chunk, len(examples))))
            x1, cond = make_batch(examples, idx, cfg, model.dtype)
            t = torch.from_numpy(gen.uniform(size=len(idx))).to(x1.dtype)
            x0 = torch.from_numpy(gen.standard_normal(x1.shape)).to(x1.dtype)
            fb = FlowBatch(x1=x1, x0=x0, t=t, cond=cond)
            v = model(fb.x_t, t, cond)
            n = int(cond.audio_mask.sum()) * cfg.d_latent
            total += float(cfm_loss(v, fb.u, cond.audio_mask)) * n
            count += n
    return total / count


def ema_model(trainer: Trainer) -> FlowNetwork:
    """A copy of the network carrying the EMA weights."""
    net = FlowNetwork(trainer.cfg).to(trainer.model.dtype)
    set_state(net, trainer.ema_state())
    return net


@torch.no_grad()
def generate(model: FlowNetwork, examples: Sequence[Example], cfg, seed: int,
             drop: Sequence[str] = (), steps: Optional[int] = None,
             cfg_scale: Optional[float] = None, t_start: Optional[float] = None,
             chunk: int = 8) -> list[np.ndarray]:
    """Sample one latent clip per example; noise for example ``i`` uses counter ``i``."""
    outs = []
    for lo in range(0, len(examples), chunk):
        group = examples[lo:lo + chunk]
        conds = [e.conditions.without(*drop) if drop else e.conditions for e in group]
        cond = collate(conds, cfg, dtype=model.dtype)
        noise = torch.stack([
            torch.nn.functional.pad(
                sample_noise((c.n_frames, cfg.d_latent), seed, counter=lo + j, dtype=model.dtype),
                (0, 0, 0, cond.n_frames - c.n_frames))
            for j, c in enumerate(conds)])
        x = sample(model, cond, noise,
                   steps=cfg.sample_steps if steps is None else steps,
                   cfg_scale=cfg.cfg_scale if cfg_scale is None else cfg_scale,
                   t_start=cfg.t_start if t_start is None else t_start)
        for j, c in enumerate(conds):
            outs.append(x[j, :c.n_frames].cpu().numpy().astype(np.float32))
    return outs
