"""Conditional flow matching: objective, optimiser, EMA and the Euler/CFG sampler.

Path and target along the straight noise-to-data line::

    x_t = (1 - t) * x0 + t * x1        u = x1 - x0

The loss is the squared error between predicted and target velocity over
valid (frame, channel) entries only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import rng as rng_mod
from .batching import CondBatch
from .checkpoint import Checkpoint
from .config import ModelConfig
from .model import NonFiniteError, get_state, set_state


class FlowError(ValueError):
    pass


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise FlowError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _broadcast_t(t, x):
    if torch.is_tensor(t) and t.ndim == 1 and x.ndim > 1:
        return t.reshape(-1, *([1] * (x.ndim - 1))).to(x.dtype)
    if isinstance(t, np.ndarray) and t.ndim == 1 and x.ndim > 1:
        return t.reshape(-1, *([1] * (x.ndim - 1)))
    return t


def interpolate(x0, x1, t):
    """``(1 - t) * x0 + t * x1``; a 1-D ``t`` is broadcast over the batch axis."""
    _check_same_shape(x0, x1)
    t = _broadcast_t(t, x0)
    if bool(np.any((np.asarray(t) < 0) | (np.asarray(t) > 1))):
        raise FlowError("t must lie in [0, 1]")
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    _check_same_shape(x0, x1)
    return x1 - x0


def cfm_loss(v_pred: torch.Tensor, u: torch.Tensor, length_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared velocity error over valid entries, pooled across the batch.

    Pooling all valid entries weights every sample by its share of valid
    entries; padded frames contribute neither value nor gradient.
    """
    _check_same_shape(v_pred, u)
    if tuple(length_mask.shape) != tuple(v_pred.shape[:-1]):
        raise FlowError(f"mask {tuple(length_mask.shape)} does not match {tuple(v_pred.shape)}")
    n_valid = int(length_mask.sum()) * v_pred.shape[-1]
    if n_valid == 0:
        raise FlowError("no valid entries in the loss mask")
    keep = length_mask[..., None]
    sq = torch.where(keep, (v_pred - u) ** 2, torch.zeros_like(v_pred))
    return sq.sum() / n_valid


def per_sample_losses(v_pred, u, length_mask) -> torch.Tensor:
    keep = length_mask[..., None]
    sq = torch.where(keep, (v_pred - u) ** 2, torch.zeros_like(v_pred))
    return sq.sum(dim=(1, 2)) / (length_mask.sum(dim=1) * v_pred.shape[-1])


def sample_timestep(rng: np.random.Generator, batch_size: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=batch_size)


def modality_dropout(presence, rng: np.random.Generator, p_drop: float,
                     p_drop_all: float = 0.0) -> np.ndarray:
    """Independently drop each present modality with ``p_drop``; drop all with ``p_drop_all``.

    Both draws are always made so the stream position does not depend on the flags.
    """
    for p in (p_drop, p_drop_all):
        if not 0.0 <= p <= 1.0:
            raise FlowError("dropout probabilities must lie in [0, 1]")
    presence = np.asarray(presence, dtype=bool)
    keep = rng.uniform(size=presence.shape) >= p_drop
    keep_all = rng.uniform(size=presence.shape[:1]) >= p_drop_all
    return presence & keep & keep_all[:, None]


def lr_schedule(step: int, lr_base: float, warmup_steps: int, inv_gamma: float,
                power: float) -> float:
    """Exponential warm-up times inverse-power decay."""
    if step < 0:
        raise FlowError("step must be non-negative")
    warmup = min(1.0, 1.0 - math.exp(-step / warmup_steps))
    return lr_base * warmup * (1.0 + step / inv_gamma) ** (-power)


def schedule_peak_step(warmup_steps: int, inv_gamma: float, power: float) -> float:
    """Step where the schedule peaks; it is nonincreasing afterwards.

    Solves ``exp(-s/w) / w = (1 - exp(-s/w)) * power / (inv_gamma + s)`` by bisection.
    """
    if power == 0:
        return math.inf

    def slope(s):
        e = math.exp(-s / warmup_steps)
        return e / warmup_steps - (1 - e) * power / (inv_gamma + s)

    lo, hi = 0.0, float(warmup_steps)
    while slope(hi) > 0:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if slope(mid) > 0 else (lo, mid)
    return hi


@torch.no_grad()
def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """In place: ``ema = decay * ema + (1 - decay) * params`` for every entry."""
    if not 0.0 <= decay < 1.0:
        raise FlowError("decay must lie in [0, 1)")
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.shape:
            raise FlowError(f"shape mismatch for {name!r}: {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


@dataclass
class OptimizerState:
    """Moments of the decoupled-weight-decay Adam update, plus the EMA weights."""

    step: int
    exp_avg: dict
    exp_avg_sq: dict
    ema: dict
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: torch.nn.Module) -> "OptimizerState":
        named = dict(model.named_parameters())
        return cls(step=0,
                   exp_avg={n: torch.zeros_like(p) for n, p in named.items()},
                   exp_avg_sq={n: torch.zeros_like(p) for n, p in named.items()},
                   ema={n: p.detach().clone() for n, p in named.items()})


@dataclass
class StepResult:
    step: int
    loss: float
    lr: float
    grad_norm: float
    ms: float

    def log_line(self) -> str:
        return (f"step={self.step} loss={self.loss:.6g} lr={self.lr:.6g} "
                f"gnorm={self.grad_norm:.6g} ms={self.ms:.3f}")


@dataclass
class FlowBatch:
    x1: torch.Tensor  # [B, T, C]
    x0: torch.Tensor
    t: torch.Tensor  # [B]
    cond: CondBatch

    @property
    def length_mask(self) -> torch.Tensor:
        return self.cond.audio_mask

    @property
    def x_t(self) -> torch.Tensor:
        return interpolate(self.x0, self.x1, self.t)

    @property
    def u(self) -> torch.Tensor:
        return target_velocity(self.x0, self.x1)


def draw_flow_batch(x1: torch.Tensor, cond: CondBatch, rng: np.random.Generator,
                    cfg: ModelConfig, dropout: bool = True) -> FlowBatch:
    """Draw ``t``, noise and modality dropout from ``rng`` in a fixed order."""
    B = x1.shape[0]
    t = torch.from_numpy(sample_timestep(rng, B)).to(x1.dtype)
    x0 = torch.from_numpy(rng.standard_normal(x1.shape)).to(x1.dtype)
    flags = modality_dropout(cond.presence.numpy(), rng,
                             cfg.p_drop if dropout else 0.0, cfg.p_drop_all if dropout else 0.0)
    return FlowBatch(x1=x1, x0=x0, t=t, cond=cond.with_presence(flags))


def flow_loss(model, fb: FlowBatch) -> torch.Tensor:
    v = model(fb.x_t, fb.t, fb.cond)
    return cfm_loss(v, fb.u, fb.length_mask)


class Trainer:
    """Owns the parameters, optimiser moments and EMA of one model during training."""

    scope = "train"

    def __init__(self, model: torch.nn.Module, cfg: ModelConfig,
                 state: Optional[OptimizerState] = None, seed: Optional[int] = None,
                 lr_override: Optional[float] = None):
        self.model = model
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.state = state or OptimizerState.fresh(model)
        self.lr_override = lr_override

    @property
    def step(self) -> int:
        return self.state.step

    def lr(self, step: Optional[int] = None) -> float:
        if self.lr_override is not None:
            return self.lr_override
        step = self.step if step is None else step
        return lr_schedule(step, self.cfg.lr_base, self.cfg.warmup_steps, self.cfg.inv_gamma,
                           self.cfg.power)

    def step_rng(self) -> np.random.Generator:
        return rng_mod.stream(self.seed, self.scope, "step", self.step)

    def train_step(self, x1: torch.Tensor, cond: CondBatch, fb: Optional[FlowBatch] = None) -> StepResult:
        start = time.perf_counter()
        if fb is None:
            fb = draw_flow_batch(x1.to(self.model.dtype), cond, self.step_rng(), self.cfg)
        params = dict(self.model.named_parameters())
        for p in params.values():
            p.grad = None
        loss = flow_loss(self.model, fb)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss.item()} at step {self.step}")
        loss.backward()
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for n, p in params.items()}
        gnorm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise NonFiniteError(f"non-finite gradient norm at step {self.step}")
        lr = self.lr()
        self._adamw(params, grads, lr)
        ema_update(self.state.ema, params, self.cfg.ema_decay)
        self.state.step += 1
        result = StepResult(self.state.step, float(loss.detach()), lr, gnorm,
                            1000.0 * (time.perf_counter() - start))
        return result

    @torch.no_grad()
    def _adamw(self, params, grads, lr):
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        k = self.state.step + 1
        c1, c2 = 1 - b1 ** k, 1 - b2 ** k
        for name, p in params.items():
            g = grads[name]
            m, v = self.state.exp_avg[name], self.state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.mul_(1 - lr * self.cfg.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)

    def ema_state(self) -> dict[str, np.ndarray]:
        return {n: e.detach().cpu().numpy().copy() for n, e in self.state.ema.items()}

    def to_checkpoint(self) -> Checkpoint:
        optim = {}
        for n in self.state.exp_avg:
            optim[f"m/{n}"] = self.state.exp_avg[n].detach().cpu().numpy().copy()
            optim[f"v/{n}"] = self.state.exp_avg_sq[n].detach().cpu().numpy().copy()
        return Checkpoint(config=self.cfg, params=get_state(self.model), ema=self.ema_state(),
                          step=self.step, rng_seed=self.seed, rng_counter=self.step, optim=optim)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, model: torch.nn.Module,
                        lr_override: Optional[float] = None) -> "Trainer":
        set_state(model, ckpt.params)
        named = dict(model.named_parameters())

        def tensor_map(table, default):
            return {n: (torch.from_numpy(table[n].copy()).to(p.dtype) if n in table else default(p))
                    for n, p in named.items()}

        state = OptimizerState(
            step=ckpt.step,
            exp_avg=tensor_map({k[2:]: v for k, v in ckpt.optim.items() if k.startswith("m/")},
                               torch.zeros_like),
            exp_avg_sq=tensor_map({k[2:]: v for k, v in ckpt.optim.items() if k.startswith("v/")},
                                  torch.zeros_like),
            ema=tensor_map(ckpt.ema, lambda p: p.detach().clone()))
        if ckpt.rng_counter != ckpt.step:
            raise FlowError("checkpoint rng counter out of sync with its step counter")
        return cls(model, ckpt.config, state=state, seed=ckpt.rng_seed, lr_override=lr_override)


VelocityFn = Callable[[torch.Tensor, float, CondBatch], torch.Tensor]


@torch.no_grad()
def sample(model: VelocityFn, cond: CondBatch, noise: torch.Tensor, steps: int = 25,
           cfg_scale: float = 4.5, t_start: float = 0.05) -> torch.Tensor:
    """Uniform Euler integration from ``t_start`` to 1 with classifier-free guidance.

    The unconditional branch drops every conditioning modality at once.
    With ``cfg_scale == 1`` only the conditional branch is evaluated.
    """
    if steps < 1:
        raise FlowError("steps must be >= 1")
    if not 0.0 <= t_start < 1.0:
        raise FlowError("t_start must lie in [0, 1)")
    uncond = cond.unconditional()
    dt = (1.0 - t_start) / steps
    x = noise
    for i in range(steps):
        t = t_start + i * dt
        v = model(x, t, cond)
        if cfg_scale != 1.0:
            v_u = model(x, t, uncond)
            v = v_u + cfg_scale * (v - v_u)
        x = x + dt * v
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteError(f"non-finite sampler state at step {i}")
    return x


def sample_noise(shape, seed: int, scope: str = "sample", counter: int = 0,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    gen = rng_mod.stream(seed, scope, "noise", counter)
    return torch.from_numpy(gen.standard_normal(shape)).to(dtype)
