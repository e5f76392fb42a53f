"""A scikit-learn style facade over the flow network.

``X`` is a sequence of :class:`~mmflow.batching.Conditions` (one per clip)
and ``y`` the matching audio latent arrays of shape ``[n_frames, d_latent]``.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .batching import Conditions
from .config import ModelConfig, validate_config
from .dataset import Example
from .flow import Trainer
from .manifest import SampleManifestRecord
from .model import FlowNetwork
from .rng import derive_key

log = logging.getLogger(__name__)


def check_conditions(X, cfg: ModelConfig) -> list[Conditions]:
    """Validate a sequence of per-clip conditions against ``cfg``."""
    if isinstance(X, Conditions):
        raise TypeError("expected a sequence of Conditions, got a single Conditions")
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    for i, c in enumerate(X):
        if not isinstance(c, Conditions):
            raise TypeError(f"X[{i}] is {type(c).__name__}, expected Conditions")
        if c.n_frames > cfg.frame_budget:
            raise ValueError(f"X[{i}]: {c.n_frames} latent frames exceed frame_budget")
        for name, width in (("video", cfg.video_dim), ("sync", cfg.sync_dim),
                            ("caption", cfg.text_embed_dim)):
            arr = getattr(c, name)
            if arr is not None and (np.ndim(arr) != 2 or np.shape(arr)[1] != width):
                raise ValueError(f"X[{i}].{name} has shape {np.shape(arr)}, expected [T, {width}]")
    return X


def check_latents(y, X: Sequence[Conditions], d_latent: int) -> list[np.ndarray]:
    """Validate targets: one finite ``[n_frames, d_latent]`` array per condition."""
    y = [np.asarray(a, dtype=np.float32) for a in y]
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} items but y has {len(y)}")
    for i, (a, c) in enumerate(zip(y, X)):
        if a.shape != (c.n_frames, d_latent):
            raise ValueError(f"y[{i}] has shape {a.shape}, expected {(c.n_frames, d_latent)}")
        if not np.isfinite(a).all():
            raise ValueError(f"y[{i}] contains non-finite values")
    return y


class FlowMatchingGenerator(BaseEstimator):
    """Train the flow network on (conditions, latents) pairs and sample new latents.

    Parameters
    ----------
    config : ModelConfig, optional
        Network and optimisation settings; defaults to ``ModelConfig()``.
    n_steps : int
        Optimiser steps taken by :meth:`fit`.
    lr : float, optional
        Constant learning rate replacing the warmup/decay schedule.
    sample_steps, cfg_scale : optional
        Overrides for the sampler used by :meth:`predict`.
    random_state : int, optional
        Seed for initialisation, batching, noise and dropout draws; defaults
        to ``config.seed``.
    """

    def __init__(self, config: Optional[ModelConfig] = None, n_steps: int = 1000,
                 lr: Optional[float] = None, sample_steps: Optional[int] = None,
                 cfg_scale: Optional[float] = None, random_state: Optional[int] = None):
        self.config = config
        self.n_steps = n_steps
        self.lr = lr
        self.sample_steps = sample_steps
        self.cfg_scale = cfg_scale
        self.random_state = random_state

    def _resolved_config(self) -> ModelConfig:
        cfg = self.config if self.config is not None else ModelConfig()
        if self.random_state is not None:
            cfg = cfg.replace(seed=int(self.random_state))
        validate_config(cfg)
        return cfg

    @staticmethod
    def _examples(X, y) -> list[Example]:
        out = []
        for i, c in enumerate(X):
            rec = SampleManifestRecord(id=f"x{i}", duration_sec=c.duration_sec)
            out.append(Example(record=rec, conditions=c, latents=None if y is None else y[i]))
        return out

    def fit(self, X, y):
        from .training import train_loop

        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        cfg = self._resolved_config()
        X = check_conditions(X, cfg)
        y = check_latents(y, X, cfg.d_latent)
        torch.manual_seed(derive_key(cfg.seed, "train", "init") % (2 ** 63))
        self.config_ = cfg
        self.trainer_ = Trainer(FlowNetwork(cfg), cfg, lr_override=self.lr)
        self.history_ = train_loop(self.trainer_, self._examples(X, y), self.n_steps)
        self.n_steps_ = self.trainer_.step
        log.info("fitted %d steps, last loss %.4g", self.n_steps_,
                 self.history_[-1].loss if self.history_ else float("nan"))
        return self

    @property
    def model_(self) -> FlowNetwork:
        check_is_fitted(self, "trainer_")
        return self.trainer_.model

    def predict(self, X, drop: Sequence[str] = (), use_ema: bool = True) -> list[np.ndarray]:
        """Sample latents for each condition (noise index ``i`` for ``X[i]``)."""
        from .training import ema_model, generate

        check_is_fitted(self, "trainer_")
        X = check_conditions(X, self.config_)
        model = ema_model(self.trainer_) if use_ema else self.trainer_.model
        return generate(model, self._examples(X, None), self.config_, self.config_.seed,
                        drop=drop, steps=self.sample_steps, cfg_scale=self.cfg_scale)

    def score(self, X, y) -> float:
        """Negative CFM loss under fixed evaluation draws (higher is better)."""
        from .training import evaluation_loss

        check_is_fitted(self, "trainer_")
        X = check_conditions(X, self.config_)
        y = check_latents(y, X, self.config_.d_latent)
        return -evaluation_loss(self.trainer_.model, self._examples(X, y), self.config_,
                                self.config_.seed)

    def to_checkpoint(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.to_checkpoint()

    @classmethod
    def from_checkpoint(cls, ckpt, **params) -> "FlowMatchingGenerator":
        est = cls(config=ckpt.config, random_state=ckpt.rng_seed, **params)
        est.config_ = ckpt.config
        est.trainer_ = Trainer.from_checkpoint(ckpt, FlowNetwork(ckpt.config), lr_override=est.lr)
        est.history_ = []
        est.n_steps_ = ckpt.step
        return est
