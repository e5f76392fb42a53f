"""Per-sample conditioning inputs and their padded, masked batch form."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .conditioning import MODALITIES, ModalityPresence, n_latent_frames
from .config import TEXT_EMBED_DIM, ModelConfig


class BatchError(ValueError):
    pass


@dataclass
class Conditions:
    """Raw conditioning for one clip. ``None`` marks an absent modality."""

    duration_sec: float
    start_sec: int = 0
    caption: Optional[np.ndarray] = None  # [T_c, 768]
    video: Optional[np.ndarray] = None  # [T_v, video_dim] at 24 fps
    sync: Optional[np.ndarray] = None  # [T_s, sync_dim] at 24 fps
    lyrics_ids: Optional[Sequence[int]] = None

    @property
    def presence(self) -> ModalityPresence:
        return ModalityPresence(caption=self.caption is not None, video=self.video is not None,
                                sync=self.sync is not None, lyrics=self.lyrics_ids is not None)

    @property
    def n_frames(self) -> int:
        return n_latent_frames(self.duration_sec)

    def without(self, *modalities: str) -> "Conditions":
        unknown = set(modalities) - set(MODALITIES)
        if unknown:
            raise BatchError(f"unknown modalities {sorted(unknown)}")
        key = {"caption": "caption", "video": "video", "sync": "sync", "lyrics": "lyrics_ids"}
        return dataclasses.replace(self, **{key[m]: None for m in modalities})

    def unconditional(self) -> "Conditions":
        return self.without(*MODALITIES)


@dataclass
class CondBatch:
    start_sec: torch.Tensor  # [B] long
    duration_sec: torch.Tensor  # [B] long, whole seconds (ceil)
    audio_mask: torch.Tensor  # [B, T_a]
    caption: torch.Tensor
    caption_mask: torch.Tensor
    video: torch.Tensor
    video_mask: torch.Tensor
    sync: torch.Tensor
    sync_lengths: torch.Tensor
    lyrics_ids: torch.Tensor
    lyrics_mask: torch.Tensor
    presence: torch.Tensor  # [B, 4] bool, columns in MODALITIES order

    @property
    def n_frames(self) -> int:
        return self.audio_mask.shape[1]

    @property
    def batch_size(self) -> int:
        return self.audio_mask.shape[0]

    def present(self, modality: str) -> torch.Tensor:
        return self.presence[:, MODALITIES.index(modality)]

    def with_presence(self, presence) -> "CondBatch":
        """Copy with presence flags ANDed with ``presence`` (cannot add missing data)."""
        presence = torch.as_tensor(np.asarray(presence), dtype=torch.bool)
        if presence.shape != self.presence.shape:
            raise BatchError(f"presence shape {tuple(presence.shape)} != {tuple(self.presence.shape)}")
        return dataclasses.replace(self, presence=self.presence & presence)

    def unconditional(self) -> "CondBatch":
        return dataclasses.replace(self, presence=torch.zeros_like(self.presence))

    def to(self, dtype: torch.dtype) -> "CondBatch":
        return dataclasses.replace(self, caption=self.caption.to(dtype),
                                   video=self.video.to(dtype), sync=self.sync.to(dtype))

    def select(self, index) -> "CondBatch":
        idx = torch.as_tensor(index, dtype=torch.long)
        return CondBatch(**{f.name: getattr(self, f.name)[idx]
                            for f in dataclasses.fields(self)})


def _pad(arrays, width, dtype):
    """Stack ``[T_i, width]`` arrays (``None`` = absent) into ``[B, T_max, width]`` plus mask."""
    lengths = [0 if a is None else len(a) for a in arrays]
    t_max = max(1, max(lengths))
    out = torch.zeros(len(arrays), t_max, width, dtype=dtype)
    mask = torch.zeros(len(arrays), t_max, dtype=torch.bool)
    for i, a in enumerate(arrays):
        if a is None:
            continue
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[1] != width:
            raise BatchError(f"expected a [T, {width}] matrix, got shape {a.shape}")
        if len(a) == 0:
            raise BatchError("present modality with zero frames")
        out[i, :len(a)] = torch.as_tensor(a, dtype=dtype)
        mask[i, :len(a)] = True
    return out, mask


def collate(conds: Sequence[Conditions], cfg: ModelConfig,
            dtype: torch.dtype = torch.float32, pad_id: int = 0) -> CondBatch:
    if not conds:
        raise BatchError("empty batch")
    for c in conds:
        if math.ceil(c.duration_sec - 1e-9) > cfg.max_seconds:
            raise BatchError(f"duration {c.duration_sec}s exceeds max_seconds={cfg.max_seconds}")
        if not 0 <= c.start_sec < cfg.max_seconds:
            raise BatchError(f"start_sec {c.start_sec} outside [0, {cfg.max_seconds})")
    frames = [c.n_frames for c in conds]
    audio_mask = torch.arange(max(frames))[None, :] < torch.tensor(frames)[:, None]
    caption, caption_mask = _pad([c.caption for c in conds], TEXT_EMBED_DIM, dtype)
    video, video_mask = _pad([c.video for c in conds], cfg.video_dim, dtype)
    sync, sync_mask = _pad([c.sync for c in conds], cfg.sync_dim, dtype)
    any_lyrics = any(c.lyrics_ids is not None for c in conds)
    budget = cfg.frame_budget if any_lyrics else 1
    lyrics_ids = torch.full((len(conds), budget), pad_id, dtype=torch.long)
    lyrics_mask = torch.zeros(len(conds), budget, dtype=torch.bool)
    for i, c in enumerate(conds):
        if c.lyrics_ids is None:
            continue
        n = len(c.lyrics_ids)
        if n == 0:
            raise BatchError("present lyrics with zero tokens")
        if n > budget:
            raise BatchError(f"{n} lyric tokens exceed the frame budget of {budget}")
        lyrics_ids[i, :n] = torch.as_tensor(list(c.lyrics_ids), dtype=torch.long)
        lyrics_mask[i, :n] = True
    presence = torch.tensor([c.presence.as_tuple() for c in conds], dtype=torch.bool)
    return CondBatch(
        start_sec=torch.tensor([c.start_sec for c in conds], dtype=torch.long),
        duration_sec=torch.tensor([math.ceil(c.duration_sec - 1e-9) for c in conds],
                                  dtype=torch.long),
        audio_mask=audio_mask, caption=caption, caption_mask=caption_mask,
        video=video, video_mask=video_mask, sync=sync,
        sync_lengths=sync_mask.sum(dim=1).clamp(min=1),
        lyrics_ids=lyrics_ids, lyrics_mask=lyrics_mask, presence=presence)


def pad_latents(latents: Sequence[np.ndarray], n_frames: int, d_latent: int,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    out = torch.zeros(len(latents), n_frames, d_latent, dtype=dtype)
    for i, x in enumerate(latents):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != d_latent or len(x) > n_frames:
            raise BatchError(f"latent of shape {x.shape} does not fit [{n_frames}, {d_latent}]")
        out[i, :len(x)] = torch.as_tensor(x, dtype=dtype)
    return out
