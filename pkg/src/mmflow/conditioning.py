"""Global conditioning: timestep, start/duration, pooled text and video, sync features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .config import AUDIO_LATENT_RATE, TEXT_EMBED_DIM, VIDEO_RATE, ModelConfig

MODALITIES = ("caption", "video", "sync", "lyrics")


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityPresence:
    caption: bool = False
    video: bool = False
    sync: bool = False
    lyrics: bool = False

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(getattr(self, m) for m in MODALITIES)

    @classmethod
    def none(cls) -> "ModalityPresence":
        return cls()


@dataclass
class GlobalCondition:
    g: torch.Tensor  # [..., d_cond]
    frame_aligned: torch.Tensor  # [..., T_audio, d_cond]


def n_latent_frames(duration_sec: float, rate: int = AUDIO_LATENT_RATE) -> int:
    """``ceil(duration * rate)``, robust to float noise like ``8.0 * 43 = 344.00000000000006``."""
    if duration_sec <= 0:
        raise ConditioningError("duration must be positive")
    return int(math.ceil(round(duration_sec * rate, 6)))


def fourier_timestep_embed(t: Union[float, torch.Tensor], d: int,
                           max_period: float = 10000.0, scale: float = 1000.0) -> torch.Tensor:
    """``[sin(half) | cos(half)]`` features of ``scale * t`` at log-spaced frequencies."""
    if d % 2:
        raise ConditioningError(f"embedding width must be even, got {d}")
    t = torch.as_tensor(t, dtype=torch.get_default_dtype() if not torch.is_tensor(t) else None)
    if not torch.is_floating_point(t):
        t = t.to(torch.get_default_dtype())
    if bool(((t < 0) | (t > 1)).any()):
        raise ConditioningError("t must lie in [0, 1]")
    half = d // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    angle = (scale * t.to(torch.float64))[..., None] * freqs
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1).to(t.dtype)


def duration_embeddings(start_sec, duration_sec, table: torch.Tensor) -> torch.Tensor:
    """Rows ``start_sec`` and ``duration_sec - 1`` of ``table``, stacked as ``[..., 2, d]``."""
    start = torch.as_tensor(start_sec, dtype=torch.long)
    dur = torch.as_tensor(duration_sec, dtype=torch.long)
    max_seconds = table.shape[0]
    if bool(((start < 0) | (start >= max_seconds)).any()):
        raise ConditioningError(f"start_sec out of range [0, {max_seconds})")
    if bool(((dur < 1) | (dur > max_seconds)).any()):
        raise ConditioningError(f"duration_sec out of range [1, {max_seconds}]")
    return torch.stack([table[start], table[dur - 1]], dim=-2)


def pool_modality(features: torch.Tensor, mask: torch.Tensor, absent: bool = False) -> torch.Tensor:
    """Mean over valid rows of ``features [..., T, d]``; padding rows never contribute."""
    counts = mask.sum(dim=-1, keepdim=True)
    if bool((counts == 0).any()) and not absent:
        raise ConditioningError("no valid rows to pool and modality not marked absent")
    keep = mask[..., None]
    total = torch.where(keep, features, torch.zeros_like(features)).sum(dim=-2)
    return total / counts.clamp(min=1).to(features.dtype)


def upsample_sync(sync_feats: torch.Tensor, source_rate: float, target_len: int,
                  target_rate: float = AUDIO_LATENT_RATE,
                  lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Linearly resample ``[..., T_s, d]`` onto ``target_len`` frames of the target clock.

    ``lengths`` (batched input only) gives each sequence's valid row count;
    positions past the last valid row are clamped to it.
    """
    if sync_feats.shape[-2] < 1:
        raise ConditioningError("sync features need at least one frame")
    unbatched = sync_feats.ndim == 2
    x = sync_feats[None] if unbatched else sync_feats
    B, T_s, d = x.shape
    if lengths is None:
        lengths = torch.full((B,), T_s, dtype=torch.long)
    last = (lengths.to(torch.float64) - 1).clamp(min=0)[:, None]
    src = torch.arange(target_len, dtype=torch.float64) * source_rate / target_rate
    src = torch.minimum(src[None, :], last)
    lo = torch.floor(src)
    w = (src - lo).to(x.dtype)[..., None]
    i0 = lo.long()
    i1 = torch.minimum(i0 + 1, last.long())
    g0 = torch.gather(x, 1, i0[..., None].expand(B, target_len, d))
    g1 = torch.gather(x, 1, i1[..., None].expand(B, target_len, d))
    out = g0 * (1 - w) + g1 * w
    return out[0] if unbatched else out


def substitute_absent(features: torch.Tensor, mask: torch.Tensor, present: torch.Tensor,
                      null: torch.Tensor):
    """Replace absent entries of a batched stream by a single valid null token.

    features ``[B, T, d]``, mask ``[B, T]``, present ``[B]``. Absent rows get
    the null vector at slot 0 (mask True) and zeros elsewhere (mask False).
    """
    B, T, d = features.shape
    null_seq = torch.cat([null.to(features.dtype).expand(B, 1, d),
                          features.new_zeros(B, T - 1, d)], dim=1)
    null_mask = torch.zeros(B, T, dtype=torch.bool)
    null_mask[:, 0] = True
    p = present[:, None]
    return (torch.where(p[..., None], features, null_seq),
            torch.where(p, mask, null_mask))


class ConditionEncoder(nn.Module):
    """Learnable parameters behind the global and frame-aligned conditioning."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.duration_table = nn.Parameter(torch.randn(cfg.max_seconds, cfg.d_cond) * 0.02)
        self.null = nn.ParameterDict({
            "caption": nn.Parameter(torch.randn(TEXT_EMBED_DIM) * 0.02),
            "video": nn.Parameter(torch.randn(cfg.video_dim) * 0.02),
            "lyrics": nn.Parameter(torch.randn(TEXT_EMBED_DIM) * 0.02),
        })
        d_in = cfg.d_fourier + 2 * cfg.d_cond + TEXT_EMBED_DIM + cfg.video_dim
        self.mlp = nn.Sequential(nn.Linear(d_in, cfg.d_cond), nn.SiLU(),
                                 nn.Linear(cfg.d_cond, cfg.d_cond))
        self.sync_proj = nn.Linear(cfg.sync_dim, cfg.d_cond)

    def null_embedding(self, modality: str) -> torch.Tensor:
        if modality not in self.null:
            raise ConditioningError(f"unknown modality tag {modality!r}")
        return self.null[modality]

    def forward(self, t, start_sec, duration_sec, caption, caption_mask, video, video_mask,
                sync, sync_lengths, sync_present, n_frames: int) -> GlobalCondition:
        """Batched assembly; caption/video must already have absent entries substituted."""
        dtype = self.duration_table.dtype
        parts = [
            fourier_timestep_embed(t.to(dtype), self.cfg.d_fourier),
            duration_embeddings(start_sec, duration_sec, self.duration_table).flatten(-2),
            pool_modality(caption, caption_mask),
            pool_modality(video, video_mask),
        ]
        g = self.mlp(torch.cat(parts, dim=-1))
        up = upsample_sync(sync, VIDEO_RATE, n_frames, lengths=sync_lengths)
        aligned = self.sync_proj(up)
        aligned = torch.where(sync_present[:, None, None], aligned, torch.zeros_like(aligned))
        return GlobalCondition(g=g, frame_aligned=g[:, None, :] + aligned)


def _as_tensor(x, dtype):
    return None if x is None else torch.as_tensor(np.asarray(x), dtype=dtype)


def assemble_condition(encoder: ConditionEncoder, t: float, start_sec: int, duration_sec: float,
                       text_feats=None, video_feats=None, sync_feats=None,
                       presence: Optional[ModalityPresence] = None) -> GlobalCondition:
    """Unbatched convenience wrapper around :class:`ConditionEncoder`.

    ``presence`` defaults to "present iff provided"; a flag set without the
    matching features is an error.
    """
    dtype = encoder.duration_table.dtype
    if presence is None:
        presence = ModalityPresence(caption=text_feats is not None, video=video_feats is not None,
                                    sync=sync_feats is not None)
    for name, feats in (("caption", text_feats), ("video", video_feats), ("sync", sync_feats)):
        if getattr(presence, name) and feats is None:
            raise ConditioningError(f"{name} marked present but no features given")
    cfg = encoder.cfg

    def stream(feats, present, width):
        if present:
            x = _as_tensor(feats, dtype)[None]
        else:
            x = torch.zeros(1, 1, width, dtype=dtype)
        m = torch.ones(x.shape[:2], dtype=torch.bool)
        return x, m, torch.tensor([present])

    cap, cap_m, cap_p = stream(text_feats, presence.caption, TEXT_EMBED_DIM)
    vid, vid_m, vid_p = stream(video_feats, presence.video, cfg.video_dim)
    syn, _, syn_p = stream(sync_feats, presence.sync, cfg.sync_dim)
    cap, cap_m = substitute_absent(cap, cap_m, cap_p, encoder.null_embedding("caption"))
    vid, vid_m = substitute_absent(vid, vid_m, vid_p, encoder.null_embedding("video"))
    n_frames = n_latent_frames(duration_sec)
    out = encoder(torch.tensor([t], dtype=dtype), torch.tensor([start_sec]),
                  torch.tensor([math.ceil(duration_sec - 1e-9)]), cap, cap_m, vid, vid_m,
                  syn, torch.tensor([syn.shape[1]]), syn_p, n_frames)
    return GlobalCondition(g=out.g[0], frame_aligned=out.frame_aligned[0])
