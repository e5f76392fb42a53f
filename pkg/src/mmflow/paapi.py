"""Rotary position encoding on a shared clock for streams with different frame rates.

Every temporal stream is placed on the audio-latent clock (43 Hz): frame
``i`` of a stream sampled at ``rate`` with start offset ``offset_sec`` sits at
the fractional position ``(offset_sec + i / rate) * 43``. Queries and keys of
temporal streams are rotated by these positions; atemporal streams (caption
tokens) are left untouched, so their logits carry no positional signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .config import AUDIO_LATENT_RATE

REF_RATE = float(AUDIO_LATENT_RATE)


class PositionError(ValueError):
    pass


@dataclass(frozen=True)
class TimeBase:
    rate: float = REF_RATE
    offset_sec: float = 0.0
    temporal: bool = True

    def __post_init__(self):
        if self.temporal and self.rate <= 0:
            raise PositionError("temporal streams need a positive rate")
        if self.offset_sec < 0:
            raise PositionError("offset_sec must be non-negative")


ATEMPORAL = TimeBase(temporal=False)


def phase_positions(tb: TimeBase, length: int, ref_rate: float = REF_RATE) -> torch.Tensor:
    """Float64 positions of ``length`` frames on the reference clock."""
    if not tb.temporal:
        raise PositionError("phase positions are undefined for atemporal streams")
    if length < 1:
        raise PositionError("length must be >= 1")
    idx = torch.arange(length, dtype=torch.float64)
    # (offset * rate + i) * ref / rate keeps integer frames exact: 43 * i / 24 for video
    return (tb.offset_sec * tb.rate + idx) * ref_rate / tb.rate


def rope_angles(positions: torch.Tensor, d_head: int, base: float = 10000.0):
    """cos/sin tables of shape ``[T, d_head // 2]`` (float64)."""
    if d_head % 2:
        raise PositionError(f"d_head must be even, got {d_head}")
    k = torch.arange(d_head // 2, dtype=torch.float64)
    inv_freq = base ** (-2.0 * k / d_head)
    angle = positions.to(torch.float64)[..., None] * inv_freq
    return torch.cos(angle), torch.sin(angle)


def apply_rotation(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive dimension pairs ``(2k, 2k+1)`` of ``x [..., T, d]``."""
    cos = cos.to(x.dtype)
    sin = sin.to(x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    if x.shape[-1] % 2:
        raise PositionError(f"d_head must be even, got {x.shape[-1]}")
    cos, sin = rope_angles(positions, x.shape[-1], base)
    return apply_rotation(x, cos, sin)


def apply_paapi(streams: Sequence[tuple[torch.Tensor, TimeBase]], base: float = 10000.0,
                ref_rate: float = REF_RATE) -> list[torch.Tensor]:
    """Rotate temporal streams on the shared clock; pass atemporal ones through.

    Each feature tensor is ``[..., T, d_head]`` (time on the second-to-last axis).
    """
    out = []
    for feats, tb in streams:
        if not tb.temporal:
            out.append(feats)
            continue
        pos = phase_positions(tb, feats.shape[-2], ref_rate)
        out.append(rope_rotate(feats, pos, base))
    return out
