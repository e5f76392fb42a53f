"""Flow-prediction network: joint-attention blocks over all streams, then audio-only blocks.

Streams and their clocks:

========  ==================  ==========================
stream    input               time base
========  ==================  ==========================
audio     noised latents x_t  43 Hz
video     visual features     24 Hz
caption   text features       atemporal (never rotated)
lyrics    frontend features   43 Hz
========  ==================  ==========================

Every stream keeps its own projections and MLP inside a joint block; the
attention itself runs once over the concatenation of all streams. The audio
stream's AdaLN sites read the per-frame conditioning rows, the other
streams read the shared global vector.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .batching import CondBatch
from .conditioning import ConditionEncoder, GlobalCondition, substitute_absent
from .config import AUDIO_LATENT_RATE, TEXT_EMBED_DIM, VIDEO_RATE, ModelConfig
from .frontend import LyricsEncoder, Vocab
from .paapi import ATEMPORAL, TimeBase, phase_positions, rope_angles, apply_rotation

STREAMS = ("audio", "video", "caption", "lyrics")
TIME_BASES = {
    "audio": TimeBase(rate=AUDIO_LATENT_RATE),
    "video": TimeBase(rate=VIDEO_RATE),
    "caption": ATEMPORAL,
    "lyrics": TimeBase(rate=AUDIO_LATENT_RATE),
}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def layer_norm_plain(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), eps=eps)


class AdaLNSite(nn.Module):
    """Predicts (shift, scale[, gate]) from the conditioning; the gate map starts at zero."""

    def __init__(self, d_cond: int, d_model: int, with_gate: bool = True):
        super().__init__()
        self.d_model = d_model
        self.n_chunks = 3 if with_gate else 2
        self.proj = nn.Linear(d_cond, self.n_chunks * d_model)
        if with_gate:
            with torch.no_grad():
                self.proj.weight[2 * d_model:].zero_()
                self.proj.bias[2 * d_model:].zero_()

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        mod = self.proj(F.silu(cond))
        if mod.ndim == 2:
            mod = mod[:, None, :]
        if mod.shape[-2] not in (1, x.shape[-2]) or x.shape[-1] != self.d_model:
            raise ShapeError(f"cannot modulate {tuple(x.shape)} with cond {tuple(cond.shape)}")
        chunks = mod.chunk(self.n_chunks, dim=-1)
        shift, scale = chunks[0], chunks[1]
        y = layer_norm_plain(x) * (1 + scale) + shift
        return y, (chunks[2] if self.n_chunks == 3 else None)


def adaln_modulate(x: torch.Tensor, cond: torch.Tensor, site: AdaLNSite):
    """``(LN(x) * (1 + scale) + shift, gate)`` for one AdaLN site."""
    return site(x, cond)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     key_mask: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention; ``q,k,v [B, H, S, d]``, ``key_mask [B, S]``."""
    return F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, T, D = x.shape
    return x.view(B, T, n_heads, D // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, H, T, d = x.shape
    return x.transpose(1, 2).reshape(B, T, H * d)


class StreamLayer(nn.Module):
    """One stream's weights inside a joint block.

    A ``pre_only`` layer contributes keys and values to the joint attention
    but produces no output of its own (used for the context streams of the
    last joint block, whose outputs nothing would read).
    """

    def __init__(self, cfg: ModelConfig, pre_only: bool = False):
        super().__init__()
        d = cfg.d_model
        self.pre_only = pre_only
        self.attn_site = AdaLNSite(cfg.d_cond, d, with_gate=not pre_only)
        self.qkv = nn.Linear(d, 3 * d)
        if not pre_only:
            self.out = nn.Linear(d, d)
            self.mlp_site = AdaLNSite(cfg.d_cond, d)
            self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"),
                                     nn.Linear(cfg.mlp_ratio * d, d))


class JointBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, streams=STREAMS, pre_only=()):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.layers = nn.ModuleDict({name: StreamLayer(cfg, name in pre_only) for name in streams})

    def project(self, name, x, cond, rope):
        """Modulate and project one stream; returns rotated ``q, k``, ``v`` and the gate."""
        layer = self.layers[name]
        y, gate = layer.attn_site(x, cond)
        q, k, v = (_split_heads(p, self.n_heads) for p in layer.qkv(y).chunk(3, dim=-1))
        if rope is not None:
            q = apply_rotation(q, *rope)
            k = apply_rotation(k, *rope)
        return q, k, v, gate

    def attention(self, xs: dict, masks: dict, conds: dict, ropes: dict) -> dict:
        names = list(xs)
        projected = [self.project(n, xs[n], conds[n], ropes.get(n)) for n in names]
        q = torch.cat([p[0] for p in projected], dim=2)
        k = torch.cat([p[1] for p in projected], dim=2)
        v = torch.cat([p[2] for p in projected], dim=2)
        key_mask = torch.cat([masks[n] for n in names], dim=1)
        attn = _merge_heads(masked_attention(q, k, v, key_mask))
        lengths = [xs[n].shape[1] for n in names]
        out = {}
        for name, chunk, (_, _, _, gate) in zip(names, attn.split(lengths, dim=1), projected):
            if not self.layers[name].pre_only:
                out[name] = xs[name] + gate * self.layers[name].out(chunk)
        return out

    def forward(self, xs: dict, masks: dict, conds: dict, ropes: dict) -> dict:
        xs = self.attention(xs, masks, conds, ropes)
        out = {}
        for name, x in xs.items():
            layer = self.layers[name]
            y, gate = layer.mlp_site(x, conds[name])
            out[name] = x + gate * layer.mlp(y)
        return out


def joint_attention(block: JointBlock, xs: dict, masks: dict, cond, ropes: Optional[dict] = None,
                    frame_aligned_for: str = "audio") -> dict:
    """Attention half of a joint block over named streams.

    ``cond`` is a :class:`GlobalCondition` (the ``frame_aligned_for`` stream
    reads per-frame rows, the others the shared vector) or a dict of
    per-stream conditioning tensors.
    """
    if isinstance(cond, GlobalCondition):
        conds = {n: (cond.frame_aligned if n == frame_aligned_for else cond.g) for n in xs}
    else:
        conds = cond
    for n in xs:
        if xs[n].shape[:2] != masks[n].shape:
            raise ShapeError(f"stream {n!r}: features {tuple(xs[n].shape)} vs mask {tuple(masks[n].shape)}")
    return block.attention(xs, masks, conds, ropes or {})


class UnimodalAudioBlock(nn.Module):
    """Single-stream block: parallel attention and MLP from one modulated input."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, hidden = cfg.d_model, cfg.mlp_ratio * cfg.d_model
        self.n_heads = cfg.n_heads
        self.hidden = hidden
        self.site = AdaLNSite(cfg.d_cond, d)
        self.in_proj = nn.Linear(d, 3 * d + hidden)
        self.out = nn.Linear(d + hidden, d)

    def forward(self, x, mask, cond, rope=None):
        y, gate = self.site(x, cond)
        d = x.shape[-1]
        qkv, h = self.in_proj(y).split([3 * d, self.hidden], dim=-1)
        q, k, v = (_split_heads(p, self.n_heads) for p in qkv.chunk(3, dim=-1))
        if rope is not None:
            q = apply_rotation(q, *rope)
            k = apply_rotation(k, *rope)
        attn = _merge_heads(masked_attention(q, k, v, mask))
        return x + gate * self.out(torch.cat([attn, F.gelu(h, approximate="tanh")], dim=-1))


def unimodal_audio_block(audio, mask, cond, block: UnimodalAudioBlock, rope=None):
    if audio.shape[:2] != mask.shape:
        raise ShapeError(f"audio {tuple(audio.shape)} vs mask {tuple(mask.shape)}")
    return block(audio, mask, cond, rope)


class FinalLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.site = AdaLNSite(cfg.d_cond, cfg.d_model, with_gate=False)
        self.head = nn.Linear(cfg.d_model, cfg.d_latent)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, cond):
        y, _ = self.site(x, cond)
        return self.head(y)


class FlowNetwork(nn.Module):
    """Velocity field ``v(t, C, x_t)`` over audio latents."""

    def __init__(self, cfg: ModelConfig, vocab_size: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        if vocab_size is None:
            vocab_size = len(Vocab.from_config_value(cfg.vocab_file))
        d = cfg.d_model
        self.in_proj = nn.ModuleDict({
            "audio": nn.Linear(cfg.d_latent, d),
            "video": nn.Linear(cfg.video_dim, d),
            "caption": nn.Linear(TEXT_EMBED_DIM, d),
            "lyrics": nn.Linear(TEXT_EMBED_DIM, d),
        })
        self.cond = ConditionEncoder(cfg)
        self.lyrics = LyricsEncoder(vocab_size, cfg.n_convnext_blocks)
        # only the audio stream leaves the last joint block
        context = tuple(n for n in STREAMS if n != "audio")
        self.joint = nn.ModuleList(
            JointBlock(cfg, pre_only=context if i == cfg.n_joint_layers - 1 else ())
            for i in range(cfg.n_joint_layers))
        self.single = nn.ModuleList(UnimodalAudioBlock(cfg) for _ in range(cfg.n_unimodal_layers))
        self.final = FinalLayer(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.final.head.weight.dtype

    def rope_tables(self, lengths: dict) -> dict:
        tables = {}
        for name, length in lengths.items():
            tb = TIME_BASES[name]
            if tb.temporal:
                pos = phase_positions(tb, length)
                tables[name] = rope_angles(pos, self.cfg.head_dim, self.cfg.rope_base)
        return tables

    def prepare_streams(self, batch: CondBatch):
        """Raw per-stream features and masks with absent modalities replaced by null tokens."""
        null = self.cond.null_embedding
        dtype = self.dtype
        caption, caption_mask = substitute_absent(batch.caption.to(dtype), batch.caption_mask,
                                                  batch.present("caption"), null("caption"))
        video, video_mask = substitute_absent(batch.video.to(dtype), batch.video_mask,
                                              batch.present("video"), null("video"))
        lyr_present = batch.present("lyrics")
        if bool(lyr_present.any()):
            lyr_mask = batch.lyrics_mask & lyr_present[:, None]
            # rows of absent samples get a dummy valid slot so the encoder sees >= 1 position
            enc_mask = torch.where(lyr_present[:, None], lyr_mask, torch.zeros_like(lyr_mask))
            enc_mask[~lyr_present, 0] = True
            lyrics = self.lyrics(batch.lyrics_ids, enc_mask)
        else:
            lyr_mask = torch.zeros_like(batch.lyrics_mask)
            lyrics = torch.zeros(*batch.lyrics_ids.shape, TEXT_EMBED_DIM, dtype=dtype)
        lyrics, lyr_mask = substitute_absent(lyrics, lyr_mask, lyr_present, null("lyrics"))
        return {"caption": (caption, caption_mask), "video": (video, video_mask),
                "lyrics": (lyrics, lyr_mask)}

    def condition(self, t, batch: CondBatch, streams=None) -> GlobalCondition:
        streams = streams or self.prepare_streams(batch)
        caption, caption_mask = streams["caption"]
        video, video_mask = streams["video"]
        return self.cond(t.to(self.dtype), batch.start_sec, batch.duration_sec, caption,
                         caption_mask, video, video_mask, batch.sync.to(self.dtype),
                         batch.sync_lengths, batch.present("sync"), batch.n_frames)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, batch: CondBatch) -> torch.Tensor:
        B, T, C = x_t.shape
        if C != self.cfg.d_latent or (B, T) != tuple(batch.audio_mask.shape):
            raise ShapeError(f"x_t {tuple(x_t.shape)} inconsistent with batch "
                             f"{tuple(batch.audio_mask.shape)} / d_latent {self.cfg.d_latent}")
        t = torch.as_tensor(t, dtype=self.dtype).reshape(-1).expand(B)
        raw = self.prepare_streams(batch)
        gc = self.condition(t, batch, raw)
        raw["audio"] = (x_t.to(self.dtype), batch.audio_mask)

        xs, masks = {}, {}
        for name in STREAMS:
            feats, mask = raw[name]
            h = self.in_proj[name](feats)
            xs[name] = torch.where(mask[..., None], h, torch.zeros_like(h))
            masks[name] = mask
        conds = {n: (gc.frame_aligned if n == "audio" else gc.g) for n in STREAMS}
        ropes = self.rope_tables({n: xs[n].shape[1] for n in STREAMS})

        for block in self.joint:
            xs = block(xs, masks, conds, ropes)
        audio = xs["audio"]
        for block in self.single:
            audio = block(audio, masks["audio"], gc.frame_aligned, ropes["audio"])
        v = self.final(audio, gc.frame_aligned)
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteError("non-finite values in the predicted velocity")
        return v


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    with torch.device("meta"):
        net = FlowNetwork(cfg)
    return {name: tuple(p.shape) for name, p in net.named_parameters()}


def get_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def set_state(model: nn.Module, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    if missing:
        raise KeyError(f"missing parameters {missing}")
    with torch.no_grad():
        for name, p in params.items():
            src = torch.from_numpy(np.asarray(state[name]))
            if tuple(src.shape) != tuple(p.shape):
                raise ShapeError(f"{name}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
