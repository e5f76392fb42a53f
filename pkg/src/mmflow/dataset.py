"""Feature providers and manifest-to-batch loading.

The pretrained caption encoder is out of scope; :class:`HashingTextEncoder`
stands in for it with deterministic per-word 768-d vectors so that caption
strings in a manifest still produce a variable-length text stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arrays import load_feature_array
from .batching import Conditions
from .conditioning import n_latent_frames
from .config import TEXT_EMBED_DIM, ModelConfig
from .frontend import Vocab, text_to_tokens
from .manifest import SampleManifestRecord
from .rng import stream


class DatasetError(ValueError):
    pass


class HashingTextEncoder:
    def __init__(self, dim: int = TEXT_EMBED_DIM):
        self.dim = dim

    def word_vector(self, word: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim).astype(np.float32)

    def encode(self, text: str) -> Optional[np.ndarray]:
        words = text.lower().split()
        if not words:
            return None
        return np.stack([self.word_vector(w) for w in words])


@dataclass
class Example:
    record: SampleManifestRecord
    conditions: Conditions
    latents: Optional[np.ndarray]


def _resolve(root: Path, path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else root / p


def record_to_example(record: SampleManifestRecord, cfg: ModelConfig, root,
                      text_encoder: Optional[HashingTextEncoder] = None,
                      vocab: Optional[Vocab] = None, load_latents: bool = True) -> Example:
    root = Path(root)
    text_encoder = text_encoder or HashingTextEncoder()
    vocab = vocab or Vocab.from_config_value(cfg.vocab_file)
    video = sync = latents = None
    if record.video_feats_path:
        video = load_feature_array(_resolve(root, record.video_feats_path), cfg.video_dim)
    if record.sync_feats_path:
        sync = load_feature_array(_resolve(root, record.sync_feats_path), cfg.sync_dim)
    caption = text_encoder.encode(record.caption) if record.caption else None
    lyrics_ids = None
    if record.lyrics:
        lyrics_ids = text_to_tokens(record.lyrics, record.language, vocab, cfg.frame_budget).ids
    if load_latents and record.audio_latents_path:
        latents = load_feature_array(_resolve(root, record.audio_latents_path), cfg.d_latent)
        expected = n_latent_frames(record.duration_sec)
        if len(latents) != expected:
            raise DatasetError(f"record {record.id!r}: {len(latents)} latent frames, "
                               f"expected {expected} for {record.duration_sec}s")
    cond = Conditions(duration_sec=record.duration_sec, caption=caption, video=video, sync=sync,
                      lyrics_ids=lyrics_ids)
    return Example(record=record, conditions=cond, latents=latents)


def load_examples(records: Sequence[SampleManifestRecord], cfg: ModelConfig, root,
                  load_latents: bool = True) -> list[Example]:
    encoder = HashingTextEncoder()
    vocab = Vocab.from_config_value(cfg.vocab_file)
    return [record_to_example(r, cfg, root, encoder, vocab, load_latents) for r in records]


def batch_indices(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for training step ``step``: consecutive slices of per-epoch permutations.

    Depends only on ``(n_items, batch_size, seed, step)``, so resuming at any
    step reproduces the uninterrupted order. A batch larger than the dataset
    is clipped to one full permutation.
    """
    size = min(batch_size, n_items)
    out: list[int] = []
    pos = step * size
    while len(out) < size:
        epoch, offset = divmod(pos, n_items)
        perm = stream(seed, "train", "order", epoch).permutation(n_items)
        take = min(size - len(out), n_items - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)
