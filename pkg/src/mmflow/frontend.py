"""Duration-free lyrics / transcript frontend.

Text is normalised to grapheme symbols (Roman scripts) or mapped to phoneme
symbols through a lookup table (other scripts), segmented into vocabulary
tokens by greedy longest match, embedded at width 768, padded to the frame
budget and refined by masked 1-D ConvNeXt-V2 blocks. Tokens are placed one
per frame slot, left-aligned; no duration model is involved.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MAX_ABS_POSITIONS, TEXT_EMBED_DIM

ROMAN_LANGUAGES = frozenset({"en", "de", "es", "fr", "it", "nl", "pt"})
TABLE_LANGUAGES = {"toy": "g2p_toy.tsv"}
WORD_BOUNDARY = "_"
PAD_TOKEN = "<pad>"
_ROMAN_SYMBOLS = frozenset("abcdefghijklmnopqrstuvwxyz0123456789")


class FrontendError(ValueError):
    pass


class BudgetOverflowError(FrontendError):
    pass


@dataclass(frozen=True)
class SymbolSequence:
    symbols: tuple[str, ...]
    language: str


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab_size: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class FrameAlignedText:
    features: torch.Tensor  # [frame_budget, 768]
    mask: torch.Tensor  # [frame_budget] bool


def _read_data(name: str) -> str:
    return resources.files("mmflow.data").joinpath(name).read_text(encoding="utf-8")


def read_g2p_table(path) -> dict[str, str]:
    """Parse a tab-separated ``symbol<TAB>phoneme`` table."""
    return _parse_g2p(Path(path).read_text(encoding="utf-8"))


def _parse_g2p(text: str) -> dict[str, str]:
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise FrontendError(f"g2p table line {lineno}: expected 'symbol<TAB>phoneme'")
        table[parts[0]] = parts[1]
    return table


def bundled_g2p(language: str) -> dict[str, str]:
    return _parse_g2p(_read_data(TABLE_LANGUAGES[language]))


def _strip_accents(ch: str) -> str:
    return "".join(c for c in unicodedata.normalize("NFKD", ch) if not unicodedata.combining(c))


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def normalize_and_phonemize(text: str, language: str,
                            g2p: Optional[dict[str, str]] = None) -> SymbolSequence:
    """Map raw text to grapheme or phoneme symbols.

    Roman-script languages are lowercased, stripped of punctuation and
    accents; other supported languages go through a symbol-to-phoneme
    table (the bundled one unless ``g2p`` is given). Runs of whitespace
    become a single word-boundary symbol.
    """
    if language not in ROMAN_LANGUAGES and language not in TABLE_LANGUAGES:
        raise FrontendError(f"unsupported language tag {language!r}")
    text = unicodedata.normalize("NFKC", text).lower()
    words = ["".join(ch for ch in w if not _is_punct(ch)) for w in text.split()]
    words = [w for w in words if w]
    if not words:
        raise FrontendError("empty input after normalisation")
    roman = language in ROMAN_LANGUAGES
    if not roman and g2p is None:
        g2p = bundled_g2p(language)
    symbols: list[str] = []
    for i, word in enumerate(words):
        if i:
            symbols.append(WORD_BOUNDARY)
        for ch in word:
            if roman:
                for c in _strip_accents(ch):
                    if c not in _ROMAN_SYMBOLS:
                        raise FrontendError(f"symbol {c!r} outside the {language} inventory")
                    symbols.append(c)
            else:
                if ch not in g2p:
                    raise FrontendError(f"no phoneme entry for {ch!r} in the {language} table")
                symbols.append(g2p[ch])
    return SymbolSequence(tuple(symbols), language)


class Vocab:
    """Token inventory; token id is the line index in the vocab file."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise FrontendError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.max_token_chars = max(len(t) for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index.get(PAD_TOKEN, 0)

    @classmethod
    def from_file(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def bundled(cls) -> "Vocab":
        return cls(_read_data("vocab.txt").splitlines())

    @classmethod
    def from_config_value(cls, vocab_file: str) -> "Vocab":
        return cls.from_file(vocab_file) if vocab_file else cls.bundled()


def tokenize(sym: SymbolSequence, vocab: Vocab) -> TokenSequence:
    """Greedy longest-match segmentation of the symbol string into vocab tokens."""
    units = sym.symbols
    for u in units:
        if u not in vocab.index:
            raise FrontendError(f"symbol {u!r} is not in the vocab")
    ids, i = [], 0
    while i < len(units):
        best_j, text = i + 1, units[i]
        joined = units[i]
        for j in range(i + 2, len(units) + 1):
            joined += units[j - 1]
            if len(joined) > vocab.max_token_chars:
                break
            if joined in vocab.index:
                best_j, text = j, joined
        ids.append(vocab.index[text])
        i = best_j
    return TokenSequence(tuple(ids), len(vocab))


def sinusoidal_pe(position: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos absolute encoding (base 10000) for one position."""
    if dim % 2:
        raise FrontendError(f"dim must be even, got {dim}")
    if not 0 <= position < MAX_ABS_POSITIONS:
        raise FrontendError(f"position {position} outside [0, {MAX_ABS_POSITIONS})")
    k = np.arange(dim // 2, dtype=np.float64)
    angle = position / np.power(10000.0, 2.0 * k / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    if dim % 2:
        raise FrontendError(f"dim must be even, got {dim}")
    if n_positions > MAX_ABS_POSITIONS:
        raise FrontendError(f"at most {MAX_ABS_POSITIONS} positions are supported")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    k = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * k / dim)
    table = np.empty((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return torch.from_numpy(table)


class GRN(nn.Module):
    """Global response normalisation with statistics over valid positions only."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: [B, T, C], mask: [B, T]
        valid = torch.where(mask[..., None], x, torch.zeros_like(x))
        # vector_norm has a zero subgradient at 0, where sqrt(sum(x^2)) would give nan
        gx = torch.linalg.vector_norm(valid, dim=1, keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtV2Block(nn.Module):
    def __init__(self, dim: int = TEXT_EMBED_DIM, expansion: int = 4, kernel_size: int = 7):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, expansion * dim)
        self.grn = GRN(expansion * dim)
        self.pwconv2 = nn.Linear(expansion * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x: [B, T, C]; mask: [B, T] with True at real token positions."""
        if x.shape[:2] != mask.shape:
            raise FrontendError(f"shape mismatch: features {tuple(x.shape)}, mask {tuple(mask.shape)}")
        keep = mask[..., None]
        x = torch.where(keep, x, torch.zeros_like(x))
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.norm(h)
        h = F.gelu(self.pwconv1(h))
        h = self.grn(h, mask)
        h = self.pwconv2(h)
        out = x + h
        return torch.where(keep, out, torch.zeros_like(out))


def convnext_block(x: torch.Tensor, mask: torch.Tensor, block: ConvNeXtV2Block) -> torch.Tensor:
    """Apply one masked block to an unbatched ``[T, C]`` matrix."""
    if x.ndim != 2 or mask.ndim != 1 or x.shape[0] != mask.shape[0]:
        raise FrontendError(f"shape mismatch: features {tuple(x.shape)}, mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise FrontendError("mask has no valid positions")
    return block(x[None], mask[None])[0]


class LyricsEncoder(nn.Module):
    """Token ids -> frame-aligned 768-d features.

    Pipeline: embedding lookup, zero the padding, add the absolute sinusoidal
    encoding, then ``n_blocks`` masked ConvNeXt-V2 blocks.
    """

    def __init__(self, vocab_size: int, n_blocks: int = 4, dim: int = TEXT_EMBED_DIM,
                 max_positions: int = MAX_ABS_POSITIONS):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.register_buffer("pe", sinusoidal_table(max_positions, dim).float(), persistent=False)
        self.blocks = nn.ModuleList(ConvNeXtV2Block(dim) for _ in range(n_blocks))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        length = ids.shape[1]
        if length > self.pe.shape[0]:
            raise BudgetOverflowError(f"sequence length {length} exceeds {self.pe.shape[0]} positions")
        x = self.embed(ids)
        x = torch.where(mask[..., None], x, torch.zeros_like(x))
        x = x + self.pe[:length].to(x.dtype)
        x = torch.where(mask[..., None], x, torch.zeros_like(x))
        for block in self.blocks:
            x = block(x, mask)
        return x


def text_to_tokens(text: str, language: str, vocab: Vocab, frame_budget: int,
                   g2p: Optional[dict[str, str]] = None) -> TokenSequence:
    tokens = tokenize(normalize_and_phonemize(text, language, g2p), vocab)
    if len(tokens) > frame_budget:
        raise BudgetOverflowError(
            f"{len(tokens)} tokens exceed the frame budget of {frame_budget}")
    return tokens


def pad_tokens(tokens: TokenSequence, frame_budget: int, pad_id: int = 0):
    if len(tokens) > frame_budget:
        raise BudgetOverflowError(
            f"{len(tokens)} tokens exceed the frame budget of {frame_budget}")
    ids = torch.full((frame_budget,), pad_id, dtype=torch.long)
    ids[:len(tokens)] = torch.tensor(tokens.ids, dtype=torch.long)
    mask = torch.zeros(frame_budget, dtype=torch.bool)
    mask[:len(tokens)] = True
    return ids, mask


def encode_text_frames(text: str, language: str, frame_budget: int, encoder: LyricsEncoder,
                       vocab: Optional[Vocab] = None,
                       g2p: Optional[dict[str, str]] = None) -> FrameAlignedText:
    vocab = vocab or Vocab.bundled()
    tokens = text_to_tokens(text, language, vocab, frame_budget, g2p)
    ids, mask = pad_tokens(tokens, frame_budget, vocab.pad_id)
    features = encoder(ids[None], mask[None])[0]
    return FrameAlignedText(features=features, mask=mask)
