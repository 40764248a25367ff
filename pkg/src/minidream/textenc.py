"""Semantic (caption) and glyph (character) text encoders plus their fusion."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .glyphgen.caption import template_words
from .glyphgen.render import AESTHETIC_DIMS, LEVELS

SPECIALS = ("<pad>", "<bos>", "<eos>", "<real>", "<neg>")
QUOTE = '"'
PAD_ID = 0

# modality codes for TokenSequence.modality
TEXT_SEMANTIC, TEXT_GLYPH, IMAGE = 0, 1, 2

_QUOTED = re.compile(r"\"([^\"]*)\"|'([^']*)'")
_STRIP = ".,;!?。，"


class UnknownTokenError(KeyError):
    def __init__(self, token: str):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"token {self.token!r} is not in the vocabulary"


class Vocab:
    """Token to id map; ids contiguous from 0 with PAD = 0."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    @property
    def pad(self) -> int:
        return PAD_ID

    @property
    def bos(self) -> int:
        return self.index["<bos>"]

    @property
    def eos(self) -> int:
        return self.index["<eos>"]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text)["tokens"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(codepoints: Iterable[str]) -> Vocab:
    tags = [f"{d}:{lv}" for d in AESTHETIC_DIMS for lv in LEVELS]
    words = [w for w in template_words() if w not in tags]
    tokens = [*SPECIALS, QUOTE, *words, *tags, *sorted(set(codepoints))]
    return Vocab(tokens)


def tokenize(caption: str) -> list[str]:
    """Words outside quotes (lower-cased, trailing punctuation stripped); one token per quoted char."""
    out: list[str] = []
    pos = 0
    for m in _QUOTED.finditer(caption):
        out.extend(_words(caption[pos:m.start()]))
        out.append(QUOTE)
        out.extend(m.group(1) if m.group(1) is not None else m.group(2))
        out.append(QUOTE)
        pos = m.end()
    out.extend(_words(caption[pos:]))
    return out


def _words(chunk: str) -> list[str]:
    out = []
    for w in chunk.split():
        w = w.strip(_STRIP).lower()
        if w:
            out.append(w)
    return out


def quoted_text(caption: str) -> str:
    """The first quoted span of a caption, i.e. the text to be rendered ("" if none)."""
    m = _QUOTED.search(caption)
    if m is None:
        return ""
    return m.group(1) if m.group(1) is not None else m.group(2)


def encode_ids(vocab: Vocab, captions: Sequence[str], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Token ids (B, max_len) with BOS/EOS and PAD, plus the boolean validity mask."""
    ids = torch.full((len(captions), max_len), PAD_ID, dtype=torch.long)
    for b, cap in enumerate(captions):
        toks = [vocab.bos, *(vocab.id(t) for t in tokenize(cap)), vocab.eos]
        if len(toks) > max_len:
            raise ValueError(f"caption needs {len(toks)} tokens, limit is {max_len}: {cap!r}")
        ids[b, : len(toks)] = torch.tensor(toks)
    return ids, ids != PAD_ID


def encode_chars(vocab: Vocab, texts: Sequence[str], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.full((len(texts), max_len), PAD_ID, dtype=torch.long)
    for b, text in enumerate(texts):
        if len(text) > max_len:
            raise ValueError(f"render text {text!r} longer than {max_len}")
        if text:
            ids[b, : len(text)] = torch.tensor([vocab.id(c) for c in text])
    return ids, ids != PAD_ID


@dataclass
class TokenSequence:
    """Batched tokens: embeddings (B, L, d), modality (L,), mask (B, L), coords (L, 2) for image tokens."""

    embeddings: torch.Tensor
    modality: torch.Tensor
    mask: torch.Tensor
    coords: torch.Tensor | None = None

    def __post_init__(self):
        L = self.embeddings.shape[1]
        if self.modality.shape != (L,) or self.mask.shape[-1] != L:
            raise ValueError("embeddings, modality and mask lengths differ")
        is_image = bool((self.modality == IMAGE).all()) if L else False
        if (self.coords is not None) != is_image and L:
            raise ValueError("coords must be present exactly for image tokens")

    def __len__(self) -> int:
        return self.embeddings.shape[1]


class EncoderBlock(nn.Module):
    """Pre-norm bidirectional self-attention block with key-padding mask."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / (D // h) ** 0.5
        scores = scores.masked_fill(~mask[:, None, None, :], -torch.finfo(scores.dtype).max)
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x)), approximate="tanh"))

    def zero_(self) -> "EncoderBlock":
        """Make the block an exact identity (zero residual branches)."""
        for lin in (self.proj, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        return self


class SemanticEncoder(nn.Module):
    """Caption encoder: token + learned absolute position embedding, then N pre-norm blocks."""

    def __init__(self, vocab_size: int, dim: int, max_len: int, n_blocks: int = 1, n_heads: int = 4):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.block = nn.ModuleList(EncoderBlock(dim, n_heads) for _ in range(n_blocks))
        nn.init.normal_(self.tok.weight, std=0.02)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> TokenSequence:
        x = self.tok(ids) + self.pos[: ids.shape[1]]
        for blk in self.block:
            x = blk(x, mask)
        modality = torch.full((ids.shape[1],), TEXT_SEMANTIC, dtype=torch.long)
        return TokenSequence(x, modality, mask)


class GlyphEncoder(nn.Module):
    """Character-level encoder: one token per rendered character."""

    def __init__(self, vocab_size: int, dim: int, max_len: int, n_blocks: int = 1, n_heads: int = 2):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.block = nn.ModuleList(EncoderBlock(dim, n_heads) for _ in range(n_blocks))
        nn.init.normal_(self.tok.weight, std=0.02)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> TokenSequence:
        L = ids.shape[1]
        modality = torch.full((L,), TEXT_GLYPH, dtype=torch.long)
        if L == 0:
            return TokenSequence(self.tok.weight.new_zeros(ids.shape[0], 0, self.tok.embedding_dim), modality, mask)
        x = self.tok(ids) + self.pos[:L]
        for blk in self.block:
            x = blk(x, mask)
        return TokenSequence(x, modality, mask)


class GlyphProjector(nn.Module):
    """Two-layer MLP from the glyph width into the semantic width."""

    def __init__(self, d_byte: int, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(d_byte, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def project_and_fuse(semantic: TokenSequence, glyph: TokenSequence, proj: GlyphProjector) -> TokenSequence:
    """Semantic tokens followed by projected glyph tokens."""
    if glyph.embeddings.shape[-1] != proj.fc1.in_features:
        raise ValueError(f"glyph width {glyph.embeddings.shape[-1]} != projector input {proj.fc1.in_features}")
    if semantic.embeddings.shape[-1] != proj.fc2.out_features:
        raise ValueError(f"semantic width {semantic.embeddings.shape[-1]} != projector output {proj.fc2.out_features}")
    if len(glyph) == 0:
        return semantic
    g = proj(glyph.embeddings)
    return TokenSequence(
        torch.cat([semantic.embeddings, g], dim=1),
        torch.cat([semantic.modality, glyph.modality]),
        torch.cat([semantic.mask, glyph.mask], dim=1),
    )


def pool_prompt(seq: TokenSequence) -> torch.Tensor:
    """Mean of the unmasked text-semantic embeddings, per batch row."""
    keep = seq.mask & (seq.modality == TEXT_SEMANTIC)[None, :]
    counts = keep.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("pool_prompt: a sequence has no unmasked semantic tokens")
    w = keep.to(seq.embeddings.dtype)
    return (seq.embeddings * w[..., None]).sum(dim=1) / counts[:, None].to(seq.embeddings.dtype)
