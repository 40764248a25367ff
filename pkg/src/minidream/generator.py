"""Text-to-image bundle: vocab, both text encoders, the glyph projector and the MMDiT."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .dit.model import TAGS, MMDiT, ModelConfig
from .glyphgen.render import RenderSpec
from .textenc import (GlyphEncoder, GlyphProjector, SemanticEncoder, TokenSequence, Vocab, encode_chars,
                      encode_ids, pool_prompt, project_and_fuse, quoted_text)


@dataclass(frozen=True)
class Prompt:
    caption: str
    render_text: str | None = None
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.render_text is None:
            object.__setattr__(self, "render_text", quoted_text(self.caption))
        bad = [t for t in self.tags if t not in TAGS]
        if bad:
            raise ValueError(f"unknown tags {bad}")

    @property
    def renders_text(self) -> bool:
        return bool(self.render_text)

    @classmethod
    def from_spec(cls, spec: RenderSpec, caption: str, tags: Sequence[str] = ()) -> "Prompt":
        return cls(caption, spec.text, tuple(tags))


NULL_PROMPT = Prompt("", "", ())


@dataclass
class Conditioning:
    txt: torch.Tensor
    txt_mask: torch.Tensor
    pooled: torch.Tensor
    tags: torch.Tensor
    prompts: tuple[Prompt, ...] = field(default=())

    def __len__(self) -> int:
        return self.txt.shape[0]

    def index(self, idx) -> "Conditioning":
        sel = self.prompts and tuple(self.prompts[i] for i in torch.as_tensor(idx).reshape(-1).tolist())
        return Conditioning(self.txt[idx], self.txt_mask[idx], self.pooled[idx], self.tags[idx], sel or ())

    def detach(self) -> "Conditioning":
        return Conditioning(self.txt.detach(), self.txt_mask, self.pooled.detach(), self.tags, self.prompts)

    @staticmethod
    def cat(items: Sequence["Conditioning"]) -> "Conditioning":
        return Conditioning(
            torch.cat([c.txt for c in items]), torch.cat([c.txt_mask for c in items]),
            torch.cat([c.pooled for c in items]), torch.cat([c.tags for c in items]),
            tuple(p for c in items for p in c.prompts),
        )


def tag_vector(tags: Sequence[str], dtype=torch.float32) -> torch.Tensor:
    v = torch.zeros(len(TAGS), dtype=dtype)
    for t in tags:
        v[TAGS.index(t)] = 1.0
    return v


class Generator(nn.Module):
    """Everything needed to turn prompts plus a noisy latent into a velocity."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        if cfg.vocab_size != len(vocab):
            raise ValueError("config vocab_size does not match the vocab")
        self.cfg = cfg
        self.vocab = vocab
        self.semantic = SemanticEncoder(len(vocab), cfg.d_model, cfg.l_text_max, cfg.n_enc_blocks, cfg.enc_heads)
        self.glyph = GlyphEncoder(len(vocab), cfg.d_byte, cfg.l_glyph_max, cfg.n_glyph_blocks, cfg.glyph_heads)
        self.fuse = GlyphProjector(cfg.d_byte, cfg.d_model)
        self.dit = MMDiT(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.dit.tag_embed.dtype

    def encode_text(self, prompts: Sequence[Prompt]) -> TokenSequence:
        ids, mask = encode_ids(self.vocab, [p.caption for p in prompts], self.cfg.l_text_max)
        gids, gmask = encode_chars(self.vocab, [p.render_text for p in prompts], self.cfg.l_glyph_max)
        sem = self.semantic(ids, mask)
        gly = self.glyph(gids, gmask)
        return project_and_fuse(sem, gly, self.fuse)

    def condition(self, prompts: Sequence[Prompt]) -> Conditioning:
        seq = self.encode_text(prompts)
        tags = torch.stack([tag_vector(p.tags, self.dtype) for p in prompts])
        return Conditioning(seq.embeddings, seq.mask, pool_prompt(seq), tags, tuple(prompts))

    def null_condition(self, n: int) -> Conditioning:
        return self.condition([NULL_PROMPT] * n)

    def velocity(self, x, t, cond: Conditioning, guidance=None, cond_image=None) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        elif t.dim() == 0:
            t = t.expand(x.shape[0])
        if guidance is not None and not torch.is_tensor(guidance):
            guidance = torch.full((x.shape[0],), float(guidance), dtype=x.dtype)
        return self.dit(x, t, cond.txt, cond.txt_mask, cond.pooled, cond.tags, guidance, cond_image)

    forward = velocity

    def clone(self) -> "Generator":
        return copy.deepcopy(self)


def build_generator(cfg: ModelConfig, vocab: Vocab, seed: int = 0) -> Generator:
    torch.manual_seed(seed)
    return Generator(cfg, vocab)
