"""MMDiT backbone: joint image/text attention, per-modality MLPs, QK-Norm, adaLN-Zero."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..textenc import IMAGE, TokenSequence
from .rope import rotate, scaled_rope_coords

TAGS = (
    "color:low", "color:high", "lighting:low", "lighting:high",
    "texture:low", "texture:high", "composition:low", "composition:high",
    "realness:real", "realness:negative",
)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    patch: int = 2
    in_channels: int = 3
    cond_channels: int = 0
    ref_grid: tuple[int, int] = (8, 8)
    l_text_max: int = 40
    l_glyph_max: int = 4
    d_byte: int = 32
    n_enc_blocks: int = 1
    n_glyph_blocks: int = 1
    enc_heads: int = 4
    glyph_heads: int = 2
    n_tags: int = len(TAGS)
    rope_base: float = 100.0
    mlp_ratio: int = 4
    freq_dim: int = 64
    guidance_embed: bool = False
    image_size: int = 16

    def __post_init__(self):
        self.ref_grid = tuple(self.ref_grid)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 4:
            raise ValueError("head dim must be divisible by 4 (2D RoPE splits pairs across two axes)")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.d_model % self.enc_heads or self.d_byte % self.glyph_heads:
            raise ValueError("encoder widths must be divisible by their head counts")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ref_grid"] = list(self.ref_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def patchify_raw(x: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, (H/p)(W/p), C*p*p), raster order, patch features ordered (c, dy, dx)."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"latent {H}x{W} not divisible by patch {p}")
    gh, gw = H // p, W // p
    return x.reshape(B, C, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * p * p)


def unpatchify_raw(tokens: torch.Tensor, p: int, channels: int, H: int, W: int) -> torch.Tensor:
    B = tokens.shape[0]
    gh, gw = H // p, W // p
    return tokens.reshape(B, gh, gw, channels, p, p).permute(0, 3, 1, 4, 2, 5).reshape(B, channels, H, W)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Branch(nn.Module):
    """Per-modality weights of one block: modulation, QKV, QK-Norm, output projection, MLP."""

    def __init__(self, dim: int, head_dim: int, mlp_ratio: int):
        super().__init__()
        self.mod = nn.Linear(dim, 6 * dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.q_norm = RMSNorm(head_dim)
        self.k_norm = RMSNorm(head_dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def qkv_heads(self, x: torch.Tensor, shift, scale, n_heads: int):
        B, N, D = x.shape
        h = modulate(F.layer_norm(x, (D,)), shift, scale)
        q, k, v = self.qkv(h).view(B, N, 3, n_heads, D // n_heads).permute(2, 0, 3, 1, 4)
        return self.q_norm(q), self.k_norm(k), v


def joint_attention(q, k, v, key_mask: torch.Tensor):
    """Softmax attention over all keys allowed by ``key_mask`` (B, L); returns (out, probs)."""
    if not bool(key_mask.any(dim=-1).all()):
        raise ValueError("attention mask excludes every token of a sequence")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~key_mask[:, None, None, :], -torch.finfo(scores.dtype).max)
    probs = torch.softmax(scores, dim=-1)
    return probs @ v, probs


class MMDiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.rope_base = cfg.rope_base
        self.img = Branch(cfg.d_model, cfg.head_dim, cfg.mlp_ratio)
        self.txt = Branch(cfg.d_model, cfg.head_dim, cfg.mlp_ratio)
        self.last_attn: torch.Tensor | None = None
        self.keep_attn = False

    def forward(self, img, txt, c, txt_mask, coords):
        B, N, D = img.shape
        L = txt.shape[1]
        si = self.img.mod(F.silu(c)).chunk(6, dim=-1)
        st = self.txt.mod(F.silu(c)).chunk(6, dim=-1)
        qi, ki, vi = self.img.qkv_heads(img, si[0], si[1], self.n_heads)
        qt, kt, vt = self.txt.qkv_heads(txt, st[0], st[1], self.n_heads)
        qi = rotate(qi, coords, self.rope_base)
        ki = rotate(ki, coords, self.rope_base)
        key_mask = torch.cat([txt_mask, txt_mask.new_ones(B, N)], dim=1)
        out, probs = joint_attention(torch.cat([qt, qi], 2), torch.cat([kt, ki], 2), torch.cat([vt, vi], 2), key_mask)
        if self.keep_attn:
            self.last_attn = probs.detach()
        out = out.transpose(1, 2).reshape(B, L + N, D)
        txt = txt + st[2][:, None] * self.txt.proj(out[:, :L])
        img = img + si[2][:, None] * self.img.proj(out[:, L:])
        txt = txt + st[5][:, None] * self.txt.mlp(modulate(F.layer_norm(txt, (D,)), st[3], st[4]))
        img = img + si[5][:, None] * self.img.mlp(modulate(F.layer_norm(img, (D,)), si[3], si[4]))
        return img, txt


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.mod = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)
        for lin in (self.mod, self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, c):
        shift, scale = self.mod(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(F.layer_norm(x, (x.shape[-1],)), shift, scale))


class ScalarEmbedder(nn.Module):
    """Sinusoidal features of a scalar followed by a 2-layer MLP."""

    def __init__(self, freq_dim: int, dim: int, multiplier: float, zero_out: bool = False):
        super().__init__()
        self.freq_dim = freq_dim
        self.multiplier = multiplier
        self.fc1 = nn.Linear(freq_dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def features(self, s: torch.Tensor) -> torch.Tensor:
        return timestep_embedding(s * self.multiplier, self.freq_dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(self.features(s))))


class MMDiT(nn.Module):
    """Velocity network over a latent grid, conditioned on fused text tokens and a modulation vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.patch, cfg.d_model
        self.x_embed = nn.Linear((cfg.in_channels + cfg.cond_channels) * p * p, d)
        self.txt_in = nn.Linear(d, d)
        self.t_embed = ScalarEmbedder(cfg.freq_dim, d, 1000.0)
        self.pool_embed = nn.Linear(d, d)
        self.tag_embed = nn.Parameter(torch.randn(cfg.n_tags, d) * 0.02)
        self.g_embed = ScalarEmbedder(cfg.freq_dim, d, 100.0, zero_out=True) if cfg.guidance_embed else None
        self.block = nn.ModuleList(MMDiTBlock(cfg) for _ in range(cfg.n_blocks))
        self.final = FinalLayer(d, cfg.in_channels * p * p)

    def patchify(self, x: torch.Tensor) -> TokenSequence:
        p = self.cfg.patch
        gh, gw = x.shape[-2] // p, x.shape[-1] // p
        tokens = self.x_embed(patchify_raw(x, p))
        n = tokens.shape[1]
        coords = scaled_rope_coords(gh, gw, self.cfg.ref_grid).to(x.dtype)
        return TokenSequence(tokens, torch.full((n,), IMAGE, dtype=torch.long),
                             torch.ones(x.shape[0], n, dtype=torch.bool), coords)

    def condition_vector(self, t, pooled, tags, guidance=None):
        c = self.t_embed(t) + self.pool_embed(pooled) + tags @ self.tag_embed
        if self.g_embed is not None:
            if guidance is None:
                guidance = torch.ones_like(t)
            c = c + self.g_embed(guidance)
        return c

    def forward(self, x, t, txt, txt_mask, pooled, tags, guidance=None, cond_image=None):
        cfg = self.cfg
        B, C, H, W = x.shape
        if C != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} latent channels, got {C}")
        if cfg.cond_channels:
            if cond_image is None or cond_image.shape != (B, cfg.cond_channels, H, W):
                raise ValueError("conditioning image missing or wrong shape")
            x = torch.cat([x, cond_image], dim=1)
        if t.dim() == 0:
            t = t.expand(B)
        seq = self.patchify(x)
        c = self.condition_vector(t, pooled, tags, guidance)
        img = seq.embeddings
        txt = self.txt_in(txt)
        for blk in self.block:
            img, txt = blk(img, txt, c, txt_mask, seq.coords)
        out = self.final(img, c)
        return unpatchify_raw(out, cfg.patch, cfg.in_channels, H, W)
