"""Reward models: CLIP-style dual towers trained with a ranking loss, an image-only texture
scorer, and a synthetic luminance reward used as an end-to-end oracle."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..textenc import Vocab, encode_chars, encode_ids, quoted_text
from .preferences import DIMENSIONS, PreferenceRecord

log = logging.getLogger(__name__)


def ranking_loss(r_win: torch.Tensor, r_lose: torch.Tensor) -> torch.Tensor:
    """Mean of -log sigmoid(r_win - r_lose)."""
    return F.softplus(-(r_win - r_lose)).mean()


def pairwise_accuracy(r_win: torch.Tensor, r_lose: torch.Tensor) -> float:
    return float((r_win > r_lose).double().mean())


def _luma(images: torch.Tensor) -> torch.Tensor:
    return 0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]


class ImageTower(nn.Module):
    """Three 3x3 convs (7x7 receptive field, one glyph cell) then max+mean pooling."""

    def __init__(self, out_dim: int, width: int = 48):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(6, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.GELU(),
        )
        self.head = nn.Linear(4 * width, out_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # centring on the per-image median colour makes glyph strokes colour-agnostic
        med = images.flatten(2).median(dim=-1).values[..., None, None]
        h = self.conv(torch.cat([images, images - med], dim=1))
        return self.head(torch.cat([h.amax(dim=(2, 3)), h.mean(dim=(2, 3))], dim=1))


class TextTower(nn.Module):
    """Bag of caption words and, pooled separately, the quoted render characters."""

    def __init__(self, vocab_size: int, out_dim: int, max_len: int = 40, max_chars: int = 8):
        super().__init__()
        self.max_len = max_len
        self.max_chars = max_chars
        self.tok = nn.Embedding(vocab_size, out_dim)
        self.char = nn.Embedding(vocab_size, out_dim)
        self.mlp = nn.Sequential(nn.Linear(2 * out_dim, out_dim), nn.GELU(), nn.Linear(out_dim, out_dim))

    @staticmethod
    def _pool(emb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask[..., None].to(emb.dtype)
        return (emb * m).sum(1) / m.sum(1).clamp_min(1.0)

    def forward(self, ids, mask, cids, cmask) -> torch.Tensor:
        return self.mlp(torch.cat([self._pool(self.tok(ids), mask), self._pool(self.char(cids), cmask)], dim=-1))


class RewardModel(nn.Module):
    """reward(image, caption) = cos(img_vec, txt_vec) / tau, so it lies in [-1/tau, 1/tau]."""

    def __init__(self, vocab: Vocab, dimension: str, dim: int = 64, width: int = 32, tau: float = 0.1,
                 max_len: int = 40):
        super().__init__()
        if dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension {dimension!r}")
        self.vocab = vocab
        self.dimension = dimension
        self.tau = tau
        self.image = ImageTower(dim, width)
        self.text = TextTower(len(vocab), dim, max_len)
        self.heldout_accuracy: float | None = None

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image(images), dim=-1)

    def embed_text(self, captions: Sequence[str]) -> torch.Tensor:
        ids, mask = encode_ids(self.vocab, list(captions), self.text.max_len)
        cids, cmask = encode_chars(self.vocab, [quoted_text(c) for c in captions], self.text.max_chars)
        return F.normalize(self.text(ids, mask, cids, cmask), dim=-1)

    def forward(self, images: torch.Tensor, captions: Sequence[str]) -> torch.Tensor:
        return (self.embed_image(images) * self.embed_text(captions)).sum(-1) / self.tau

    def score(self, images: torch.Tensor, prompts) -> torch.Tensor:
        return self(images, [p.caption for p in prompts])


@dataclass
class RMTrainConfig:
    steps: int = 400
    lr: float = 3e-3
    batch_size: int = 64
    holdout: float = 0.2
    seed: int = 0
    dim: int = 64
    width: int = 32
    tau: float = 0.1


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).float()


def split_records(records: Sequence, holdout: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng([seed, 17])
    order = rng.permutation(len(records))
    n_hold = int(round(holdout * len(records))) if len(records) > 1 else 0
    hold = set(order[:n_hold].tolist())
    return ([r for i, r in enumerate(records) if i not in hold], [r for i, r in enumerate(records) if i in hold])


def train_reward_model(records: Sequence[PreferenceRecord], dimension: str, vocab: Vocab,
                       cfg: RMTrainConfig = RMTrainConfig(), init: RewardModel | None = None) -> RewardModel:
    """Fit a dual-tower RM on one dimension's records with the ranking loss.

    The held-out pairwise accuracy lands in ``rm.heldout_accuracy`` (None without a holdout).
    """
    recs = [r for r in records if r.dimension == dimension]
    if not recs:
        raise ValueError(f"no {dimension!r} records")
    pairs = {(r.image_a, r.image_b, r.prompt) for r in recs} | {(r.image_b, r.image_a, r.prompt) for r in recs}
    if len(pairs) <= 2:
        raise ValueError("degenerate preference set: a single comparison cannot train a ranking")
    train, hold = split_records(recs, cfg.holdout, cfg.seed)
    torch.manual_seed(cfg.seed)
    rm = init if init is not None else RewardModel(vocab, dimension, cfg.dim, cfg.width, cfg.tau)
    win = _stack([r.winner_loser[0] for r in train])
    lose = _stack([r.winner_loser[1] for r in train])
    caps = [r.prompt for r in train]
    opt = torch.optim.Adam(rm.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 19])
    rm.train()
    for step in range(cfg.steps):
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        loss = ranking_loss(rm(win[idx], [caps[i] for i in idx]), rm(lose[idx], [caps[i] for i in idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    rm.eval()
    if hold:
        rm.heldout_accuracy = evaluate_reward_model(rm, hold)
        log.info("%s RM held-out pairwise accuracy %.3f on %d pairs", dimension, rm.heldout_accuracy, len(hold))
    return rm


@torch.no_grad()
def evaluate_reward_model(rm: RewardModel, records: Sequence[PreferenceRecord]) -> float:
    win = _stack([r.winner_loser[0] for r in records])
    lose = _stack([r.winner_loser[1] for r in records])
    caps = [r.prompt for r in records]
    return pairwise_accuracy(rm(win, caps), rm(lose, caps))


class LuminanceReward:
    """Synthetic oracle reward: mean luminance of each image."""

    dimension = "aesthetic"

    def score(self, images: torch.Tensor, prompts=None) -> torch.Tensor:
        return _luma(images).mean(dim=(1, 2))


# ---------------------------------------------------------------------------
# texture reward

DEGRADATIONS = ("blur", "downup", "noise")


def degrade(image: torch.Tensor, kind: str, severity: float, gen: torch.Generator | None = None) -> torch.Tensor:
    """Blend ``image`` (C, H, W) toward a degraded copy; severity 0 returns it unchanged."""
    if kind not in DEGRADATIONS:
        raise ValueError(f"unknown degradation {kind!r}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    x = image[None]
    if kind == "blur":
        k = torch.tensor([1.0, 2.0, 1.0], dtype=x.dtype)
        k = (k[:, None] * k[None]) / 16.0
        blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k.expand(x.shape[1], 1, 3, 3), groups=x.shape[1])
        out = x + severity * (blurred - x)
    elif kind == "downup":
        small = F.avg_pool2d(x, 2)
        out = x + severity * (F.interpolate(small, scale_factor=2, mode="bilinear", align_corners=False) - x)
    else:
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        out = x + 0.25 * severity * noise
    return out[0].clamp(0.0, 1.0)


def texture_pairs(images: torch.Tensor, n_per_image: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(clean, degraded) stacks with random kind and severity; identical pairs are dropped."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 23])
    clean, bad = [], []
    for img in images:
        for _ in range(n_per_image):
            kind = DEGRADATIONS[int(rng.integers(0, len(DEGRADATIONS)))]
            sev = float(rng.choice([0.0, rng.uniform(0.3, 1.0)], p=[0.1, 0.9]))
            d = degrade(img, kind, sev, gen)
            if torch.equal(d, img):
                continue
            clean.append(img)
            bad.append(d)
    if not clean:
        raise ValueError("no informative texture pairs")
    return torch.stack(clean), torch.stack(bad)


class TextureRM(nn.Module):
    """Image-only scalar scorer; trained so clean images outscore degraded ones."""

    dimension = "texture"

    def __init__(self, width: int = 32):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
        )
        self.head = nn.Linear(2 * width, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.conv(images)
        return self.head(torch.cat([h.amax(dim=(2, 3)), h.mean(dim=(2, 3))], dim=1))[:, 0]

    def score(self, images: torch.Tensor, prompts=None) -> torch.Tensor:
        return self(images)


def train_texture_rm(clean: torch.Tensor, degraded: torch.Tensor, steps: int = 300, lr: float = 3e-3,
                     batch_size: int = 64, seed: int = 0) -> TextureRM:
    torch.manual_seed(seed)
    rm = TextureRM()
    opt = torch.optim.Adam(rm.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 29])
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(clean), size=min(batch_size, len(clean)), replace=False))
        loss = ranking_loss(rm(clean[idx]), rm(degraded[idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    rm.eval()
    return rm
