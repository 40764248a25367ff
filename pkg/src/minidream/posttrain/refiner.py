"""2x refiner: the base architecture run on the doubled grid, conditioned on the nearest-upsampled
low-resolution image through extra input channels, plus texture-reward feedback."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from ..diffusion import (LatentCodec, StageConfig, _pool2, euler, guided_velocity, initial_noise, train_stage,
                         upsample2)
from ..dit.model import ModelConfig
from ..generator import Generator, Prompt
from ..glyphgen.atlas import GlyphAtlas
from ..glyphgen.dataset import DatasetItem
from ..glyphgen.render import render_text_image
from .reward import TextureRM


def build_refiner(base: Generator) -> Generator:
    """Copy of ``base`` at twice the resolution with channel-concatenated image conditioning.

    The new input columns of the patch embedding start at zero, so before training the refiner
    computes exactly what the base model would on the noisy latent alone.
    """
    bc = base.cfg
    cfg = ModelConfig(**{**bc.to_dict(), "cond_channels": bc.in_channels, "image_size": 2 * bc.image_size})
    ref = Generator(cfg, base.vocab).to(base.dtype)
    src = base.state_dict()
    with torch.no_grad():
        for name, p in ref.state_dict().items():
            if name == "dit.x_embed.weight":
                p.zero_()
                p[:, : src[name].shape[1]] = src[name]
            else:
                p.copy_(src[name])
    return ref


def hi_res_items(items: Sequence[DatasetItem], atlas: GlyphAtlas, factor: int = 2) -> list[DatasetItem]:
    """The same layouts rendered on a canvas ``factor`` times larger; captions are kept."""
    out = []
    for it in items:
        size = it.image.shape[-1] * factor
        out.append(replace(it, image=render_text_image(it.spec.scaled(factor), atlas, size), path=""))
    return out


@dataclass
class RefinerConfig:
    steps: int = 600
    lr: float = 1e-3
    batch_size: int = 8
    cond_noise: float = 0.15
    seed: int = 0


def _cond_builder(noise: float, seed: int):
    gen = torch.Generator().manual_seed(seed)

    def cond(x0_hi: torch.Tensor) -> torch.Tensor:
        # a noisy copy of the low-resolution view, as base samples would be
        lo = _pool2(x0_hi)
        sigma = torch.rand(lo.shape[0], 1, 1, 1, generator=gen, dtype=lo.dtype) * noise
        lo = (lo + sigma * torch.randn(lo.shape, generator=gen, dtype=lo.dtype)).clamp(0.0, 1.0)
        return upsample2(lo)

    return cond


def train_refiner(base: Generator, items_hi: Sequence[DatasetItem], cfg: RefinerConfig = RefinerConfig(),
                  on_log=None) -> tuple[Generator, list[dict]]:
    if not items_hi:
        raise ValueError("hi-res manifest is empty")
    want = 2 * base.cfg.image_size
    bad = [it.image.shape for it in items_hi if it.image.shape[-2:] != (want, want)]
    if bad:
        raise ValueError(f"refiner data must be {want}x{want}, got {bad[0]}")
    ref = build_refiner(base)
    stage = StageConfig(stage="pretrain", steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    res = train_stage(ref, items_hi, stage, image_size=want, on_log=on_log,
                      cond_images=_cond_builder(cfg.cond_noise, cfg.seed))
    return res.model, res.metrics


def _check_lo(refiner: Generator, image_lo: torch.Tensor) -> None:
    if image_lo.dim() != 4 or image_lo.shape[1] != refiner.cfg.in_channels:
        raise ValueError("expected a (B, C, H, W) batch")
    if tuple(image_lo.shape[-2:]) != (refiner.cfg.image_size // 2,) * 2:
        raise ValueError(f"refiner expects {refiner.cfg.image_size // 2}px inputs, got {tuple(image_lo.shape[-2:])}")


def _start(image_lo: torch.Tensor, strength: float, seed: int):
    up = upsample2(image_lo)
    eps = initial_noise(up.shape[0], up.shape[1:], seed, up.dtype)
    return up, (1.0 - strength) * up + strength * eps


@torch.no_grad()
def refine(refiner: Generator, image_lo: torch.Tensor, prompts: Sequence[Prompt], strength: float = 0.5,
           steps: int = 16, w: float = 1.0, seed: int = 0) -> torch.Tensor:
    """Sample from partial noise around the upsampled input; strength 0 returns the upsample itself."""
    _check_lo(refiner, image_lo)
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    up, x = _start(image_lo, strength, seed)
    if strength == 0.0:
        return up.clamp(0.0, 1.0)
    refiner.eval()
    cond = refiner.condition(prompts)
    null = refiner.null_condition(len(prompts)) if w != 1.0 else None
    n = max(1, math.ceil(steps * strength))
    x = euler(lambda z, t: guided_velocity(refiner, z, t, cond, null, w, cond_image=up), x, strength, 0.0, n)
    return x.clamp(0.0, 1.0)


@dataclass
class RefinerRLHFConfig:
    steps: int = 30
    lr: float = 1e-4
    strength: float = 0.5
    t_stop: float = 0.125
    rollout_steps: int = 6
    grad_clip: float = 1.0
    batch_size: int = 8
    seed: int = 0


def refiner_rlhf(refiner: Generator, texture_rm: TextureRM, images_lo: torch.Tensor, prompts: Sequence[Prompt],
                 cfg: RefinerRLHFConfig = RefinerRLHFConfig()) -> tuple[Generator, list[dict]]:
    """Feedback learning of the texture reward through the refiner's last denoising step."""
    _check_lo(refiner, images_lo)
    texture_rm.requires_grad_(False)
    params = [p for p in refiner.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng([cfg.seed, 41])
    rows = []
    for step in range(cfg.steps):
        idx = sorted(rng.choice(len(prompts), size=min(cfg.batch_size, len(prompts)), replace=False).tolist())
        ps = [prompts[i] for i in idx]
        up, x = _start(images_lo[idx], cfg.strength, cfg.seed * 100003 + step)
        cond = refiner.condition(ps)
        with torch.no_grad():
            x = euler(lambda z, t: refiner.velocity(z, t, cond, cond_image=up), x, cfg.strength, cfg.t_stop,
                      cfg.rollout_steps)
        v = refiner.velocity(x, cfg.t_stop, cond, cond_image=up)
        out = (x - cfg.t_stop * v).clamp(0.0, 1.0)
        reward = texture_rm.score(out)
        loss = -reward.mean()
        row = {"step": step, "reward": float(reward.detach().mean()), "skipped": False}
        if not torch.isfinite(loss):
            row["skipped"] = True
            rows.append(row)
            continue
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        if math.isfinite(gnorm):
            opt.step()
        else:
            row["skipped"] = True
        row["grad_norm"] = gnorm
        rows.append(row)
    refiner.eval()
    return refiner, rows
