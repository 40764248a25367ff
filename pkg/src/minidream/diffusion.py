"""Latent codec, rectified-flow objective, CFG Euler sampler and stage training."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .generator import NULL_PROMPT, Conditioning, Generator, Prompt

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training or sampling produced non-finite values."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message + (f" {diagnostics}" if diagnostics else ""))
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# latent codec

def _pool2(x: torch.Tensor) -> torch.Tensor:
    # pairwise halving keeps encode(decode(z)) == z bit-exact
    a, b = x[..., 0::2, 0::2], x[..., 0::2, 1::2]
    c, d = x[..., 1::2, 0::2], x[..., 1::2, 1::2]
    return 0.5 * (0.5 * (a + b) + 0.5 * (c + d))


def upsample2(x: torch.Tensor) -> torch.Tensor:
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


@dataclass(frozen=True)
class LatentCodec:
    mode: str = "identity"

    def __post_init__(self):
        if self.mode not in ("identity", "pool2"):
            raise ValueError(f"unknown codec mode {self.mode!r}")

    @property
    def factor(self) -> int:
        return 1 if self.mode == "identity" else 2

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images if self.mode == "identity" else _pool2(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents if self.mode == "identity" else upsample2(latents)

    def latent_grid(self, image_size: int) -> tuple[int, int]:
        return image_size // self.factor, image_size // self.factor


# ---------------------------------------------------------------------------
# objective

@dataclass
class TrainBatch:
    x0: torch.Tensor
    prompts: tuple[Prompt, ...]
    t: torch.Tensor
    eps: torch.Tensor
    cond_image: torch.Tensor | None = None


def sample_t(n: int, gen: torch.Generator, kind: str = "uniform", dtype=torch.float32) -> torch.Tensor:
    if kind == "uniform":
        u = torch.rand(n, generator=gen, dtype=dtype)
    elif kind == "logit_normal":
        u = torch.sigmoid(torch.randn(n, generator=gen, dtype=dtype))
    else:
        raise ValueError(f"unknown t sampling {kind!r}")
    return u.clamp(1e-4, 1 - 1e-4)


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    tt = t.view(-1, *([1] * (x0.dim() - 1)))
    return (1 - tt) * x0 + tt * eps


def fm_loss(model, batch: TrainBatch, cond: Conditioning | None = None) -> torch.Tensor:
    """MSE between predicted velocity at x_t = (1-t) x0 + t eps and the target eps - x0."""
    if cond is None:
        cond = model.condition(batch.prompts)
    x_t = interpolate(batch.x0, batch.eps, batch.t)
    v = model.velocity(x_t, batch.t, cond, cond_image=batch.cond_image)
    loss = F.mse_loss(v, batch.eps - batch.x0)
    if not torch.isfinite(loss):
        raise NumericError("non-finite fm_loss", t_min=float(batch.t.min()), t_max=float(batch.t.max()))
    return loss


# ---------------------------------------------------------------------------
# sampling

def guided_velocity(model: Generator, x, t, cond: Conditioning, null: Conditioning | None, w: float,
                    cond_image=None) -> torch.Tensor:
    """CFG velocity v_c + (w - 1)(v_c - v_u); exact v_c at w = 1.

    Guidance-embedded students take w as an input and run a single branch.
    """
    if model.cfg.guidance_embed:
        return model.velocity(x, t, cond, guidance=w, cond_image=cond_image)
    if w == 1.0 or null is None:
        return model.velocity(x, t, cond, cond_image=cond_image)
    B = x.shape[0]
    t = t if torch.is_tensor(t) else torch.full((B,), float(t), dtype=x.dtype)
    ci = None if cond_image is None else torch.cat([cond_image, cond_image])
    v = model.velocity(torch.cat([x, x]), torch.cat([t.expand(B), t.expand(B)]), Conditioning.cat([cond, null]),
                       cond_image=ci)
    v_c, v_u = v[:B], v[B:]
    return v_c + (w - 1.0) * (v_c - v_u)


def euler(velocity: Callable, x: torch.Tensor, t_from: float, t_to: float, steps: int) -> torch.Tensor:
    """Integrate dx/dt = velocity(x, t) from t_from to t_to with uniform Euler steps."""
    ts = torch.linspace(t_from, t_to, steps + 1, dtype=torch.float64).tolist()
    for a, b in zip(ts[:-1], ts[1:]):
        tt = torch.full((x.shape[0],), a, dtype=x.dtype)
        x = x + (b - a) * velocity(x, tt)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite state during sampling", t=a)
    return x


def initial_noise(n: int, shape: Sequence[int], seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn((n, *shape), generator=gen, dtype=dtype)


@torch.no_grad()
def sample(model: Generator, prompts: Sequence[Prompt], steps: int = 32, w: float = 2.0, seed: int = 0,
           grid: tuple[int, int] = (16, 16), codec: LatentCodec = LatentCodec(),
           x1: torch.Tensor | None = None) -> torch.Tensor:
    """Generate images in [0, 1], shape (B, C, H, W), by Euler integration from t=1 to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    model.eval()
    n = len(prompts)
    cond = model.condition(prompts)
    null = None if (w == 1.0 or model.cfg.guidance_embed) else model.null_condition(n)
    if x1 is None:
        x1 = initial_noise(n, (model.cfg.in_channels, *grid), seed, model.dtype)
    x0 = euler(lambda x, t: guided_velocity(model, x, t, cond, null, w), x1, 1.0, 0.0, steps)
    return codec.decode(x0).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# stage training

STAGES = ("pretrain", "ct", "sft")
TAG_POLICIES = ("none", "aesthetic", "aesthetic+realness")


@dataclass
class StageConfig:
    stage: str = "pretrain"
    steps: int = 2000
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    batch_size: int = 8
    p_drop: float = 0.1
    resample: bool = False
    tag_policy: str = "none"
    caption_style: str = "textual"
    quality_percentile: float = 0.0
    negatives: int = 0
    t_sampling: str = "uniform"
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.tag_policy not in TAG_POLICIES:
            raise ValueError(f"unknown tag policy {self.tag_policy!r}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")


def inverse_frequency_weights(cluster_ids: Sequence[int]) -> np.ndarray:
    """Per-item weights proportional to 1/|cluster|, normalised to sum to 1."""
    ids = np.asarray(cluster_ids)
    if ids.size == 0:
        raise ValueError("no items to weight")
    _, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inv].astype(np.float64)
    return w / w.sum()


def item_tags(spec, policy: str) -> tuple[str, ...]:
    if policy == "none":
        return ()
    tags = tuple(spec.aesthetic_tags)
    if policy == "aesthetic+realness":
        tags += ("realness:real" if spec.realness == "real" else "realness:negative",)
    return tags


def item_prompt(item, style: str, policy: str, rng: np.random.Generator | None = None) -> Prompt:
    if style == "mixed":
        style = ("short", "long", "textual")[int(rng.integers(0, 3))] if rng is not None else "textual"
    caption = getattr(item.caption, style)
    return Prompt(caption, item.spec.text, item_tags(item.spec, policy))


def stage_items(items: Sequence, cfg: StageConfig) -> list:
    items = list(items)
    if cfg.stage in ("ct", "sft") and cfg.quality_percentile > 0 and items:
        cut = float(np.percentile([it.quality for it in items], cfg.quality_percentile))
        items = [it for it in items if it.quality >= cut]
    return items


@dataclass
class StageResult:
    model: Generator
    metrics: list[dict] = field(default_factory=list)
    items_used: int = 0


def make_negatives(model: Generator, items: Sequence, n: int, seed: int, codec: LatentCodec,
                   image_size: int, style: str = "textual") -> list:
    """Model-generated copies of random items, marked realness=negative."""
    rng = np.random.default_rng([seed, 11])
    picks = [items[int(i)] for i in rng.integers(0, len(items), size=n)]
    prompts = [item_prompt(it, style, "none") for it in picks]
    imgs = sample(model, prompts, steps=8, w=2.0, seed=seed + 1, grid=codec.latent_grid(image_size), codec=codec)
    out = []
    for it, img in zip(picks, imgs):
        out.append(replace(it, image=img.numpy().astype(np.float32), spec=replace(it.spec, realness="negative")))
    return out


def train_stage(model: Generator, items: Sequence, cfg: StageConfig, codec: LatentCodec = LatentCodec(),
                image_size: int = 16, on_log: Callable[[dict], None] | None = None,
                cond_images: Callable | None = None) -> StageResult:
    """Optimise fm_loss over a stage's view of the manifest; mutates and returns ``model``."""
    data = stage_items(items, cfg)
    if cfg.stage == "sft" and cfg.negatives > 0 and data:
        data = data + make_negatives(model, data, cfg.negatives, cfg.seed, codec, image_size, cfg.caption_style)
    if not data:
        raise ValueError(f"stage {cfg.stage!r} has an empty manifest")

    rng = np.random.default_rng([cfg.seed, 3])
    gen = torch.Generator().manual_seed(cfg.seed)
    weights = inverse_frequency_weights([it.cluster_id for it in data]) if cfg.resample else None
    images = torch.from_numpy(np.stack([it.image for it in data])).to(model.dtype)
    latents = codec.encode(images)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    model.train()
    metrics = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        if cfg.lr_schedule == "cosine":
            lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(cfg.steps, 1))))
            for group in opt.param_groups:
                group["lr"] = lr
        idx = rng.choice(len(data), size=cfg.batch_size, replace=True, p=weights)
        drop = rng.random(cfg.batch_size) < cfg.p_drop
        prompts = tuple(NULL_PROMPT if d else item_prompt(data[i], cfg.caption_style, cfg.tag_policy, rng)
                        for i, d in zip(idx, drop))
        x0 = latents[torch.as_tensor(idx)]
        batch = TrainBatch(
            x0=x0, prompts=prompts,
            t=sample_t(len(idx), gen, cfg.t_sampling, model.dtype),
            eps=torch.randn(x0.shape, generator=gen, dtype=model.dtype),
            cond_image=None if cond_images is None else cond_images(x0),
        )
        loss = fm_loss(model, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
        if not math.isfinite(gnorm):
            raise NumericError("non-finite gradient", step=step, t_min=float(batch.t.min()),
                               t_max=float(batch.t.max()), grad_norm=gnorm)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"stage": cfg.stage, "step": step, "loss": loss.item(), "grad_norm": gnorm,
                   "wall_time": round(time.perf_counter() - start, 3)}
            metrics.append(row)
            if on_log is not None:
                on_log(row)
    model.eval()
    return StageResult(model, metrics, len(data))
