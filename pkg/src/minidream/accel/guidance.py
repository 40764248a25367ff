"""CFG distillation: a student that takes the guidance scale as an input reproduces the
two-branch guided velocity of its teacher in one forward pass."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..diffusion import LatentCodec, NumericError, interpolate, item_prompt, sample_t
from ..dit.model import ModelConfig
from ..generator import Conditioning, Generator
from ..posttrain.refl import EMA


def build_student(teacher: Generator) -> Generator:
    """Teacher weights plus a fresh guidance embedder whose output layer starts at zero."""
    cfg = ModelConfig(**{**teacher.cfg.to_dict(), "guidance_embed": True})
    student = Generator(cfg, teacher.vocab).to(teacher.dtype)
    missing, unexpected = student.load_state_dict(teacher.state_dict(), strict=False)
    if unexpected or any(not k.startswith("dit.g_embed.") for k in missing):
        raise ValueError("teacher and student architectures differ beyond the guidance embedder")
    return student


def cfg_target(teacher, x, t, cond, null, w) -> torch.Tensor:
    """Per-sample guided velocity v_u + w (v_c - v_u); exactly v_c where w == 1."""
    B = x.shape[0]
    v = teacher.velocity(torch.cat([x, x]), torch.cat([t, t]), Conditioning.cat([cond, null]))
    v_c, v_u = v[:B], v[B:]
    ww = w.view(-1, *([1] * (x.dim() - 1)))
    return torch.where(ww == 1.0, v_c, v_u + ww * (v_c - v_u))


@dataclass
class DistillConfig:
    steps: int = 4000
    lr: float = 1e-3
    batch_size: int = 16
    w_range: tuple[float, float] = (1.0, 3.0)
    ema_decay: float = 0.99
    seed: int = 0
    log_every: int = 100


def sample_w(n: int, w_range: tuple[float, float], rng: np.random.Generator) -> torch.Tensor:
    lo, hi = w_range
    if not 1.0 <= lo <= hi:
        raise ValueError(f"invalid guidance range {w_range}")
    w = torch.from_numpy(rng.uniform(lo, hi, size=n)).float()
    # a slice of every batch sits exactly on w=1, where the target is the conditional branch
    w[: max(1, n // 8)] = lo
    return w


def check_w(w: torch.Tensor, w_range: tuple[float, float]) -> None:
    lo, hi = w_range
    if bool(((w < lo) | (w > hi)).any()):
        raise ValueError(f"guidance scale outside the declared range {w_range}")


def distill_batches(items: Sequence, cfg_seed: int, batch_size: int, codec: LatentCodec, dtype):
    """Endless stream of (x_t, t, prompts) drawn from data latents."""
    rng = np.random.default_rng([cfg_seed, 43])
    gen = torch.Generator().manual_seed(cfg_seed + 1)
    lat = codec.encode(torch.from_numpy(np.stack([it.image for it in items])).to(dtype))
    while True:
        idx = rng.integers(0, len(items), size=batch_size)
        x0 = lat[torch.as_tensor(idx)]
        t = sample_t(batch_size, gen, dtype=dtype)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        yield interpolate(x0, eps, t), t, [item_prompt(items[int(i)], "textual", "none") for i in idx]


def cfg_distill(teacher: Generator, items: Sequence, cfg: DistillConfig = DistillConfig(),
                student: Generator | None = None, codec: LatentCodec = LatentCodec(),
                on_log=None) -> tuple[Generator, list[dict]]:
    """Regress student(x_t, t, c, w) onto the teacher's guided velocity over w in ``cfg.w_range``."""
    if not items:
        raise ValueError("distillation needs data")
    teacher.eval()
    teacher.requires_grad_(False)
    student = student if student is not None else build_student(teacher)
    if not student.cfg.guidance_embed:
        raise ValueError("student needs a guidance embedding input")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 47])
    opt = torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0)
    batches = distill_batches(items, cfg.seed, cfg.batch_size, codec, student.dtype)
    ema = EMA(student, cfg.ema_decay) if cfg.ema_decay > 0 else None
    student.train()
    rows = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(cfg.steps, 1))))
        for group in opt.param_groups:
            group["lr"] = lr
        x, t, prompts = next(batches)
        w = sample_w(len(prompts), cfg.w_range, rng)
        check_w(w, cfg.w_range)
        with torch.no_grad():
            target = cfg_target(teacher, x, t, teacher.condition(prompts), teacher.null_condition(len(prompts)), w)
        pred = student.velocity(x, t, student.condition(prompts), guidance=w)
        loss = F.mse_loss(pred, target)
        if not torch.isfinite(loss):
            raise NumericError("non-finite distillation loss", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(student.parameters(), 1.0)
        opt.step()
        if ema is not None:
            ema.update(student)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"stage": "distilled_cfg", "step": step, "loss": loss.item(),
                   "wall_time": round(time.perf_counter() - start, 3)}
            rows.append(row)
            if on_log:
                on_log(row)
    if ema is not None:
        ema.copy_to(student)
    student.eval()
    return student, rows


@torch.no_grad()
def distill_error(teacher: Generator, student: Generator, items: Sequence, w_values: Sequence[float],
                  seed: int = 1000, n: int = 32, codec: LatentCodec = LatentCodec()) -> float:
    """||student - CFG(teacher)|| / ||CFG(teacher)|| over held-out (x_t, t, w) draws."""
    x, t, prompts = next(distill_batches(items, seed, n, codec, student.dtype))
    rng = np.random.default_rng([seed, 53])
    w = torch.tensor(rng.choice(np.asarray(w_values, dtype=np.float64), size=n), dtype=x.dtype)
    target = cfg_target(teacher, x, t, teacher.condition(prompts), teacher.null_condition(n), w)
    pred = student.velocity(x, t, student.condition(prompts), guidance=w)
    return float((pred - target).norm() / target.norm())

