"""Trajectory segmented consistency distillation.

The unit interval is cut into k equal segments. A student jump from t lands on the segment's
lower boundary t_b as x_t - (t - t_b) v_student(x_t, t), which is the identity when t sits on a
boundary. Targets come from a short teacher ODE solve toward t_b followed by an EMA-student jump,
and the segment count shrinks stage by stage until a single segment spans [0, 1].
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import LatentCodec, NumericError, guided_velocity, interpolate, item_prompt, sample
from ..generator import Generator
from ..posttrain.refl import EMA


@dataclass(frozen=True)
class SegmentSchedule:
    stages: tuple[int, ...] = (16, 8, 4, 2, 1)
    steps_per_stage: int = 200

    def __post_init__(self):
        ks = tuple(int(k) for k in self.stages)
        if not ks or any(k < 1 for k in ks):
            raise ValueError("segment counts must be positive")
        if any(a <= b for a, b in zip(ks, ks[1:])):
            raise ValueError("segment counts must strictly decrease")
        if ks[-1] != 1:
            raise ValueError("the final stage must use a single segment")
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be >= 1")
        object.__setattr__(self, "stages", ks)


def segment_boundaries(k: int) -> list[float]:
    """i/k for i = 0..k, each the correctly rounded double."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [i / k for i in range(k + 1)]


def lower_boundary(t: torch.Tensor, k: int) -> torch.Tensor:
    """Largest boundary i/k <= t; a t already on a boundary maps to itself."""
    tt = t.double()
    # tolerance absorbs the one-ulp error of i/k*k landing just below an integer
    idx = torch.floor(tt * k + 1e-9).clamp(0, k)
    return (idx / k).to(t.dtype)


def student_jump(model: Generator, x, t, t_to, cond) -> torch.Tensor:
    gap = (t - t_to).view(-1, *([1] * (x.dim() - 1)))
    return x - gap * model.velocity(x, t, cond)


@torch.no_grad()
def teacher_solve(teacher: Generator, x, t, t_to, cond, null, w: float, steps: int) -> torch.Tensor:
    """Per-sample Euler integration of the guided teacher from t down to t_to."""
    dt = (t - t_to) / steps
    cur = t.clone()
    for _ in range(steps):
        v = guided_velocity(teacher, x, cur, cond, null, w)
        x = x - dt.view(-1, *([1] * (x.dim() - 1))) * v
        cur = cur - dt
    if not torch.isfinite(x).all():
        raise NumericError("non-finite teacher trajectory")
    return x


class Discriminator(nn.Module):
    """Three-layer conv critic on latent states."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(1, 2, 3))


@dataclass
class TSCDLossConfig:
    teacher_w: float = 2.0
    micro_steps: int = 4
    ema_decay: float = 0.95
    adv_weight: float = 0.0
    adv_threshold: float = 0.25
    lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    log_every: int = 50


def tscd_distill(teacher: Generator, student: Generator | None, items: Sequence, schedule: SegmentSchedule = SegmentSchedule(),
                 loss_cfg: TSCDLossConfig = TSCDLossConfig(), codec: LatentCodec = LatentCodec(),
                 on_log=None) -> tuple[Generator, list[dict]]:
    """Run every stage of ``schedule``; returns the distilled student and per-step logs."""
    if not items:
        raise ValueError("distillation needs data")
    cfg = loss_cfg
    teacher.eval()
    teacher.requires_grad_(False)
    student = student if student is not None else copy.deepcopy(teacher).requires_grad_(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 59])
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    lat = codec.encode(torch.from_numpy(np.stack([it.image for it in items])).to(student.dtype))
    opt = torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0)
    ema = EMA(student, cfg.ema_decay)
    ema_model = copy.deepcopy(student).requires_grad_(False)
    disc = d_opt = None
    if cfg.adv_weight > 0:
        disc = Discriminator(student.cfg.in_channels)
        d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    rows = []
    start = time.perf_counter()
    student.train()
    for k in schedule.stages:
        seg = 1.0 / k
        for step in range(schedule.steps_per_stage):
            idx = rng.integers(0, len(items), size=cfg.batch_size)
            prompts = [item_prompt(items[int(i)], "textual", "none") for i in idx]
            x0 = lat[torch.as_tensor(idx)]
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            t = torch.rand(cfg.batch_size, generator=gen, dtype=x0.dtype).clamp(1e-4, 1.0 - 1e-4)
            if not bool(((t >= 0) & (t <= 1)).all()):
                raise NumericError("timestep outside [0, 1]", k=k)
            x_t = interpolate(x0, eps, t)
            t_b = lower_boundary(t, k)
            t_mid = torch.maximum(t_b, t - seg / 2)
            with torch.no_grad():
                tcond = teacher.condition(prompts)
                tnull = teacher.null_condition(len(prompts)) if cfg.teacher_w != 1.0 else None
                x_mid = teacher_solve(teacher, x_t, t, t_mid, tcond, tnull, cfg.teacher_w, cfg.micro_steps)
                ema.copy_to(ema_model)
                target = student_jump(ema_model, x_mid, t_mid, t_b, ema_model.condition(prompts))
                at_b = (t_mid == t_b).view(-1, *([1] * (x_t.dim() - 1)))
                target = torch.where(at_b, x_mid, target)
            pred = student_jump(student, x_t, t, t_b, student.condition(prompts))
            gap = (t - t_b).clamp_min(1e-4).view(-1, *([1] * (x_t.dim() - 1)))
            loss = (((pred - target) / gap) ** 2).mean()
            row = {"stage": "distilled_tscd", "k": k, "step": step, "mse": loss.item()}
            if disc is not None:
                far = (t - t_b) > cfg.adv_threshold
                if bool(far.any()):
                    d_loss = F.relu(1 - disc(target[far])).mean() + F.relu(1 + disc(pred[far].detach())).mean()
                    d_opt.zero_grad(set_to_none=True)
                    d_loss.backward()
                    d_opt.step()
                    g_adv = -disc(pred[far]).mean()
                    loss = loss + cfg.adv_weight * g_adv
                    row["adv"] = g_adv.item()
            if not torch.isfinite(loss):
                raise NumericError("non-finite consistency loss", k=k, step=step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), 1.0)
            opt.step()
            ema.update(student)
            if step % cfg.log_every == 0 or step == schedule.steps_per_stage - 1:
                row["wall_time"] = round(time.perf_counter() - start, 3)
                rows.append(row)
                if on_log:
                    on_log(row)
    student.eval()
    return student, rows


@torch.no_grad()
def few_step_sample(student: Generator, prompts, steps: int = 2, seed: int = 0, grid=(16, 16),
                    codec: LatentCodec = LatentCodec(), renoise: bool = True) -> torch.Tensor:
    """Multistep consistency sampling on an even grid from t=1 to 0, without guidance.

    Each step jumps to t=0 and, with ``renoise``, re-enters the next grid time on the straight
    path toward fresh noise; otherwise it jumps deterministically to the next grid time.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    student.eval()
    n = len(prompts)
    cond = student.condition(prompts)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((n, student.cfg.in_channels, *grid), generator=gen, dtype=student.dtype)
    ts = [1.0 - i / steps for i in range(steps + 1)]
    for a, b in zip(ts[:-1], ts[1:]):
        t = torch.full((n,), a, dtype=x.dtype)
        if renoise:
            x0 = student_jump(student, x, t, torch.zeros_like(t), cond)
            x = x0 if b == 0.0 else (1 - b) * x0 + b * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        else:
            x = student_jump(student, x, t, torch.full_like(t, b), cond)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite state during few-step sampling", t=a)
    return codec.decode(x).clamp(0.0, 1.0)
