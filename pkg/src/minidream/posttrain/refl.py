"""Reward feedback learning: a no-grad rollout to t_stop, one differentiable denoising step,
and gradient ascent on a weighted sum of rewards through the DiT and the text encoders."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from ..diffusion import LatentCodec, euler, guided_velocity, initial_noise, sample
from ..generator import Generator, Prompt
from ..glyphgen.atlas import GlyphAtlas
from ..glyphgen.dataset import DatasetItem, content_hash
from ..eval.ocr import ocr_match
from ..eval.metrics import text_accuracy
from ..textenc import Vocab
from .preferences import PreferenceRecord
from .reward import RMTrainConfig, evaluate_reward_model, train_reward_model

log = logging.getLogger(__name__)


def ema_update(shadow: Mapping[str, torch.Tensor], params: Mapping[str, torch.Tensor], decay: float) -> dict:
    """decay * shadow + (1 - decay) * params, per tensor."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if set(shadow) != set(params):
        raise ValueError("shadow and params name different tensors")
    out = {}
    for name, s in shadow.items():
        p = params[name]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(p.shape)}")
        out[name] = decay * s + (1.0 - decay) * p.detach()
    return out


class EMA:
    """Shadow copy of a module's parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        self.shadow = ema_update(self.shadow, dict(model.named_parameters()), self.decay)

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            p.copy_(self.shadow[name])


@dataclass
class REFLConfig:
    t_stop: float = 0.25
    rollout_steps: int = 24
    w: float = 2.0
    lr: float = 5e-5
    grad_clip: float = 1.0
    ema_decay: float = 0.9
    train_text_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.t_stop <= 1.0:
            raise ValueError("t_stop must lie in (0, 1]")


def weighted_reward(images: torch.Tensor, prompts: Sequence[Prompt], rms: Sequence, weights: Sequence[float]):
    """(per-image total, {rm label: batch mean}). Text-rendering RMs only score prompts that render text."""
    total = images.new_zeros(images.shape[0])
    parts = {}
    renders = torch.tensor([p.renders_text for p in prompts])
    for i, (rm, wgt) in enumerate(zip(rms, weights)):
        if wgt == 0:
            continue
        r = rm.score(images, prompts)
        if getattr(rm, "dimension", None) == "text_rendering":
            r = torch.where(renders, r, torch.zeros_like(r))
        total = total + wgt * r
        parts[f"{i}:{getattr(rm, 'dimension', type(rm).__name__)}"] = float(r.detach().mean())
    return total, parts


class REFLTrainer:
    """Holds the optimizer and optional EMA across feedback steps. Reward models are frozen."""

    def __init__(self, model: Generator, rms: Sequence, weights: Sequence[float], cfg: REFLConfig = REFLConfig(),
                 codec: LatentCodec = LatentCodec(), grid: tuple[int, int] = (16, 16)):
        if not rms:
            raise ValueError("REFL needs at least one reward model")
        if len(weights) != len(rms) or any(w < 0 for w in weights):
            raise ValueError("one non-negative weight per reward model is required")
        self.model, self.rms, self.weights, self.cfg = model, list(rms), list(weights), cfg
        self.codec, self.grid = codec, grid
        for rm in self.rms:
            if isinstance(rm, torch.nn.Module):
                rm.requires_grad_(False)
        params = model.parameters() if cfg.train_text_encoder else model.dit.parameters()
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.Adam(self.params, lr=cfg.lr, weight_decay=0.0)
        self.ema = EMA(model, cfg.ema_decay) if cfg.ema_decay > 0 else None
        self.steps_taken = 0
        self.incidents: list[dict] = []

    def step(self, prompts: Sequence[Prompt]) -> dict:
        cfg, model = self.cfg, self.model
        row = {"step": self.steps_taken, "skipped": False}
        self.steps_taken += 1
        if all(w == 0 for w in self.weights):
            row["skipped"] = True
            return row
        n = len(prompts)
        x = initial_noise(n, (model.cfg.in_channels, *self.grid), seed=cfg.seed * 100003 + row["step"], dtype=model.dtype)
        with torch.no_grad():
            cond = model.condition(prompts)
            null = model.null_condition(n) if cfg.w != 1.0 else None
            x = euler(lambda z, t: guided_velocity(model, z, t, cond, null, cfg.w), x, 1.0, cfg.t_stop,
                      cfg.rollout_steps)
        cond = model.condition(prompts)
        null = model.null_condition(n) if cfg.w != 1.0 else None
        v = guided_velocity(model, x, torch.full((n,), cfg.t_stop, dtype=x.dtype), cond, null, cfg.w)
        x0 = x - cfg.t_stop * v
        images = self.codec.decode(x0).clamp(0.0, 1.0)
        reward, parts = weighted_reward(images, prompts, self.rms, self.weights)
        loss = -reward.mean()
        row.update(reward=float(reward.detach().mean()), **parts)
        if not torch.isfinite(loss):
            return self._skip(row, "non-finite reward")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip))
        row["grad_norm"] = gnorm
        if not math.isfinite(gnorm):
            self.opt.zero_grad(set_to_none=True)
            return self._skip(row, "non-finite gradient")
        self.opt.step()
        if self.ema is not None:
            self.ema.update(model)
        return row

    def _skip(self, row: dict, reason: str) -> dict:
        row["skipped"] = True
        row["reason"] = reason
        self.incidents.append(row)
        log.warning("REFL step %d skipped: %s", row["step"], reason)
        return row

    def run(self, prompts: Sequence[Prompt], steps: int, batch_size: int = 8) -> list[dict]:
        rng = np.random.default_rng([self.cfg.seed, 31])
        rows = []
        for _ in range(steps):
            idx = rng.choice(len(prompts), size=min(batch_size, len(prompts)), replace=False)
            rows.append(self.step([prompts[int(i)] for i in sorted(idx)]))
        return rows

    def finalize(self) -> Generator:
        """Load the EMA weights (when enabled) into the model and return it."""
        if self.ema is not None:
            self.ema.copy_to(self.model)
        return self.model


def refl_step(model: Generator, prompts: Sequence[Prompt], rms: Sequence, weights: Sequence[float],
              cfg: REFLConfig = REFLConfig(), trainer: REFLTrainer | None = None) -> tuple[Generator, dict]:
    """One feedback step; pass ``trainer`` to keep optimizer state across calls."""
    trainer = trainer or REFLTrainer(model, rms, weights, cfg)
    row = trainer.step(prompts)
    return trainer.model, row


# ---------------------------------------------------------------------------
# iterative refinement with a bad-case-aware text RM

@dataclass
class RefinementConfig:
    suite: Sequence[DatasetItem]
    atlas: GlyphAtlas
    vocab: Vocab
    base_records: Sequence[PreferenceRecord] = ()
    refl: REFLConfig = field(default_factory=REFLConfig)
    refl_steps: int = 10
    batch_size: int = 8
    rm_train: RMTrainConfig = field(default_factory=lambda: RMTrainConfig(steps=200, holdout=0.0))
    sample_steps: int = 32
    sample_w: float = 2.0
    sample_seed: int = 0
    failure_repeats: int = 4
    extra_rms: Sequence = ()
    extra_weights: Sequence[float] = ()


@dataclass
class RefinementResult:
    model: Generator
    text_rm: object
    records: list[PreferenceRecord]
    metrics: list[dict]


def suite_prompts(items: Sequence[DatasetItem]) -> list[Prompt]:
    return [Prompt(it.caption.textual, it.spec.text) for it in items]


def suite_accuracy(model: Generator, items: Sequence[DatasetItem], atlas: GlyphAtlas, steps: int = 32,
                   w: float = 2.0, seed: int = 0) -> tuple[float, torch.Tensor, list[str]]:
    images = sample(model, suite_prompts(items), steps=steps, w=w, seed=seed)
    decoded = [ocr_match(img.numpy(), atlas, it.spec).decoded for it, img in zip(items, images)]
    ra = float(np.mean([text_accuracy(d, it.spec.text) for d, it in zip(decoded, items)]))
    return ra, images, decoded


def failure_records(items, images, decoded, round_idx: int, repeats: int = 1, seed: int = 0) -> list[PreferenceRecord]:
    """OCR mismatches become (clean render wins, model sample loses) text-rendering pairs."""
    rng = np.random.default_rng([seed, round_idx, 37])
    out = []
    for i, (it, img, dec) in enumerate(zip(items, images, decoded)):
        if dec == it.spec.text:
            continue
        bad = img.numpy().astype(np.float32)
        if content_hash(bad) == content_hash(it.image):
            continue
        for j in range(repeats):
            flip = bool(rng.random() < 0.5)
            a, b = (bad, it.image) if flip else (it.image, bad)
            out.append(PreferenceRecord(
                f"r{round_idx}-{i:05d}-{j}", it.caption.textual, f"prefs/{content_hash(a)[:16]}.png",
                f"prefs/{content_hash(b)[:16]}.png", "b" if flip else "a", "text_rendering",
                f"round{round_idx}" if flip else "data", "data" if flip else f"round{round_idx}",
                it.spec.text, a, b))
    return out


def iterative_refinement(model: Generator, text_rm, rounds: int, config: RefinementConfig) -> RefinementResult:
    """Rounds of REFL, failure mining, text-RM retraining on the union, and REFL again."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    cfg = config
    prompts = suite_prompts(cfg.suite)
    records = list(cfg.base_records)
    metrics = []
    rms = [text_rm, *cfg.extra_rms]
    weights = [1.0, *cfg.extra_weights]
    for r in range(rounds):
        ra_before, _, _ = suite_accuracy(model, cfg.suite, cfg.atlas, cfg.sample_steps, cfg.sample_w, cfg.sample_seed)
        trainer = REFLTrainer(model, rms, weights, replace(cfg.refl, seed=cfg.refl.seed + 2 * r))
        rows = trainer.run(prompts, cfg.refl_steps, cfg.batch_size)
        model = trainer.finalize()
        ra_mid, images, decoded = suite_accuracy(model, cfg.suite, cfg.atlas, cfg.sample_steps, cfg.sample_w,
                                                 cfg.sample_seed)
        fails = failure_records(cfg.suite, images, decoded, r, cfg.failure_repeats, cfg.refl.seed)
        records.extend(fails)
        text_recs = [x for x in records if x.dimension == "text_rendering"]
        if len({(x.image_a, x.image_b) for x in text_recs}) >= 2:
            text_rm.requires_grad_(True)
            text_rm = train_reward_model(text_recs, "text_rendering", cfg.vocab, cfg.rm_train, init=text_rm)
            rms[0] = text_rm
        rm_acc = evaluate_reward_model(text_rm, fails) if fails else float("nan")
        trainer = REFLTrainer(model, rms, weights, replace(cfg.refl, seed=cfg.refl.seed + 2 * r + 1))
        rows += trainer.run(prompts, cfg.refl_steps, cfg.batch_size)
        model = trainer.finalize()
        ra_after, _, _ = suite_accuracy(model, cfg.suite, cfg.atlas, cfg.sample_steps, cfg.sample_w, cfg.sample_seed)
        row = {"round": r, "ra_before": ra_before, "ra_mid": ra_mid, "ra_after": ra_after, "failures": len(fails),
               "rm_failure_accuracy": rm_acc, "skipped_steps": sum(bool(x.get("skipped")) for x in rows)}
        log.info("refinement round %s", row)
        metrics.append(row)
    return RefinementResult(model, text_rm, records, metrics)
