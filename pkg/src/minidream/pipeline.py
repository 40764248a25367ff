"""Config-driven entry points shared by the CLI and the acceptance suite. Every random stream is
a named sub-seed of ``RunConfig.seed``."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .accel import guidance, quant, tscd
from .config import RunConfig, build, subseed
from .diffusion import StageConfig, sample, train_stage
from .dit.model import ModelConfig
from .eval.suite import SuiteItem, build_suite, model_sampler, run_suite
from .generator import Generator, Prompt, build_generator
from .glyphgen.atlas import GlyphAtlas, default_atlases, merge_atlases
from .glyphgen.dataset import DatasetItem, generate_items
from .posttrain import preferences, refiner, refl, reward
from .textenc import Vocab, build_vocab

log = logging.getLogger(__name__)
OnLog = Callable[[dict], None] | None


@dataclass
class World:
    """Atlases, vocabulary and training items for one config."""
    latin: GlyphAtlas
    cjk: GlyphAtlas
    vocab: Vocab
    items: list[DatasetItem]

    @property
    def atlas(self) -> GlyphAtlas:
        return merge_atlases(self.latin, self.cjk)

    @property
    def suite(self) -> list[SuiteItem]:
        return build_suite(self.items)


def make_atlases(cfg: RunConfig) -> tuple[GlyphAtlas, GlyphAtlas]:
    return default_atlases(subseed(cfg.seed, "atlas"))


def make_world(cfg: RunConfig, items: Sequence[DatasetItem] | None = None) -> World:
    latin, cjk = make_atlases(cfg)
    vocab = build_vocab(latin.codepoints + cjk.codepoints)
    if items is None:
        d = cfg.data
        items = generate_items(d.n_items, latin, cjk, seed=subseed(cfg.seed, "data"), image_size=d.image_size,
                               max_chars=d.max_chars, cjk_fraction=d.cjk_fraction)
    return World(latin, cjk, vocab, list(items))


def model_config(cfg: RunConfig, vocab: Vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), image_size=cfg.data.image_size, **cfg.model.model_dump())


def stage_config(cfg: RunConfig, stage: str) -> StageConfig:
    return build(StageConfig, cfg.stage(stage), seed=subseed(cfg.seed, f"train/{stage}"))


def train(cfg: RunConfig, world: World, stage: str, init: Generator | None = None, on_log: OnLog = None) -> Generator:
    """One stage of the schedule; ``pretrain`` starts from a fresh seeded init, later stages need ``init``."""
    if init is None:
        if stage != "pretrain":
            raise ValueError(f"stage {stage!r} needs an initial checkpoint")
        init = build_generator(model_config(cfg, world.vocab), world.vocab, seed=subseed(cfg.seed, "init"))
    res = train_stage(init, world.items, stage_config(cfg, stage), image_size=cfg.data.image_size, on_log=on_log)
    return res.model.eval()


def evaluate(cfg: RunConfig, model: Generator, world: World, suite: Sequence[SuiteItem] | None = None,
             sampler=None):
    grid = (cfg.data.image_size, cfg.data.image_size)
    sampler = sampler or model_sampler(model, cfg.eval.steps, cfg.eval.w, grid)
    return run_suite(sampler, world.suite if suite is None else suite, world.atlas,
                     seed=subseed(cfg.seed, "eval"), batch_size=cfg.eval.batch_size)


def tscd_sampler(cfg: RunConfig, model: Generator):
    grid = (cfg.data.image_size, cfg.data.image_size)
    return lambda prompts, seed: tscd.few_step_sample(model, prompts, cfg.accel.few_steps, seed=seed, grid=grid)


def generate(cfg: RunConfig, model: Generator, prompts: Sequence[Prompt], provenance: str = "pretrain",
             steps: int | None = None, w: float | None = None, seed: int | None = None) -> torch.Tensor:
    seed = subseed(cfg.seed, "sample") if seed is None else seed
    grid = (cfg.data.image_size, cfg.data.image_size)
    if provenance == "distilled_tscd":
        return tscd.few_step_sample(model, prompts, steps or cfg.accel.few_steps, seed=seed, grid=grid)
    return sample(model, prompts, steps=steps or cfg.eval.steps, w=cfg.eval.w if w is None else w, seed=seed,
                  grid=grid)


# ---------------------------------------------------------------------------
# post-training

def preference_data(cfg: RunConfig, world: World) -> list[preferences.PreferenceRecord]:
    p = cfg.rlhf.preferences
    d = cfg.data
    pool = generate_items(p.n_items, world.latin, world.cjk, seed=subseed(cfg.seed, "prefs/items"),
                          image_size=d.image_size, max_chars=d.max_chars, cjk_fraction=d.cjk_fraction)
    return preferences.synthesize_preferences(
        pool, world.atlas, preferences.PerturbationConfig(dimensions=("text_rendering",), per_item=p.per_item),
        seed=subseed(cfg.seed, "prefs"), image_size=d.image_size)


def text_reward_model(cfg: RunConfig, world: World, records) -> reward.RewardModel:
    rm_cfg = build(reward.RMTrainConfig, cfg.rlhf.rm, seed=subseed(cfg.seed, "rm"))
    return reward.train_reward_model(records, "text_rendering", world.vocab, rm_cfg)


def rlhf(cfg: RunConfig, world: World, model: Generator, records, text_rm: reward.RewardModel) -> refl.RefinementResult:
    r = cfg.rlhf
    rc = refl.RefinementConfig(
        suite=world.items, atlas=world.atlas, vocab=world.vocab, base_records=list(records),
        refl=build(refl.REFLConfig, r.refl, seed=subseed(cfg.seed, "refl")), refl_steps=r.refl_steps,
        batch_size=r.batch_size, rm_train=build(reward.RMTrainConfig, r.rm, seed=subseed(cfg.seed, "rm/rounds")),
        sample_steps=cfg.eval.steps, sample_w=cfg.eval.w, sample_seed=subseed(cfg.seed, "eval"))
    return refl.iterative_refinement(model, text_rm, r.rounds, rc)


def train_refiner(cfg: RunConfig, world: World, base: Generator, on_log: OnLog = None):
    hi = refiner.hi_res_items(world.items, world.atlas)
    rcfg = build(refiner.RefinerConfig, cfg.refine.train, seed=subseed(cfg.seed, "refiner"))
    return refiner.train_refiner(base, hi, rcfg, on_log=on_log)


# ---------------------------------------------------------------------------
# acceleration

def distill_cfg(cfg: RunConfig, world: World, teacher: Generator, on_log: OnLog = None):
    dcfg = build(guidance.DistillConfig, cfg.accel.cfg, seed=subseed(cfg.seed, "distill/cfg"))
    return guidance.cfg_distill(teacher, world.items, dcfg, on_log=on_log)


def distill_tscd(cfg: RunConfig, world: World, teacher: Generator, on_log: OnLog = None):
    a = cfg.accel
    schedule = tscd.SegmentSchedule(tuple(a.tscd_schedule.stages), a.tscd_schedule.steps_per_stage)
    lcfg = build(tscd.TSCDLossConfig, a.tscd, seed=subseed(cfg.seed, "distill/tscd"))
    return tscd.tscd_distill(teacher, None, world.items, schedule, lcfg, on_log=on_log)


def quantize(cfg: RunConfig, world: World, model: Generator) -> tuple[Generator, quant.QuantPlan, dict]:
    """Fake-quantized model, its plan (with final scales) and a small report."""
    q = cfg.accel.quant
    calib = quant.calibration_batches(world.items, q.calib_batches, q.calib_batch_size,
                                      seed=subseed(cfg.seed, "quant/calib"))
    held = quant.calibration_batches(world.items, q.calib_batches, q.calib_batch_size,
                                     seed=subseed(cfg.seed, "quant/heldout"))
    info: dict = {}
    if q.plan == "search":
        plan, info = quant.quant_sensitivity_search(model, calib, q.bit_options, budget=q.budget, smooth=q.smooth)
    else:
        act = quant.activation_maxima(model, calib) if q.smooth else None
        plan = quant.uniform_plan(model, 8, "per-channel", act)
    qmodel = quant.apply_quant(model, plan)
    history = []
    if q.finetune_steps:
        qmodel, history = quant.finetune_scales(qmodel, calib, q.finetune_steps, q.finetune_lr)
    plan = quant.plan_with_scales(qmodel, plan)
    base_held = quant.calib_loss(model, held)
    report = {
        "plan": q.plan,
        "bits": {str(b): sum(lp.bits == b for lp in plan.layers.values()) for b in quant.BITS},
        "heldout_loss_fp": base_held,
        "heldout_loss_quant": quant.calib_loss(qmodel, held),
        "max_roundoff_violation": max((quant.roundoff_violation(l) for l in quant.quant_layers(qmodel).values()),
                                      default=float("-inf")),
        "finetune_history": history,
        "predicted_increase": plan.predicted_increase,
    }
    if "base_loss" in info:
        report["calib_loss_fp"] = info["base_loss"]
    return qmodel, plan, report


def mean_luminance(images: torch.Tensor) -> float:
    return float(reward.LuminanceReward().score(images).mean()) if images.numel() else float("nan")


def seeds_used(cfg: RunConfig) -> dict[str, int]:
    names = ["atlas", "data", "init", "eval", "sample", "prefs", "rm", "refl", "refiner", "distill/cfg",
             "distill/tscd", "quant/calib"] + [f"train/{s.stage}" for s in cfg.stages]
    return {n: subseed(cfg.seed, n) for n in names}


__all__ = ["World", "make_world", "model_config", "stage_config", "train", "evaluate", "generate", "tscd_sampler",
           "preference_data", "text_reward_model", "rlhf", "train_refiner", "distill_cfg", "distill_tscd",
           "quantize", "mean_luminance", "seeds_used"]
