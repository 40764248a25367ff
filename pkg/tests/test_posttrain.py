import math

import numpy as np
import pytest
import torch

from minidream.diffusion import upsample2
from minidream.generator import Prompt, build_generator
from minidream.eval.ocr import ocr_match
from minidream.glyphgen import generate_items
from minidream.glyphgen.dataset import content_hash
from minidream.posttrain.preferences import PerturbationConfig, synthesize_preferences
from minidream.posttrain.refiner import build_refiner, hi_res_items, refine
from minidream.posttrain.refl import EMA, REFLConfig, REFLTrainer, ema_update, refl_step
from minidream.posttrain.reward import (LuminanceReward, RMTrainConfig, degrade, pairwise_accuracy, ranking_loss,
                                        texture_pairs, train_reward_model, train_texture_rm)

from conftest import tiny_config


def test_preferences_deterministic_and_clean_winner(items, atlas):
    cfg = PerturbationConfig(per_item=2)
    a = synthesize_preferences(items, atlas, cfg, seed=3)
    b = synthesize_preferences(items, atlas, cfg, seed=3)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    by_caption = {it.caption.textual: it for it in items}
    for r in a:
        win, lose = r.winner_loser
        np.testing.assert_array_equal(win, by_caption[r.prompt].image)
        assert not np.array_equal(win, lose)


def test_full_glyph_mutation_is_disjoint(items, atlas):
    recs = synthesize_preferences(items, atlas, PerturbationConfig(dimensions=("text_rendering",), glyph_mutations=99),
                                  seed=0)
    by_caption = {it.caption.textual: it for it in items}
    for r in recs:
        spec = by_caption[r.prompt].spec
        shown = ocr_match(r.winner_loser[1], atlas, spec).decoded
        assert len(shown) == len(spec.text)
        assert not set(shown) & set(spec.text)


def test_alignment_loser_shows_other_text(items, atlas):
    recs = synthesize_preferences(items, atlas, PerturbationConfig(dimensions=("alignment",)), seed=0)
    by_caption = {it.caption.textual: it for it in items}
    hashes = {it.content_hash: it.spec.text for it in items}
    for r in recs:
        _, lose = r.winner_loser
        assert hashes[content_hash(lose)] != by_caption[r.prompt].spec.text


def test_ranking_loss_limits():
    r = torch.tensor([0.3, -1.0])
    assert math.isclose(float(ranking_loss(r, r)), math.log(2), rel_tol=1e-6)
    assert float(ranking_loss(torch.tensor([60.0]), torch.tensor([0.0]))) < 1e-20
    assert pairwise_accuracy(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])) == 0.5


def test_degenerate_preferences_rejected(items, atlas, vocab):
    rec = synthesize_preferences(items[:1], atlas, PerturbationConfig(dimensions=("text_rendering",)), seed=0)
    with pytest.raises(ValueError):
        train_reward_model(rec, "text_rendering", vocab, RMTrainConfig(steps=1))
    with pytest.raises(ValueError):
        train_reward_model(rec, "aesthetic", vocab, RMTrainConfig(steps=1))


def test_text_rm_learns(atlases, atlas, vocab):
    pool = generate_items(1000, *atlases, seed=11)
    recs = synthesize_preferences(pool, atlas, PerturbationConfig(dimensions=("text_rendering",), per_item=2), seed=0)
    rm = train_reward_model(recs, "text_rendering", vocab, RMTrainConfig(steps=400, holdout=0.2))
    assert rm.heldout_accuracy >= 0.9


def test_ema_update():
    s = {"w": torch.tensor([1.0, 2.0])}
    p = {"w": torch.tensor([3.0, -1.0])}
    assert torch.equal(ema_update(s, p, 1.0)["w"], s["w"])
    assert torch.equal(ema_update(s, p, 0.0)["w"], p["w"])
    cur = s
    gaps = []
    for _ in range(20):
        cur = ema_update(cur, p, 0.7)
        gaps.append(float((cur["w"] - p["w"]).abs().max()))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, 0.7, rtol=1e-4)
    with pytest.raises(ValueError):
        ema_update(s, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(s, p, 1.5)


def test_ema_copy(tiny):
    ema = EMA(tiny, 0.5)
    with torch.no_grad():
        for q in tiny.parameters():
            q.add_(1.0)
    ema.update(tiny)
    ema.copy_to(tiny)
    name, q = next(iter(tiny.named_parameters()))
    torch.testing.assert_close(q, ema.shadow[name])


def _randomized(vocab, seed=5):
    m = build_generator(tiny_config(vocab), vocab, seed=0)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g) * 0.1)
    return m


def test_refl_zero_weights_leave_params(vocab, prompts):
    m = _randomized(vocab)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    m, row = refl_step(m, prompts, [LuminanceReward()], [0.0], REFLConfig(rollout_steps=2))
    assert row["skipped"]
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


class NanReward:
    def score(self, images, prompts=None):
        return images.mean(dim=(1, 2, 3)) * float("nan")


def test_refl_skips_non_finite_reward(vocab, prompts):
    m = _randomized(vocab)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    tr = REFLTrainer(m, [NanReward()], [1.0], REFLConfig(rollout_steps=2))
    row = tr.step(prompts)
    assert row["skipped"] and tr.incidents
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_refl_luminance_moves_up(vocab, prompts):
    m = _randomized(vocab)
    tr = REFLTrainer(m, [LuminanceReward()], [1.0], REFLConfig(rollout_steps=4, lr=1e-2), grid=(8, 8))
    rows = [tr.step(prompts) for _ in range(8)]
    assert rows[-1]["reward"] > rows[0]["reward"]


def test_refiner_shapes_and_zero_strength(items, atlas, vocab):
    base = build_generator(tiny_config(vocab), vocab, seed=0)
    ref = build_refiner(base)
    lo = torch.from_numpy(np.stack([it.image for it in items[:2]]))
    prompts = [Prompt(it.caption.textual, it.spec.text) for it in items[:2]]
    out = refine(ref, lo, prompts, strength=0.3, steps=2)
    assert out.shape == (2, 3, 32, 32)
    assert torch.equal(refine(ref, lo, prompts, strength=0.0), upsample2(lo).clamp(0, 1))
    with pytest.raises(ValueError):
        refine(ref, torch.rand(2, 3, 12, 12), prompts)
    hi = hi_res_items(items[:2], atlas)
    assert hi[0].image.shape == (3, 32, 32)


def test_texture_pairs_and_rm(atlases, atlas):
    img = torch.rand(3, 8, 8)
    assert torch.equal(degrade(img, "blur", 0.0), img)
    clean = torch.from_numpy(np.stack([h.image for h in hi_res_items(generate_items(120, *atlases, seed=9), atlas)]))
    c, d = texture_pairs(clean, 2, seed=0)
    assert len(c) < 2 * len(clean)  # severity-0 draws are dropped
    assert not any(torch.equal(a, b) for a, b in zip(c, d))
    n = int(0.8 * len(c))
    rm = train_texture_rm(c[:n], d[:n], steps=300)
    with torch.no_grad():
        acc = pairwise_accuracy(rm(c[n:]), rm(d[n:]))
    assert acc >= 0.95
