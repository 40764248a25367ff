import numpy as np
import pytest
import torch

from minidream.accel import guidance, quant, tscd
from minidream.generator import Generator, build_generator

from conftest import tiny_config


def _randomized(vocab, seed=3, scale=0.2, **kw):
    m = build_generator(tiny_config(vocab, **kw), vocab, seed=0)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)
    return m.eval()


@pytest.mark.parametrize("k", [16, 8, 4, 2, 1])
def test_segment_boundaries(k):
    b = tscd.segment_boundaries(k)
    assert b[0] == 0.0 and b[-1] == 1.0 and len(b) == k + 1
    assert np.allclose(np.diff(b), 1.0 / k, rtol=0, atol=1e-15)
    t = torch.tensor(b, dtype=torch.float32)
    assert torch.equal(tscd.lower_boundary(t, k), t)
    inner = t[:-1] + 0.4 / k
    assert torch.equal(tscd.lower_boundary(inner, k), t[:-1])


def test_k4_boundaries_and_schedule():
    assert tscd.segment_boundaries(4) == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        tscd.SegmentSchedule((4, 4, 1))
    with pytest.raises(ValueError):
        tscd.SegmentSchedule((4, 2))


def test_jump_at_boundary_is_identity(vocab, prompts):
    m = _randomized(vocab)
    x = torch.randn(2, 3, 8, 8)
    t = torch.tensor([0.5, 0.25])
    with torch.no_grad():
        out = tscd.student_jump(m, x, t, tscd.lower_boundary(t, 4), m.condition(prompts))
    assert torch.equal(out, x)


def test_cfg_target_w1_is_conditional(vocab, prompts):
    m = _randomized(vocab)
    x = torch.randn(2, 3, 8, 8)
    t = torch.tensor([0.3, 0.8])
    cond, null = m.condition(prompts), m.null_condition(2)
    with torch.no_grad():
        tgt = guidance.cfg_target(m, x, t, cond, null, torch.tensor([1.0, 2.5]))
        vc = m.velocity(x, t, cond)
        vu = m.velocity(x, t, null)
    assert torch.equal(tgt[0], vc[0])
    torch.testing.assert_close(tgt[1], vu[1] + 2.5 * (vc[1] - vu[1]))


def test_guidance_range_checked():
    rng = np.random.default_rng(0)
    w = guidance.sample_w(64, (1.0, 3.0), rng)
    assert float(w.min()) == 1.0 and float(w.max()) <= 3.0
    guidance.check_w(w, (1.0, 3.0))
    with pytest.raises(ValueError):
        guidance.check_w(torch.tensor([3.5]), (1.0, 3.0))
    with pytest.raises(ValueError):
        guidance.sample_w(4, (0.5, 3.0), rng)


def test_guidance_embedding_injective(vocab):
    student = guidance.build_student(_randomized(vocab))
    with torch.no_grad():
        for p in student.dit.g_embed.parameters():
            p.normal_(generator=torch.Generator().manual_seed(0))
        w = torch.arange(10, 101, dtype=torch.float64).float() / 10
        emb = student.dit.g_embed(w)
    d = torch.cdist(emb, emb)
    assert float(d[~torch.eye(len(w), dtype=torch.bool)].min()) > 0


class Unguided(Generator):
    """Teacher whose conditional and unconditional branches coincide."""

    def velocity(self, x, t, cond, guidance=None, cond_image=None):
        return super().velocity(x, t, self.null_condition(x.shape[0]), guidance, cond_image)


def test_degenerate_teacher_student_constant_in_w(vocab, items, prompts):
    base = _randomized(vocab)
    teacher = Unguided(base.cfg, vocab)
    teacher.load_state_dict(base.state_dict())
    init = guidance.build_student(base)
    student = Unguided(init.cfg, vocab)
    student.load_state_dict(init.state_dict())
    student, rows = guidance.cfg_distill(teacher, items, guidance.DistillConfig(steps=30, batch_size=8, log_every=10),
                                         student=student)
    assert max(r["loss"] for r in rows) < 1e-10
    x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    t = torch.full((2,), 0.5)
    with torch.no_grad():
        cond = student.condition(prompts)
        outs = [student.velocity(x, t, cond, guidance=torch.full((2,), w)) for w in (1.0, 2.0, 3.0)]
    for o in outs[1:]:
        assert float((o - outs[0]).abs().max()) < 1e-3


@pytest.fixture
def qsetup(vocab, items):
    m = _randomized(vocab)
    calib = quant.calibration_batches(items, 2, 4, seed=0)
    held = quant.calibration_batches(items, 2, 4, seed=1)
    return m, calib, held


def test_int8_roundoff_bound(qsetup):
    m, calib, _ = qsetup
    plan = quant.uniform_plan(m, 8, "per-channel", quant.activation_maxima(m, calib))
    qm = quant.apply_quant(m, plan)
    for path, ql in quant.quant_layers(qm).items():
        w = ql.smoothed()
        scale = w.abs().amax(dim=1) / 127
        assert torch.equal(ql.scale.detach(), torch.where(scale > 0, scale, torch.ones_like(scale)))
        err = (w - ql.dequantized()).abs()
        assert bool((err <= scale[:, None] / 2 * (1 + 1e-6) + 1e-12).all()), path
        assert quant.roundoff_violation(ql) < 1e-6


def test_passthrough_plan_is_bit_identical(qsetup, prompts):
    m, _, _ = qsetup
    qm = quant.apply_quant(m, quant.passthrough_plan(m))
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(qm.velocity(x, 0.4, qm.condition(prompts)), m.velocity(x, 0.4, m.condition(prompts)))


def test_zero_layer_has_zero_sensitivity(qsetup):
    m, calib, _ = qsetup
    path = next(p for p in quant.quantizable_layers(m) if p.startswith("dit."))
    with torch.no_grad():
        m.get_submodule(path).weight.zero_()
    base = quant.calib_loss(m, calib)
    n_in = m.get_submodule(path).in_features
    for bits in (4, 8, 16):
        for gran in quant.GRANULARITIES:
            assert quant.sensitivity(m, calib, path, bits, gran, torch.ones(n_in), base) == 0.0


def test_search_plan_within_budget_on_heldout(qsetup):
    m, calib, held = qsetup
    budget = 2e-3
    plan, info = quant.quant_sensitivity_search(m, calib, budget=budget)
    assert plan.predicted_increase < budget
    assert any(lp.bits < quant.PASSTHROUGH for lp in plan.layers.values())
    increase = quant.calib_loss(quant.apply_quant(m, plan), held) - quant.calib_loss(m, held)
    assert increase <= 1.5 * budget
    with pytest.raises(ValueError):
        quant.quant_sensitivity_search(m, [], budget=budget)


def test_finetune_never_worse(qsetup):
    m, calib, _ = qsetup
    qm = quant.apply_quant(m, quant.uniform_plan(m, 4, "per-tensor"))
    before = quant.calib_loss(qm, calib)
    qm, hist = quant.finetune_scales(qm, calib, steps=5, lr=1e-2)
    assert hist[0] == before
    assert quant.calib_loss(qm, calib) == min(hist) <= before


def test_plan_json_and_coverage(qsetup, tmp_path):
    m, calib, _ = qsetup
    plan = quant.uniform_plan(m, 8, "per-channel")
    plan.save(tmp_path / "plan.json")
    back = quant.QuantPlan.load(tmp_path / "plan.json")
    assert back.to_json() == plan.to_json()
    partial = quant.QuantPlan(dict(list(plan.layers.items())[1:]))
    with pytest.raises(ValueError):
        quant.apply_quant(m, partial)
    with pytest.raises(ValueError):
        quant.LayerPlan("x", 5, "per-tensor", [1.0], [1.0])
