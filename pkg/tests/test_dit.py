import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from minidream.dit import (MMDiTBlock, ModelConfig, RMSNorm, apply_rope, axis_coords, joint_attention, patchify_raw,
                           rotate, scaled_rope_coords, unpatchify_raw)
from minidream.generator import build_generator

from conftest import tiny_config


def test_rope_reference_examples():
    assert axis_coords(4, 4).tolist() == [-1.5, -0.5, 0.5, 1.5]
    assert axis_coords(7, 4).tolist() == [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]


@given(n=st.integers(2, 64), n_ref=st.integers(2, 64))
def test_rope_axis_properties(n, n_ref):
    c = axis_coords(n, n_ref)
    assert torch.equal(c, -c.flip(0))
    assert math.isclose(float(c[-1] - c[0]), n_ref - 1, rel_tol=0, abs_tol=1e-12)
    if n % 2:
        assert float(c[n // 2]) == 0.0


def test_scaled_coords_layout():
    xy = scaled_rope_coords(3, 5, (8, 8))
    assert xy.shape == (15, 2)
    assert xy[7].tolist() == [0.0, 0.0]
    assert torch.equal(xy[:5, 0], torch.full((5,), -3.5, dtype=torch.float64))


def test_rope_zero_coord_is_identity():
    q = torch.randn(2, 1, 3, 8, dtype=torch.float64)
    k = torch.randn(2, 1, 3, 8, dtype=torch.float64)
    q2, k2 = apply_rope(q, k, torch.zeros(3, 2, dtype=torch.float64))
    assert torch.equal(q2, q) and torch.equal(k2, k)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-8, 8), b=st.floats(-8, 8))
def test_rope_norm_and_relative_property(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(16, generator=g, dtype=torch.float64)
    k = torch.randn(16, generator=g, dtype=torch.float64)
    ca = torch.tensor([[a, 0.0]], dtype=torch.float64)
    cb = torch.tensor([[b, 0.0]], dtype=torch.float64)
    qa = rotate(q[None], ca)[0]
    # per-pair norms are preserved
    torch.testing.assert_close(qa.view(-1, 2).norm(dim=1), q.view(-1, 2).norm(dim=1), rtol=0, atol=1e-12)
    lhs = rotate(q[None], ca)[0] @ rotate(k[None], cb)[0]
    rhs = rotate(q[None], ca - cb)[0] @ k
    assert abs(float(lhs - rhs)) < 1e-6
    # the same holds on the x axis
    cx, cy = ca.flip(1), cb.flip(1)
    assert abs(float(rotate(q[None], cx)[0] @ rotate(k[None], cy)[0] - rotate(q[None], cx - cy)[0] @ k)) < 1e-6


def test_patchify_shapes():
    x = torch.randn(1, 2, 8, 8)
    tok = patchify_raw(x, 2)
    assert tok.shape == (1, 16, 8)
    assert torch.equal(unpatchify_raw(tok, 2, 2, 8, 8), x)
    assert patchify_raw(x, 1).shape == (1, 64, 2)
    with pytest.raises(ValueError):
        patchify_raw(torch.randn(1, 2, 7, 8), 2)


def test_head_dim_must_split_in_four():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=24, n_heads=4)


def test_zero_gates_block_is_identity(vocab):
    cfg = tiny_config(vocab)
    blk = MMDiTBlock(cfg)
    img, txt = torch.randn(2, 4, 16), torch.randn(2, 3, 16)
    mask = torch.tensor([[True, True, False], [True, False, False]])
    out_img, out_txt = blk(img, txt, torch.randn(2, 16), mask, scaled_rope_coords(2, 2, (2, 2)).float())
    assert torch.equal(out_img, img) and torch.equal(out_txt, txt)


def test_attention_rows_and_mask():
    q, k, v = (torch.randn(2, 1, 5, 8) for _ in range(3))
    mask = torch.tensor([[True, True, False, True, True], [True] * 5])
    out, probs = joint_attention(q, k, v, mask)
    torch.testing.assert_close(probs.sum(-1), torch.ones(2, 1, 5))
    assert float(probs[0, :, :, 2].abs().max()) == 0.0
    with pytest.raises(ValueError):
        joint_attention(q, k, v, torch.zeros(2, 5, dtype=torch.bool))


def test_qk_norm_unit_rms():
    norm = RMSNorm(8)
    y = norm(torch.randn(4, 8) * 5)
    torch.testing.assert_close(y.pow(2).mean(-1), torch.ones(4), rtol=1e-4, atol=1e-4)
    with torch.no_grad():
        norm.weight.fill_(2.0)
    torch.testing.assert_close(norm(torch.randn(4, 8)).pow(2).mean(-1), torch.full((4,), 4.0), rtol=1e-4, atol=1e-4)


def test_fresh_model_is_zero_map(tiny, prompts):
    x = torch.randn(2, 3, 16, 16)
    v = tiny.velocity(x, 0.3, tiny.condition(prompts))
    assert v.shape == x.shape
    assert float(v.detach().abs().max()) == 0.0


def _randomize(model, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.mark.parametrize("hw", [(16, 16), (8, 12), (24, 16)])
def test_any_grid_runs(tiny, prompts, hw):
    m = _randomize(tiny)
    x = torch.randn(2, 3, *hw)
    v = m.velocity(x, 0.5, m.condition(prompts))
    assert v.shape == x.shape
    assert torch.isfinite(v).all()


def test_padding_does_not_change_velocity(vocab, prompts):
    m = _randomize(build_generator(tiny_config(vocab), vocab)).double()
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    a = m.velocity(x, 0.4, m.condition(prompts[:1]))
    m2 = _randomize(build_generator(tiny_config(vocab, l_text_max=60), vocab)).double()
    m2.load_state_dict({k: v for k, v in m.state_dict().items() if k != "semantic.pos"}, strict=False)
    with torch.no_grad():
        m2.semantic.pos[:40] = m.semantic.pos
    b = m2.velocity(x, 0.4, m2.condition(prompts[:1]))
    torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-10)
