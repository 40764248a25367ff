import pytest
import torch

from minidream.textenc import (PAD_ID, GlyphEncoder, GlyphProjector, SemanticEncoder, TokenSequence, UnknownTokenError,
                               Vocab, encode_chars, encode_ids, pool_prompt, project_and_fuse, quoted_text, tokenize)
from minidream.textenc import TEXT_SEMANTIC


def test_tokenize_quoted_chars():
    assert tokenize('Text "AB" in red.') == ["text", '"', "A", "B", '"', "in", "red"]
    assert quoted_text('text "HI" in red') == "HI"
    assert quoted_text("no quotes here") == ""


def test_unknown_token_is_named(vocab):
    with pytest.raises(UnknownTokenError) as exc:
        encode_ids(vocab, ['text "AB" in zebrastripe'], 40)
    assert "zebrastripe" in str(exc.value)


def test_vocab_round_trip(vocab, tmp_path):
    vocab.save(tmp_path / "v.json")
    back = Vocab.load(tmp_path / "v.json")
    assert back.tokens == vocab.tokens
    assert vocab.id("<pad>") == PAD_ID


def test_zero_weights_give_positional_embeddings(vocab):
    torch.manual_seed(0)
    enc = SemanticEncoder(len(vocab), 16, 12, n_blocks=2, n_heads=2)
    with torch.no_grad():
        enc.tok.weight.zero_()
    for blk in enc.block:
        blk.zero_()
    ids, mask = encode_ids(vocab, ['text "A" in red'], 12)
    out = enc(ids, mask)
    torch.testing.assert_close(out.embeddings[0], enc.pos.detach(), rtol=0, atol=0)


def test_masked_positions_do_not_leak(vocab):
    torch.manual_seed(1)
    enc = SemanticEncoder(len(vocab), 16, 24, n_blocks=2, n_heads=2).double()
    ids, mask = encode_ids(vocab, ['text "A" in red'], 24)
    n = int(mask.sum())
    full = enc(ids, mask).embeddings[0, :n]
    short = enc(ids[:, :n], mask[:, :n]).embeddings[0]
    torch.testing.assert_close(full, short, rtol=1e-12, atol=1e-12)
    # garbage in the padded slots changes nothing either
    ids2 = ids.clone()
    ids2[0, n:] = 7
    torch.testing.assert_close(enc(ids2, mask).embeddings[0, :n], full, rtol=1e-12, atol=1e-12)


def test_permutation_sensitivity(vocab):
    torch.manual_seed(2)
    enc = SemanticEncoder(len(vocab), 16, 12, n_heads=2)
    ids, mask = encode_ids(vocab, ["text in red"], 12)
    swapped = ids.clone()
    swapped[0, 1], swapped[0, 2] = ids[0, 2], ids[0, 1]
    assert not torch.allclose(enc(ids, mask).embeddings, enc(swapped, mask).embeddings)


def test_glyph_encoder_lengths(vocab):
    torch.manual_seed(3)
    enc = GlyphEncoder(len(vocab), 8, 4)
    ids, mask = encode_chars(vocab, ["AB"], 2)
    assert len(enc(ids, mask)) == 2
    ids, mask = encode_chars(vocab, ["AA"], 2)
    out = enc(ids, mask).embeddings[0]
    assert not torch.allclose(out[0], out[1])
    empty = enc(*encode_chars(vocab, [""], 0))
    assert len(empty) == 0


def _semantic(vocab, caption="text in red", dim=16):
    torch.manual_seed(4)
    enc = SemanticEncoder(len(vocab), dim, 12, n_heads=2)
    return enc(*encode_ids(vocab, [caption], 12))


def test_project_and_fuse(vocab):
    sem = _semantic(vocab)
    torch.manual_seed(5)
    gly = GlyphEncoder(len(vocab), 8, 4)(*encode_chars(vocab, ["AB"], 4))
    proj = GlyphProjector(8, 16)
    fused = project_and_fuse(sem, gly, proj)
    assert len(fused) == len(sem) + len(gly)
    assert torch.equal(fused.embeddings[:, :len(sem)], sem.embeddings)
    assert torch.equal(fused.modality[:len(sem)], sem.modality)
    empty = GlyphEncoder(len(vocab), 8, 4)(*encode_chars(vocab, [""], 0))
    assert project_and_fuse(sem, empty, proj) is sem
    with pytest.raises(ValueError):
        project_and_fuse(sem, gly, GlyphProjector(6, 16))
    with pytest.raises(ValueError):
        project_and_fuse(sem, gly, GlyphProjector(8, 12))


def _seq(emb, mask):
    return TokenSequence(emb, torch.full((emb.shape[1],), TEXT_SEMANTIC, dtype=torch.long), mask)


def test_pool_prompt():
    t = torch.randn(1, 1, 5)
    one = pool_prompt(_seq(t, torch.ones(1, 1, dtype=torch.bool)))
    torch.testing.assert_close(one, t[:, 0])
    two = pool_prompt(_seq(torch.cat([t, t], 1), torch.ones(1, 2, dtype=torch.bool)))
    torch.testing.assert_close(two, one)
    padded = torch.cat([t, torch.randn(1, 3, 5)], 1)
    mask = torch.tensor([[True, False, False, False]])
    torch.testing.assert_close(pool_prompt(_seq(padded, mask)), one)
    with pytest.raises(ValueError):
        pool_prompt(_seq(t, torch.zeros(1, 1, dtype=torch.bool)))
