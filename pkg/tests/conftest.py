import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest
import torch

from minidream.dit import ModelConfig
from minidream.generator import Prompt, build_generator
from minidream.glyphgen import default_atlases, generate_items, merge_atlases
from minidream.textenc import build_vocab

torch.set_num_threads(1)


def tiny_config(vocab, **kw) -> ModelConfig:
    base = dict(vocab_size=len(vocab), d_model=16, n_blocks=1, n_heads=1, enc_heads=2, d_byte=8, glyph_heads=2,
                freq_dim=16, l_text_max=40)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def atlases():
    return default_atlases(0)


@pytest.fixture(scope="session")
def atlas(atlases):
    return merge_atlases(*atlases)


@pytest.fixture(scope="session")
def vocab(atlases):
    latin, cjk = atlases
    return build_vocab(latin.codepoints + cjk.codepoints)


@pytest.fixture(scope="session")
def items(atlases):
    latin, cjk = atlases
    return generate_items(8, latin, cjk, seed=1)


@pytest.fixture
def tiny(vocab):
    return build_generator(tiny_config(vocab), vocab, seed=0)


@pytest.fixture
def prompts():
    return [Prompt('text "AB" in red'), Prompt('text "7" in blue')]


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

