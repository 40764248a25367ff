"""Reference implementations used only by the tests, written independently of the package."""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def matchings(m: int, n: int) -> np.ndarray:
    """Every monotone pairing of positions of an m-string with an n-string, as (count, m*n) indicators.

    An alignment is fully described by which positions are paired (matched or substituted);
    all other positions are insertions or deletions.
    """
    rows = []
    for k in range(min(m, n) + 1):
        for ia in itertools.combinations(range(m), k):
            for jb in itertools.combinations(range(n), k):
                row = np.zeros(m * n, dtype=np.int64)
                for i, j in zip(ia, jb):
                    row[i * n + j] = 1
                rows.append(row)
    return np.stack(rows)


def brute_alignment(a: str, b: str) -> tuple[int, int]:
    """(edit distance, most matched characters among the cheapest alignments) by enumeration."""
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return m + n, 0
    M = matchings(m, n)
    eq = np.array([a[i] == b[j] for i in range(m) for j in range(n)], dtype=np.int64)
    paired = M.sum(axis=1)
    matched = M @ eq
    cost = (m - paired) + (n - paired) + (paired - matched)
    best = cost.min()
    return int(best), int(matched[cost == best].max())


def all_strings(alphabet: str, max_len: int) -> list[str]:
    return ["".join(p) for L in range(max_len + 1) for p in itertools.product(alphabet, repeat=L)]


def brute_accuracy(rendered: str, target: str) -> float:
    return (1.0 - brute_alignment(rendered, target)[0] / len(target)) * 100.0


def brute_hit_rate(rendered: str, target: str) -> float:
    return brute_alignment(rendered, target)[1] / len(target) * 100.0


def elo_expected(ra: float, rb: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((rb - ra) / 400.0))


def directional_grad_errors(loss_fn, params, h=1e-6, seed=0):
    """Relative error between autograd and central differences along one random unit direction
    per parameter tensor. ``loss_fn`` must be a deterministic float64 scalar function."""
    import torch

    g = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    errors = []
    for p, gr in zip(params, grads):
        d = torch.randn(p.shape, generator=g, dtype=p.dtype)
        d /= d.norm()
        analytic = 0.0 if gr is None else float((gr * d).sum())
        with torch.no_grad():
            p.add_(h * d)
            up = float(loss_fn())
            p.sub_(2 * h * d)
            down = float(loss_fn())
            p.add_(h * d)
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        errors.append(abs(analytic - numeric) / scale)
    return errors
