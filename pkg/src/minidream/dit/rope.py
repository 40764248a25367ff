"""Scaled 2D rotary position embedding.

Per axis with N tokens and a reference length N_ref, index i sits at
(i - (N-1)/2) * (N_ref-1)/(N-1): centred on zero with the span fixed to
N_ref - 1, so the central patch keeps coordinate 0 at every resolution.
"""
from __future__ import annotations

import torch


def axis_coords(n: int, n_ref: int, dtype=torch.float64) -> torch.Tensor:
    if n < 1 or n_ref < 1:
        raise ValueError("grid sizes must be >= 1")
    idx = torch.arange(n, dtype=dtype)
    if n == 1:
        return idx
    return (idx - (n - 1) / 2) * ((n_ref - 1) / (n - 1))


def scaled_rope_coords(grid_h: int, grid_w: int, ref_grid: tuple[int, int], dtype=torch.float64) -> torch.Tensor:
    """(grid_h * grid_w, 2) tensor of (y, x) coordinates in raster order."""
    ys = axis_coords(grid_h, ref_grid[0], dtype)
    xs = axis_coords(grid_w, ref_grid[1], dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy.reshape(-1), xx.reshape(-1)], dim=-1)


def rope_frequencies(head_dim: int, base: float = 100.0, dtype=torch.float64) -> torch.Tensor:
    """Geometric frequencies for one axis: head_dim // 4 of them."""
    if head_dim % 4:
        raise ValueError(f"head dim {head_dim} must be divisible by 4 for 2D RoPE")
    n = head_dim // 4
    return base ** (-torch.arange(n, dtype=dtype) / n)


def _rotate(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    # pairs are adjacent features (2j, 2j+1)
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def rotate(x: torch.Tensor, coords: torch.Tensor, base: float = 100.0) -> torch.Tensor:
    """Rotate (..., N, head_dim) features: first half by y, second half by x."""
    d = x.shape[-1]
    freqs = rope_frequencies(d, base).to(x.dtype)
    coords = coords.to(x.dtype)
    ay = coords[:, 0:1] * freqs
    ax = coords[:, 1:2] * freqs
    half = d // 2
    return torch.cat([_rotate(x[..., :half], ay), _rotate(x[..., half:], ax)], dim=-1)


def apply_rope(q: torch.Tensor, k: torch.Tensor, coords: torch.Tensor, freq_base: float = 100.0):
    return rotate(q, coords, freq_base), rotate(k, coords, freq_base)
