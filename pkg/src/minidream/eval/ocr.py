"""Template OCR over the glyph atlas."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..glyphgen.atlas import GlyphAtlas

REJECT = "?"


@dataclass(frozen=True)
class OcrResult:
    decoded: str
    scores: tuple[float, ...] = ()
    boxes: tuple[tuple[int, int, int, int], ...] = field(default=())  # (row, col, height, width)
    scale: int = 0

    def __post_init__(self):
        if len(self.decoded) != len(self.scores) or len(self.scores) != len(self.boxes):
            raise ValueError("decoded, scores and boxes must align")


def foreground(image: np.ndarray, min_contrast: float = 0.2) -> np.ndarray | None:
    """Binary foreground mask relative to the median (background) colour; None if blank."""
    img = np.asarray(image, dtype=np.float64)
    bg = np.median(img.reshape(img.shape[0], -1), axis=1)
    dist = np.linalg.norm(img - bg[:, None, None], axis=0)
    peak = float(dist.max())
    if peak < min_contrast:
        return None
    return dist > peak / 2


def _cells(fg: np.ndarray, r0: int, c0: int, n: int, s: int, cell: int) -> np.ndarray:
    size = cell * s
    block = fg[r0:r0 + size, c0:c0 + n * size].astype(np.float64)
    # (n, cell, cell) block means, then majority vote
    block = block.reshape(cell, s, n, cell, s).mean(axis=(1, 4)).transpose(1, 0, 2)
    return block >= 0.5


def _match(cells: np.ndarray, templates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best template index and its correlation (1 - 2*hamming/cell^2) per cell."""
    a = cells.reshape(len(cells), -1).astype(np.float64) * 2 - 1
    b = templates.reshape(len(templates), -1).astype(np.float64) * 2 - 1
    corr = a @ b.T / a.shape[1]
    best = corr.argmax(axis=1)
    return best, corr[np.arange(len(cells)), best]


def ocr_match(image: np.ndarray, atlas: GlyphAtlas, spec_hint=None, scales=(1, 2, 3),
              threshold: float = 0.6, min_contrast: float = 0.2) -> OcrResult:
    """Decode the single text line in ``image`` (channels-first, values in [0, 1]).

    ``spec_hint`` (anything with a ``scale`` attribute) pins the glyph scale; otherwise
    every scale in ``scales`` and every cell-grid offset covering the foreground is tried.
    Cells whose best correlation is below ``threshold`` decode to '?'.
    """
    fg = foreground(image, min_contrast)
    if fg is None or not fg.any():
        return OcrResult("")
    if spec_hint is not None and getattr(spec_hint, "scale", None):
        scales = (int(spec_hint.scale),)
    keys, templates = atlas.stacked()
    cell = atlas.cell
    H, W = fg.shape
    total_fg = int(fg.sum())

    best = None
    for s in scales:
        size = cell * s
        if size > H or size > W:
            continue
        area = s * s * cell * cell
        for r0 in range(H - size + 1):
            for c0 in range(W - size + 1):
                for n in range(1, (W - c0) // size + 1):
                    inside = int(fg[r0:r0 + size, c0:c0 + n * size].sum())
                    if inside == 0:
                        continue
                    idx, corr = _match(_cells(fg, r0, c0, n, s, cell), templates)
                    # stray foreground outside the line costs its share of one cell
                    score = float(corr.mean()) - (total_fg - inside) / area
                    key = (score, -s, -n, -r0, -c0)
                    if best is None or key > best[0]:
                        best = (key, s, r0, c0, n, idx, corr)
    if best is None:
        return OcrResult("")
    _, s, r0, c0, n, idx, corr = best
    size = cell * s
    chars = "".join(keys[i] if c >= threshold else REJECT for i, c in zip(idx, corr))
    boxes = tuple((r0, c0 + j * size, size, size) for j in range(n))
    return OcrResult(chars, tuple(float(c) for c in corr), boxes, s)
