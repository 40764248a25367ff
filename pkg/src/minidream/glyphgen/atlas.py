"""Glyph atlases: hand-drawn latin bitmaps and procedural CJK-like glyphs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CELL = 7
ATLAS_FORMAT = 1
CJK_BASE = 0x4E00
CJK_COUNT = 64
MAX_RETRIES = 2000
# cjk glyphs must differ from every other glyph in at least this many pixels
MIN_HAMMING = 4

_LATIN_ROWS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


class AtlasError(RuntimeError):
    """Atlas generation could not satisfy its distinctness constraints."""


@dataclass(frozen=True)
class GlyphAtlas:
    glyphs: dict[str, np.ndarray]
    script: str
    version: int = ATLAS_FORMAT
    seed: int = 0
    cell: int = CELL

    def __getitem__(self, ch: str) -> np.ndarray:
        return self.glyphs[ch]

    def __contains__(self, ch: object) -> bool:
        return ch in self.glyphs

    def __len__(self) -> int:
        return len(self.glyphs)

    @property
    def codepoints(self) -> list[str]:
        return list(self.glyphs)

    def stacked(self) -> tuple[list[str], np.ndarray]:
        """Codepoints and an (n, cell, cell) boolean array, in atlas order."""
        keys = list(self.glyphs)
        return keys, np.stack([self.glyphs[k] for k in keys]) if keys else np.zeros((0, self.cell, self.cell), bool)

    def to_json(self) -> str:
        payload = {
            "format": ATLAS_FORMAT,
            "script": self.script,
            "version": self.version,
            "seed": self.seed,
            "cell": self.cell,
            "glyphs": {k: ["".join("1" if v else "0" for v in row) for row in bm] for k, bm in self.glyphs.items()},
        }
        return json.dumps(payload, ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GlyphAtlas":
        payload = json.loads(text)
        if payload.get("format") != ATLAS_FORMAT:
            raise ValueError(f"unsupported atlas format {payload.get('format')!r}")
        glyphs = {
            k: np.array([[c == "1" for c in row] for row in rows], dtype=bool)
            for k, rows in payload["glyphs"].items()
        }
        return cls(glyphs, payload["script"], payload["version"], payload["seed"], payload["cell"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GlyphAtlas":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _latin() -> dict[str, np.ndarray]:
    out = {}
    for ch, rows in _LATIN_ROWS.items():
        bm = np.zeros((CELL, CELL), dtype=bool)
        bm[:, 1:6] = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
        out[ch] = bm
    return out


def _stroke_glyph(rng: np.random.Generator) -> np.ndarray:
    bm = np.zeros((CELL, CELL), dtype=bool)
    for _ in range(int(rng.integers(2, 6))):
        length = int(rng.integers(3, CELL + 1))
        start = int(rng.integers(0, CELL - length + 1))
        line = int(rng.integers(0, CELL))
        if rng.random() < 0.5:
            bm[line, start:start + length] = True
        else:
            bm[start:start + length, line] = True
    return bm


def build_atlas(seed: int, script: str, version: int = ATLAS_FORMAT) -> GlyphAtlas:
    """Build a deterministic atlas for ``script`` ("latin" or "cjk-like").

    The latin atlas is fixed (A-Z, 0-9) and ignores ``seed``. The cjk-like atlas
    draws 64 stroke glyphs keyed U+4E00.., regenerating any glyph that lands
    within MIN_HAMMING pixels of an existing glyph (latin included, so merged
    atlases stay decodable).
    """
    if script == "latin":
        return GlyphAtlas(_latin(), "latin", version, seed)
    if script != "cjk-like":
        raise ValueError(f"unknown script {script!r}")

    taken = list(_latin().values())
    glyphs: dict[str, np.ndarray] = {}
    for i in range(CJK_COUNT):
        for attempt in range(MAX_RETRIES):
            rng = np.random.default_rng([seed, version, i, attempt])
            bm = _stroke_glyph(rng)
            if all(np.count_nonzero(bm ^ other) >= MIN_HAMMING for other in taken):
                break
        else:
            raise AtlasError(f"glyph {i} still collides after {MAX_RETRIES} retries (seed={seed})")
        taken.append(bm)
        glyphs[chr(CJK_BASE + i)] = bm
    return GlyphAtlas(glyphs, "cjk-like", version, seed)


def merge_atlases(*atlases: GlyphAtlas) -> GlyphAtlas:
    glyphs: dict[str, np.ndarray] = {}
    for a in atlases:
        overlap = set(glyphs) & set(a.glyphs)
        if overlap:
            raise ValueError(f"atlases share codepoints: {sorted(overlap)[:5]}")
        glyphs.update(a.glyphs)
    return GlyphAtlas(glyphs, "mixed", atlases[0].version, atlases[0].seed)


def default_atlases(seed: int = 0) -> tuple[GlyphAtlas, GlyphAtlas]:
    return build_atlas(seed, "latin"), build_atlas(seed, "cjk-like")
