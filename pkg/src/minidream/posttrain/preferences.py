"""Pairwise preference records built by dimension-specific corruption of clean renders."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..glyphgen.atlas import GlyphAtlas
from ..glyphgen.dataset import DatasetItem, content_hash, load_png, save_png
from ..glyphgen.render import render_text_image

DIMENSIONS = ("alignment", "aesthetic", "text_rendering")


@dataclass(frozen=True)
class PreferenceRecord:
    """One forced-choice comparison. ``image_a``/``image_b`` are paths (content-addressed for
    synthetic records); pixels ride along in memory and are not serialized."""

    prompt_id: str
    prompt: str
    image_a: str
    image_b: str
    winner: str
    dimension: str
    source_a: str = "data"
    source_b: str = "data"
    render_text: str = ""
    pixels_a: np.ndarray | None = field(default=None, repr=False, compare=False)
    pixels_b: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.image_a == self.image_b:
            raise ValueError("a preference needs two distinct images")
        if self.winner not in ("a", "b"):
            raise ValueError(f"winner must be 'a' or 'b', got {self.winner!r}")
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension {self.dimension!r}")

    @property
    def winner_loser(self) -> tuple[np.ndarray, np.ndarray]:
        if self.pixels_a is None or self.pixels_b is None:
            raise ValueError(f"record {self.prompt_id} has no pixels loaded")
        return (self.pixels_a, self.pixels_b) if self.winner == "a" else (self.pixels_b, self.pixels_a)

    @property
    def winner_source(self) -> str:
        return self.source_a if self.winner == "a" else self.source_b

    @property
    def loser_source(self) -> str:
        return self.source_b if self.winner == "a" else self.source_a

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "prompt": self.prompt, "image_a": self.image_a,
                "image_b": self.image_b, "winner": self.winner, "dimension": self.dimension,
                "source_a": self.source_a, "source_b": self.source_b, "render_text": self.render_text}

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceRecord":
        return cls(d["prompt_id"], d.get("prompt", ""), d["image_a"], d["image_b"], d["winner"], d["dimension"],
                   d.get("source_a", "data"), d.get("source_b", "data"), d.get("render_text", ""))


@dataclass(frozen=True)
class PerturbationConfig:
    dimensions: tuple[str, ...] = DIMENSIONS
    per_item: int = 1
    glyph_mutations: int = 1
    contrast: tuple[float, float] = (0.3, 0.7)
    noise: tuple[float, float] = (0.05, 0.2)

    def __post_init__(self):
        bad = [d for d in self.dimensions if d not in DIMENSIONS]
        if bad:
            raise ValueError(f"unknown dimensions {bad}")


def mutate_glyphs(text: str, k: int, alphabet: Sequence[str], rng: np.random.Generator) -> str:
    """Replace ``k`` positions with characters absent from ``text``."""
    k = min(max(k, 1), len(text))
    pool = [c for c in alphabet if c not in text]
    if not pool:
        raise ValueError("alphabet has no characters outside the text")
    chars = list(text)
    for pos in rng.choice(len(text), size=k, replace=False):
        chars[int(pos)] = pool[int(rng.integers(0, len(pool)))]
    return "".join(chars)


def degrade_aesthetic(image: np.ndarray, rng: np.random.Generator, contrast=(0.3, 0.7),
                      noise=(0.05, 0.2)) -> np.ndarray:
    """Pull colours toward the mean and add Gaussian noise."""
    a = rng.uniform(*contrast)
    sigma = rng.uniform(*noise)
    mean = image.mean(axis=(1, 2), keepdims=True)
    out = mean + a * (image - mean) + sigma * rng.standard_normal(image.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _record(pid: str, item: DatasetItem, win: np.ndarray, lose: np.ndarray, dim: str, flip: bool,
            win_src: str, lose_src: str) -> PreferenceRecord:
    a, b = (lose, win) if flip else (win, lose)
    sa, sb = (lose_src, win_src) if flip else (win_src, lose_src)
    return PreferenceRecord(pid, item.caption.textual, f"prefs/{content_hash(a)[:16]}.png",
                            f"prefs/{content_hash(b)[:16]}.png", "b" if flip else "a", dim, sa, sb,
                            item.spec.text, a, b)


def synthesize_preferences(items: Sequence[DatasetItem], atlas: GlyphAtlas, config: PerturbationConfig = PerturbationConfig(),
                           seed: int = 0, image_size: int = 16) -> list[PreferenceRecord]:
    """Winner is always the clean render for the item's caption; side (a/b) is randomised."""
    items = list(items)
    if not items:
        raise ValueError("manifest is empty")
    rng = np.random.default_rng([seed, 13])
    out = []
    for i, item in enumerate(items):
        script = [c for c in atlas.codepoints if (ord(c) >= 0x4E00) == (ord(item.spec.text[0]) >= 0x4E00)]
        for dim in config.dimensions:
            for j in range(config.per_item):
                pid = f"{i:05d}-{dim}-{j}"
                if dim == "alignment":
                    others = [o for o in items if o.spec.text != item.spec.text]
                    if not others:
                        continue
                    lose = others[int(rng.integers(0, len(others)))].image
                    src = "mismatch"
                elif dim == "text_rendering":
                    text = mutate_glyphs(item.spec.text, config.glyph_mutations, script, rng)
                    lose = render_text_image(replace(item.spec, text=text), atlas, image_size)
                    src = "glyph_mutation"
                else:
                    lose = degrade_aesthetic(item.image, rng, config.contrast, config.noise)
                    src = "degraded"
                if content_hash(lose) == content_hash(item.image):
                    continue
                out.append(_record(pid, item, item.image, lose, dim, bool(rng.random() < 0.5), "data", src))
    return out


def write_preferences(records: Sequence[PreferenceRecord], root: str | Path, name: str = "prefs.jsonl") -> Path:
    root = Path(root)
    for rec in records:
        for rel, px in ((rec.image_a, rec.pixels_a), (rec.image_b, rec.pixels_b)):
            if px is not None:
                (root / rel).parent.mkdir(parents=True, exist_ok=True)
                save_png(px, root / rel)
    path = root / name
    path.write_text("".join(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for r in records),
                    encoding="utf-8")
    return path


def read_preferences(path: str | Path, load_pixels: bool = True) -> list[PreferenceRecord]:
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = PreferenceRecord.from_dict(json.loads(line))
        if load_pixels and (path.parent / rec.image_a).exists() and (path.parent / rec.image_b).exists():
            rec = replace(rec, pixels_a=load_png(path.parent / rec.image_a), pixels_b=load_png(path.parent / rec.image_b))
        out.append(rec)
    return out
