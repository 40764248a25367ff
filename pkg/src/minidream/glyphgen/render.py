"""Render specs to channels-first RGB rasters."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .atlas import GlyphAtlas

PALETTE: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.6, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

ANCHORS = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)

AESTHETIC_DIMS = ("color", "lighting", "texture", "composition")
LEVELS = ("low", "high")


class SpecError(ValueError):
    """A render spec that cannot be drawn on the requested canvas."""


def luminance(rgb) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


@dataclass(frozen=True)
class RenderSpec:
    text: str
    fg_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bg_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    position: tuple[int, int] = (0, 0)
    scale: int = 1
    aesthetic_tags: tuple[str, ...] = field(default=())
    realness: str = "real"

    def text_size(self, cell: int = 7) -> tuple[int, int]:
        return cell * self.scale, cell * self.scale * len(self.text)

    def validate(self, atlas: GlyphAtlas | None = None, image_size: int | None = None) -> None:
        if len(self.text) < 1:
            raise SpecError("render text must be nonempty")
        if tuple(self.fg_color) == tuple(self.bg_color):
            raise SpecError("fg_color equals bg_color")
        if self.realness not in ("real", "negative"):
            raise SpecError(f"bad realness {self.realness!r}")
        if self.scale < 1:
            raise SpecError("scale must be >= 1")
        for tag in self.aesthetic_tags:
            dim, _, level = tag.partition(":")
            if dim not in AESTHETIC_DIMS or level not in LEVELS:
                raise SpecError(f"bad aesthetic tag {tag!r}")
        if atlas is not None:
            missing = [c for c in self.text if c not in atlas]
            if missing:
                raise SpecError(f"codepoints not in atlas: {missing}")
        if image_size is not None:
            cell = atlas.cell if atlas is not None else 7
            h, w = self.text_size(cell)
            r, c = self.position
            if r < 0 or c < 0 or r + h > image_size or c + w > image_size:
                raise SpecError(f"text {self.text!r} overflows {image_size}px canvas at {self.position}")

    def scaled(self, factor: int) -> "RenderSpec":
        """Same layout on a canvas ``factor`` times larger."""
        r, c = self.position
        return RenderSpec(self.text, self.fg_color, self.bg_color, (r * factor, c * factor),
                          self.scale * factor, self.aesthetic_tags, self.realness)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fg_color"] = list(self.fg_color)
        d["bg_color"] = list(self.bg_color)
        d["position"] = list(self.position)
        d["aesthetic_tags"] = list(self.aesthetic_tags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RenderSpec":
        return cls(
            text=d["text"],
            fg_color=tuple(d["fg_color"]),
            bg_color=tuple(d["bg_color"]),
            position=tuple(d["position"]),
            scale=int(d["scale"]),
            aesthetic_tags=tuple(d.get("aesthetic_tags", ())),
            realness=d.get("realness", "real"),
        )


def anchor_position(anchor: str, n_chars: int, scale: int, image_size: int, cell: int = 7) -> tuple[int, int]:
    """Top-left pixel of a text block placed at one of the nine anchors."""
    if anchor not in ANCHORS:
        raise SpecError(f"unknown anchor {anchor!r}")
    h, w = cell * scale, cell * scale * n_chars
    free_r, free_c = image_size - h, image_size - w
    if free_r < 0 or free_c < 0:
        raise SpecError(f"{n_chars} chars at scale {scale} do not fit {image_size}px")
    vert = "top" if anchor.startswith("top") else "bottom" if anchor.startswith("bottom") else "middle"
    horiz = "left" if anchor.endswith("left") else "right" if anchor.endswith("right") else "center"
    row = {"top": 0, "middle": free_r // 2, "bottom": free_r}[vert]
    col = {"left": 0, "center": free_c // 2, "right": free_c}[horiz]
    return row, col


def position_word(spec: RenderSpec, image_size: int, cell: int = 7) -> str:
    """Nearest of the nine anchor words for the spec's placement."""
    h, w = spec.text_size(cell)
    free_r, free_c = image_size - h, image_size - w

    def third(offset: int, free: int) -> int:
        if free <= 0:
            return 1
        frac = offset / free
        return 0 if frac < 1 / 3 else 2 if frac > 2 / 3 else 1

    vert = ("top", "", "bottom")[third(spec.position[0], free_r)]
    horiz = ("left", "", "right")[third(spec.position[1], free_c)]
    if vert and horiz:
        return f"{vert}-{horiz}"
    return vert or horiz or "center"


def color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64)
    return min(PALETTE, key=lambda k: float(np.sum((rgb - np.asarray(PALETTE[k])) ** 2)))


def glyph_mask(spec: RenderSpec, atlas: GlyphAtlas, image_size: int) -> np.ndarray:
    """Boolean (H, W) mask of glyph-on pixels."""
    spec.validate(atlas, image_size)
    mask = np.zeros((image_size, image_size), dtype=bool)
    s = spec.scale
    r0, c0 = spec.position
    size = atlas.cell * s
    for i, ch in enumerate(spec.text):
        block = np.kron(atlas[ch], np.ones((s, s), dtype=bool))
        c = c0 + i * size
        mask[r0:r0 + size, c:c + size] = block
    return mask


def render_text_image(spec: RenderSpec, atlas: GlyphAtlas, image_size: int) -> np.ndarray:
    """Rasterize ``spec`` into a float32 (3, H, W) array in [0, 1]."""
    mask = glyph_mask(spec, atlas, image_size)
    fg = np.asarray(spec.fg_color, dtype=np.float32)[:, None, None]
    bg = np.asarray(spec.bg_color, dtype=np.float32)[:, None, None]
    return np.where(mask[None], fg, bg).astype(np.float32)


def aesthetic_tags_for(spec: RenderSpec, image_size: int) -> tuple[str, ...]:
    """Deterministic VMix-style tags computed from the layout and colours."""
    fg = np.asarray(spec.fg_color)
    saturation = float(fg.max() - fg.min())
    contrast = abs(luminance(spec.fg_color) - luminance(spec.bg_color))
    word = position_word(spec, image_size)
    return (
        f"color:{'high' if saturation > 0.5 else 'low'}",
        f"lighting:{'high' if luminance(spec.bg_color) > 0.5 else 'low'}",
        f"texture:{'high' if contrast > 0.6 else 'low'}",
        f"composition:{'high' if word == 'center' else 'low'}",
    )
