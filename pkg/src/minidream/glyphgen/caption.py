"""Template captions in two toy dialects (en-toy for latin text, zh-toy for cjk-like)."""
from __future__ import annotations

from dataclasses import dataclass

from .atlas import CJK_BASE, CJK_COUNT
from .render import ANCHORS, PALETTE, RenderSpec, color_name, position_word

STYLES = ("short", "long", "textual")

ZH_COLORS = {
    "black": "黑色", "white": "白色", "red": "红色", "green": "绿色",
    "blue": "蓝色", "yellow": "黄色", "cyan": "青色", "magenta": "品红",
}
ZH_POSITIONS = dict(zip(ANCHORS, ("左上", "上方", "右上", "左侧", "中央", "右侧", "左下", "下方", "右下")))
SIZE_WORDS = {1: "small", 2: "medium", 3: "large"}
ZH_SIZES = {"small": "小号", "medium": "中号", "large": "大号"}


@dataclass(frozen=True)
class Caption:
    short: str
    long: str
    textual: str
    language: str


def is_cjk(ch: str) -> bool:
    return CJK_BASE <= ord(ch) < CJK_BASE + CJK_COUNT


def language_of(text: str) -> str:
    return "zh-toy" if text and all(is_cjk(c) for c in text) else "en-toy"


def size_word(scale: int) -> str:
    return SIZE_WORDS.get(scale, "large")


def _en(spec: RenderSpec, style: str, image_size: int) -> str:
    color = color_name(spec.fg_color)
    bg = color_name(spec.bg_color)
    pos = position_word(spec, image_size)
    size = size_word(spec.scale)
    if style == "short":
        return f'text "{spec.text}" in {color}'
    if style == "textual":
        extra = f" in {size} letters" if spec.scale > 1 else ""
        return f'The image shows the text "{spec.text}" in {color} at the {pos} on a {bg} background{extra}.'
    tags = " ".join(spec.aesthetic_tags) or "none"
    return (f'A picture with the text "{spec.text}" in {color} letters, placed at the {pos} '
            f"on a {bg} background, {size} size, with tags {tags}.")


def _zh(spec: RenderSpec, style: str, image_size: int) -> str:
    color = ZH_COLORS[color_name(spec.fg_color)]
    bg = ZH_COLORS[color_name(spec.bg_color)]
    pos = ZH_POSITIONS[position_word(spec, image_size)]
    size = ZH_SIZES[size_word(spec.scale)]
    if style == "short":
        return f'文字 "{spec.text}" {color}'
    if style == "textual":
        extra = f" {size} 字体" if spec.scale > 1 else ""
        return f'图中 显示 文字 "{spec.text}" {color} 位置 {pos} 背景 {bg}{extra} 。'
    tags = " ".join(spec.aesthetic_tags) or "none"
    return f'一张 {bg} 背景 的 图片 ， 文字 "{spec.text}" {color} ， 位置 {pos} ， {size} 字体 ， 标签 {tags} 。'


def make_caption(spec: RenderSpec, style: str, image_size: int = 16) -> str:
    if style not in STYLES:
        raise ValueError(f"unknown caption style {style!r}")
    fill = _zh if language_of(spec.text) == "zh-toy" else _en
    return fill(spec, style, image_size)


def make_captions(spec: RenderSpec, image_size: int = 16) -> Caption:
    return Caption(
        short=make_caption(spec, "short", image_size),
        long=make_caption(spec, "long", image_size),
        textual=make_caption(spec, "textual", image_size),
        language=language_of(spec.text),
    )


def template_words() -> list[str]:
    """Every non-text word the templates and prompts may emit (lower-cased)."""
    words = set()
    filler_en = ("the image shows text in at on a background letters picture with placed size tags none "
                 "written of and").split()
    filler_zh = "图中 显示 文字 位置 背景 字体 一张 的 图片 标签".split()
    words.update(filler_en)
    words.update(filler_zh)
    words.update(PALETTE)
    words.update(ZH_COLORS.values())
    words.update(ANCHORS)
    words.update(ZH_POSITIONS.values())
    words.update(SIZE_WORDS.values())
    words.update(ZH_SIZES.values())
    return sorted(words)
