"""Procedural bilingual glyph dataset."""
from .active import LogisticClassifier, active_learning_round, uncertainty_order
from .atlas import AtlasError, GlyphAtlas, build_atlas, default_atlases, merge_atlases
from .caption import Caption, language_of, make_caption, make_captions
from .dataset import (DatasetItem, DatasetManifest, cluster_features, cluster_sample, content_hash,
                      dedup_filter, generate_items, load_png, make_item, quality_score, read_manifest,
                      save_png, write_manifest)
from .render import (ANCHORS, PALETTE, RenderSpec, SpecError, anchor_position, color_name,
                     glyph_mask, position_word, render_text_image)

__all__ = [
    "ANCHORS", "PALETTE", "AtlasError", "Caption", "DatasetItem", "DatasetManifest", "GlyphAtlas",
    "LogisticClassifier", "RenderSpec", "SpecError", "active_learning_round", "anchor_position",
    "build_atlas", "cluster_features", "cluster_sample", "color_name", "content_hash", "dedup_filter",
    "default_atlases", "generate_items", "glyph_mask", "language_of", "load_png", "make_caption",
    "make_captions", "make_item", "merge_atlases", "position_word", "quality_score", "read_manifest",
    "render_text_image", "save_png", "uncertainty_order", "write_manifest",
]
