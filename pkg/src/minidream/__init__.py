"""Desk-scale bilingual glyph text-to-image pipeline built around an MMDiT backbone."""

__version__ = "0.1.0"
