"""MMDiT backbone with Scaled 2D RoPE."""
from .model import (TAGS, MMDiT, MMDiTBlock, ModelConfig, RMSNorm, joint_attention, patchify_raw,
                    timestep_embedding, unpatchify_raw)
from .rope import apply_rope, axis_coords, rope_frequencies, rotate, scaled_rope_coords

__all__ = [
    "TAGS", "MMDiT", "MMDiTBlock", "ModelConfig", "RMSNorm", "apply_rope", "axis_coords",
    "joint_attention", "patchify_raw", "rope_frequencies", "rotate", "scaled_rope_coords",
    "timestep_embedding", "unpatchify_raw",
]
