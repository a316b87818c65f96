from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .layers import Attention, LanguageAwareModule, TwoWayBlock, sincos_2d
from .model import (
    FeaturePyramid,
    InvalidPromptError,
    MaskDecoder,
    PatchEncoder,
    ProjectionMLP,
    PromptableSegmenter,
    multi_scale_inject,
    pad_prompts,
    threshold,
    to_image_tensor,
)

__all__ = [
    "Attention",
    "FeaturePyramid",
    "InvalidPromptError",
    "LanguageAwareModule",
    "MaskDecoder",
    "PatchEncoder",
    "ProjectionMLP",
    "PromptableSegmenter",
    "TwoWayBlock",
    "load_checkpoint",
    "multi_scale_inject",
    "pad_prompts",
    "read_checkpoint",
    "save_checkpoint",
    "sincos_2d",
    "threshold",
    "to_image_tensor",
]
