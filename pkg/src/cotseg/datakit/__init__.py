from .manifest import Category, SampleRecord, inline_mask, load_manifest, validate_split, write_manifest
from .qa import DEFAULT_QA_TEMPLATES, QaTemplate, simulate_step1
from .rle import decode_mask, encode_mask
from .sampling import MixedSample, mixture_sampler

__all__ = [
    "Category",
    "DEFAULT_QA_TEMPLATES",
    "MixedSample",
    "QaTemplate",
    "SampleRecord",
    "decode_mask",
    "encode_mask",
    "inline_mask",
    "load_manifest",
    "mixture_sampler",
    "simulate_step1",
    "validate_split",
    "write_manifest",
]
