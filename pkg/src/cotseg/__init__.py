"""Reasoning segmentation with chain-of-thought prompting of a frozen
multimodal language model and a language-aware promptable segmenter."""

__version__ = "0.1.0"
