"""Language-prompted segmentation model.

``PromptableSegmenter`` strings together:

* ``ProjectionMLP``: language-model token embeddings -> visual width.
* ``PatchEncoder``: small patch transformer producing a feature pyramid.
* one ``LanguageAwareModule`` per selected pyramid level.
* ``MaskDecoder``: two-way attention on the deepest level, then upsampling
  with lateral connections to a full-resolution logit map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ConfigurationError, InvalidInputError, ShapeError
from .layers import Attention, Block, LanguageAwareModule, Mlp, TwoWayBlock, sincos_2d


class InvalidPromptError(InvalidInputError):
    pass


@dataclass
class FeaturePyramid:
    """Feature maps ``(B, h_p, w_p, d)`` ordered shallow to deep."""

    levels: list[Tensor]
    strides: list[int]

    def __len__(self) -> int:
        return len(self.levels)

    def replace(self, levels: Sequence[Tensor]) -> "FeaturePyramid":
        return FeaturePyramid(list(levels), list(self.strides))


class ProjectionMLP(nn.Module):
    def __init__(self, d_llm: int, d_vis: int, d_hidden: int = 256, activation: str = "gelu"):
        super().__init__()
        if activation not in ("gelu", "identity"):
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.d_llm = d_llm
        self.fc1 = nn.Linear(d_llm, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_vis)
        self.activation = activation

    def forward(self, raw: Tensor) -> Tensor:
        if raw.shape[-1] != self.d_llm:
            raise ShapeError(f"prompt width {raw.shape[-1]} != backend width {self.d_llm}")
        h = self.fc1(raw)
        if self.activation == "gelu":
            h = F.gelu(h)
        return self.fc2(h)


class PatchEncoder(nn.Module):
    """Patchify, then alternate transformer blocks and 2x2 patch merging.

    Level ``i`` has stride ``patch * 2**i``. ``pos_embed=False`` together with
    ``bias=False`` gives a translation-equivariant encoder.
    """

    def __init__(
        self,
        d_vis: int = 128,
        patch: int = 8,
        num_levels: int = 3,
        depth: int = 1,
        num_heads: int = 4,
        bias: bool = True,
        pos_embed: bool = True,
    ):
        super().__init__()
        self.patch = patch
        self.num_levels = num_levels
        self.pos_embed = pos_embed
        self.d_vis = d_vis
        self.patch_embed = nn.Conv2d(3, d_vis, patch, patch, bias=bias)
        self.merges = nn.ModuleList(nn.Linear(4 * d_vis, d_vis, bias=bias) for _ in range(num_levels - 1))
        self.stages = nn.ModuleList(
            nn.Sequential(*(Block(d_vis, num_heads, bias=bias) for _ in range(depth))) for _ in range(num_levels)
        )
        self.out_norms = nn.ModuleList(nn.LayerNorm(d_vis, bias=bias) for _ in range(num_levels))

    @property
    def strides(self) -> list[int]:
        return [self.patch * 2**i for i in range(self.num_levels)]

    def forward(self, images: Tensor) -> FeaturePyramid:
        """``images``: ``(B, 3, H, W)``."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        step = self.strides[-1]
        if images.shape[2] % step or images.shape[3] % step:
            raise ShapeError(f"image size {tuple(images.shape[2:])} not divisible by deepest stride {step}")
        x = self.patch_embed(images).permute(0, 2, 3, 1)
        levels = []
        for i, stage in enumerate(self.stages):
            if i:
                b, h, w, d = x.shape
                x = x.reshape(b, h // 2, 2, w // 2, 2, d).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * d)
                x = self.merges[i - 1](x)
            b, h, w, d = x.shape
            tokens = x.reshape(b, h * w, d)
            if self.pos_embed:
                tokens = tokens + sincos_2d(h, w, d, dtype=x.dtype, device=x.device)
            tokens = stage(tokens)
            x = tokens.reshape(b, h, w, d)
            levels.append(self.out_norms[i](x))
        return FeaturePyramid(levels, self.strides)


def multi_scale_inject(
    pyramid: FeaturePyramid,
    prompt: Tensor,
    adapters: Mapping[int, LanguageAwareModule] | Mapping[str, LanguageAwareModule],
    scales: Sequence[int],
    prompt_mask: Tensor | None = None,
) -> FeaturePyramid:
    """Run the adapter of every selected level; other levels pass through."""
    adapters = {int(k): v for k, v in adapters.items()}
    if set(scales) != set(adapters):
        raise ConfigurationError(f"adapters for levels {sorted(adapters)} but scales {sorted(scales)} selected")
    out = []
    for i, level in enumerate(pyramid.levels):
        out.append(adapters[i](level, prompt, prompt_mask) if i in adapters else level)
    return pyramid.replace(out)


class MaskDecoder(nn.Module):
    """Two-way attention decoder over the deepest level.

    Prompt tokens are a learned output token followed by the projected prompt
    rows. After the attention blocks the deepest map is upsampled level by
    level with lateral connections, expanded to pixel resolution by a
    sub-pixel head and dotted with a vector generated from the output token.
    """

    def __init__(self, d_vis: int, num_heads: int = 4, depth: int = 2, num_levels: int = 3, patch: int = 8, mask_channels: int = 8):
        super().__init__()
        self.patch = patch
        self.mask_channels = mask_channels
        self.output_token = nn.Parameter(torch.randn(1, 1, d_vis) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(d_vis, num_heads) for _ in range(depth))
        self.norm_final = nn.LayerNorm(d_vis)
        self.final_t2i = Attention(d_vis, num_heads)
        self.laterals = nn.ModuleList(nn.Linear(d_vis, d_vis) for _ in range(num_levels - 1))
        self.fuse_norms = nn.ModuleList(nn.LayerNorm(d_vis) for _ in range(num_levels - 1))
        self.pixel_head = Mlp(d_vis, d_vis, patch * patch * mask_channels)
        self.hyper = Mlp(d_vis, d_vis, mask_channels)

    def forward(self, fused: FeaturePyramid, prompt: Tensor, prompt_mask: Tensor | None = None) -> Tensor:
        b, k, d = prompt.shape
        if prompt_mask is None:
            prompt_mask = torch.ones(b, k, dtype=torch.bool, device=prompt.device)
        if k == 0 or not bool(prompt_mask.any(dim=1).all()):
            raise InvalidPromptError("every sample needs at least one prompt token")
        deep = fused.levels[-1]
        _, h, w, _ = deep.shape
        img = deep.reshape(b, h * w, d)
        pe = sincos_2d(h, w, d, dtype=img.dtype, device=img.device)
        tokens = torch.cat([self.output_token.expand(b, 1, d).to(prompt.dtype), prompt], dim=1)
        mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=prompt.device), prompt_mask], dim=1)
        for blk in self.blocks:
            tokens, img = blk(tokens, img, pe, mask)
        t = self.norm_final(tokens)
        tokens = tokens + self.final_t2i(t, img + pe, img)

        x = img.reshape(b, h, w, d)
        for i in range(len(fused.levels) - 2, -1, -1):
            x = F.interpolate(x.permute(0, 3, 1, 2), scale_factor=2, mode="nearest").permute(0, 2, 3, 1)
            x = self.fuse_norms[i](x + self.laterals[i](fused.levels[i]))
        b, h0, w0, _ = x.shape
        p, c = self.patch, self.mask_channels
        pix = self.pixel_head(x).reshape(b, h0, w0, p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h0 * p, w0 * p, c)
        vec = self.hyper(tokens[:, 0])
        return torch.einsum("bhwc,bc->bhw", pix, vec)


SCALE_CHOICES = ("all", "deepest")


def resolve_scales(scales, num_levels: int) -> list[int]:
    if isinstance(scales, str):
        if scales == "all":
            return list(range(num_levels))
        if scales == "deepest":
            return [num_levels - 1]
        raise ConfigurationError(f"scales must be one of {SCALE_CHOICES} or a list of levels")
    out = sorted({int(s) for s in scales})
    if not out or out[0] < 0 or out[-1] >= num_levels:
        raise ConfigurationError(f"scale indices {out} outside 0..{num_levels - 1}")
    return out


class PromptableSegmenter(nn.Module):
    def __init__(
        self,
        d_llm: int = 64,
        d_vis: int = 128,
        d_hidden: int = 256,
        num_heads: int = 4,
        patch: int = 8,
        num_levels: int = 3,
        encoder_depth: int = 1,
        decoder_depth: int = 2,
        mask_channels: int = 8,
        scales="all",
        seed: int = 0,
    ):
        super().__init__()
        self.config = dict(
            d_llm=d_llm, d_vis=d_vis, d_hidden=d_hidden, num_heads=num_heads, patch=patch,
            num_levels=num_levels, encoder_depth=encoder_depth, decoder_depth=decoder_depth,
            mask_channels=mask_channels, scales=scales if isinstance(scales, str) else list(scales), seed=seed,
        )
        self.scales = resolve_scales(scales, num_levels)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.projection = ProjectionMLP(d_llm, d_vis, d_hidden)
            self.encoder = PatchEncoder(d_vis, patch, num_levels, encoder_depth, num_heads)
            self.adapters = nn.ModuleDict({str(i): LanguageAwareModule(d_vis, num_heads) for i in self.scales})
            self.decoder = MaskDecoder(d_vis, num_heads, decoder_depth, num_levels, patch, mask_channels)
        finally:
            torch.random.set_rng_state(gen_state)

    @property
    def image_multiple(self) -> int:
        return self.encoder.strides[-1]

    def project(self, raw: Tensor) -> Tensor:
        return self.projection(raw)

    def encode_image(self, images: Tensor) -> FeaturePyramid:
        return self.encoder(images)

    def inject(self, pyramid: FeaturePyramid, prompt: Tensor, prompt_mask: Tensor | None = None) -> FeaturePyramid:
        return multi_scale_inject(pyramid, prompt, self.adapters, self.scales, prompt_mask)

    def decode_mask(self, fused: FeaturePyramid, prompt: Tensor, prompt_mask: Tensor | None = None) -> Tensor:
        return self.decoder(fused, prompt, prompt_mask)

    def segment(self, images: Tensor, prompt: Tensor, prompt_mask: Tensor | None = None, pyramid: FeaturePyramid | None = None) -> Tensor:
        """Logits from images and already-projected prompts."""
        if pyramid is None:
            pyramid = self.encode_image(images)
        return self.decode_mask(self.inject(pyramid, prompt, prompt_mask), prompt, prompt_mask)

    def forward(self, images: Tensor, raw_prompt: Tensor, prompt_mask: Tensor | None = None, pyramid: FeaturePyramid | None = None) -> Tensor:
        return self.segment(images, self.project(raw_prompt), prompt_mask, pyramid)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


def to_image_tensor(images, dtype=torch.float32) -> Tensor:
    """Stack ``H x W x 3`` arrays (uint8 or float in [0, 1]) into ``(B, 3, H, W)``."""
    from ..validation import check_image

    arr = np.stack([check_image(im, dtype=np.float64) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def pad_prompts(prompts: Sequence[np.ndarray], width: int | None = None, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    """Pad variable-length prompt matrices to ``(B, k_max, d)`` plus a
    validity mask."""
    if not prompts:
        raise InvalidInputError("no prompts")
    width = width or np.asarray(prompts[0]).shape[1]
    k = max(1, max(np.asarray(p).shape[0] for p in prompts))
    out = torch.zeros(len(prompts), k, width, dtype=dtype)
    mask = torch.zeros(len(prompts), k, dtype=torch.bool)
    for i, p in enumerate(prompts):
        p = np.asarray(p)
        if p.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"prompt {i} has shape {p.shape}, expected (k, {width})")
        out[i, : p.shape[0]] = torch.from_numpy(p.astype(np.float64)).to(dtype)
        mask[i, : p.shape[0]] = True
    return out, mask


def threshold(logits: Tensor, level: float = 0.5) -> np.ndarray:
    return (torch.sigmoid(logits) > level).to(torch.uint8).cpu().numpy()
