"""Attention building blocks shared by the encoder, adapters and decoder."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ShapeError


def sincos_2d(h: int, w: int, dim: int, *, dtype=torch.float32, device=None) -> Tensor:
    """Fixed 2-D sine/cosine positional encoding, shape ``(h * w, dim)``."""
    if dim % 4:
        raise ShapeError(f"positional encoding width {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    pe = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return pe.to(dtype=dtype, device=device)


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections.

    ``key_mask`` marks valid keys with True. Returns the attended values and,
    on request, the per-head attention weights ``(B, heads, Nq, Nk)``.
    """

    def __init__(self, dim: int, num_heads: int = 4, bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(dim, dim, bias=bias)
        self.v_proj = nn.Linear(dim, dim, bias=bias)
        self.out_proj = nn.Linear(dim, dim, bias=bias)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.dim // self.num_heads).transpose(1, 2)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None, return_weights: bool = False):
        for name, t in (("query", q), ("key", k), ("value", v)):
            if t.shape[-1] != self.dim:
                raise ShapeError(f"{name} width {t.shape[-1]} != attention width {self.dim}")
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], self.dim)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None, bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, bias=bias)
        self.fc2 = nn.Linear(hidden, out or dim, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block used inside the image encoder."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0, bias: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, bias=bias)
        self.attn = Attention(dim, num_heads, bias=bias)
        self.norm2 = nn.LayerNorm(dim, bias=bias)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class LanguageAwareModule(nn.Module):
    """Cross-attention adapter: visual tokens query the prompt embedding.

    Output = V + out_proj(h), with h = a + FFN(a) and a = Attn(V -> E).
    ``out_proj`` starts at zero so a fresh adapter is the identity.
    Prompt tokens get no positional encoding; visual tokens do.
    """

    def __init__(self, dim: int, num_heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm_v = nn.LayerNorm(dim)
        self.norm_e = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = Mlp(dim, int(dim * mlp_ratio))
        self.out_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, v: Tensor, e: Tensor, e_mask: Tensor | None = None, return_weights: bool = False):
        """``v``: ``(B, h, w, d)`` feature map; ``e``: ``(B, k, d)`` prompt."""
        if v.shape[-1] != e.shape[-1] or v.shape[-1] != self.attn.dim:
            raise ShapeError(f"feature width {v.shape[-1]} / prompt width {e.shape[-1]} / adapter width {self.attn.dim}")
        b, h, w, d = v.shape
        x = v.reshape(b, h * w, d)
        q = self.norm_v(x) + sincos_2d(h, w, d, dtype=x.dtype, device=x.device)
        ek = self.norm_e(e)
        a, weights = self.attn(q, ek, ek, e_mask, return_weights=True)
        hidden = a + self.ffn(self.norm_ffn(a))
        out = (x + self.out_proj(hidden)).reshape(b, h, w, d)
        return (out, weights) if return_weights else out


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image attention, token MLP, image->token
    attention. Positional encodings are added to image keys/queries only."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm_t2i = nn.LayerNorm(dim)
        self.t2i = Attention(dim, num_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm_i2t = nn.LayerNorm(dim)
        self.norm_img = nn.LayerNorm(dim)
        self.i2t = Attention(dim, num_heads)

    def forward(self, tokens: Tensor, img: Tensor, img_pe: Tensor, token_mask: Tensor):
        t = self.norm_self(tokens)
        tokens = tokens + self.self_attn(t, t, t, token_mask)
        t = self.norm_t2i(tokens)
        tokens = tokens + self.t2i(t, img + img_pe, img)
        tokens = tokens + self.mlp(self.norm_mlp(tokens))
        t = self.norm_i2t(tokens)
        i = self.norm_img(img)
        img = img + self.i2t(i + img_pe, t, t, token_mask)
        return tokens, img
