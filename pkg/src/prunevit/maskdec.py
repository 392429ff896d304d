"""Lightweight guidance-conditioned mask decoder.

Merged tokens are projected to the guidance dimension, refined by two rounds
of two-way cross-attention against the guidance token (with residuals so the
image content survives the single-token source), and mapped token-by-token to
P x P pixel logits placed at the token's patch location.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .blocks import attn, ffn, init_attn, init_ffn, init_linear, linear
from .tensor import NumericsError, Tensor

DECODER_ROUNDS = 2


def init_dec_params(embed_dim: int, guide_dim: int, patch_size: int, seed: int) -> dict:
    params: dict = {}
    init_linear(params, "dec.proj", embed_dim, guide_dim, seed)
    for i in range(DECODER_ROUNDS):
        pre = f"dec.round{i}"
        init_attn(params, f"{pre}.guide.attn", guide_dim, seed)
        init_ffn(params, f"{pre}.guide.ffn", guide_dim, 2 * guide_dim, seed)
        init_attn(params, f"{pre}.tok.attn", guide_dim, seed)
    init_linear(params, "dec.head", guide_dim, patch_size * patch_size, seed)
    return params


def mask_head(tokens_d: Tensor, params: dict, grid_h: int, grid_w: int,
              patch_size: int) -> Tensor:
    """Per-token P*P logits scattered into an (H, W) logit image."""
    logits_tok = linear(tokens_d, params, "dec.head")
    return ops.patches_to_image(logits_tok, grid_h, grid_w, patch_size)


def decode_mask(tokens: Tensor, seg: Tensor, params: dict, grid_h: int,
                grid_w: int, patch_size: int) -> Tensor:
    """Pixel-level mask logits (H, W) from merged tokens and the guidance
    embedding."""
    if seg.data.ndim == 1:
        seg = ops.reshape(seg, (1, seg.shape[0]))
    n = tokens.shape[0]
    if n != grid_h * grid_w:
        raise NumericsError(
            f"decode_mask: {n} tokens do not tile a {grid_h}x{grid_w} grid")

    t = linear(tokens, params, "dec.proj")
    g = seg
    for i in range(DECODER_ROUNDS):
        pre = f"dec.round{i}"
        g = ops.add(g, attn(g, t, params, f"{pre}.guide.attn"))
        g = ops.add(g, ffn(g, params, f"{pre}.guide.ffn"))
        t = ops.add(t, attn(t, g, params, f"{pre}.tok.attn"))
    return mask_head(t, params, grid_h, grid_w, patch_size)
