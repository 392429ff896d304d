"""Staged ViT encoder: patch embedding, transformer layers, token freezing.

Frozen tokens are excluded from a stage by gathering the active rows into a
compact sequence, running the layers, and scattering the results back, so a
frozen row is byte-identical before and after the stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import init_linear, init_zeros, init_weight, linear
from .tensor import NumericsError, Tensor


@dataclass
class VitConfig:
    image_height: int = 32
    image_width: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise NumericsError(
                f"image {self.image_height}x{self.image_width} not divisible by "
                f"patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise NumericsError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_tokens(self) -> int:
        return patch_grid_length(self.image_height, self.image_width, self.patch_size)


@dataclass
class TokenState:
    """Per-token activity over the full length-N sequence.

    ``values`` always holds all N rows; ``active`` marks which rows the next
    stage computes on. ``scores`` is the most recent relevance score vector.
    """

    active: np.ndarray
    values: Tensor
    scores: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]


def patch_grid_length(h: int, w: int, p: int) -> int:
    """Number of image tokens for an h x w image with p x p patches."""
    if h % p or w % p:
        raise NumericsError(f"image {h}x{w} not divisible by patch size {p}")
    return (h * w) // (p * p)


def init_vit_params(cfg: VitConfig, seed: int) -> dict:
    """Backbone parameters under canonical ``vit.*`` names."""
    params: dict = {}
    pin = 3 * cfg.patch_size * cfg.patch_size
    d = cfg.embed_dim
    init_linear(params, "vit.patch", pin, d, seed)
    init_weight(params, "vit.pos", (cfg.n_tokens, d), d, seed)
    for i in range(cfg.num_layers):
        pre = f"vit.layer{i}"
        for ln in ("ln1", "ln2"):
            params[f"{pre}.{ln}.g"] = Tensor(np.ones(d), requires_grad=True)
            init_zeros(params, f"{pre}.{ln}.b", (d,))
        for part in ("q", "k", "v", "o"):
            init_linear(params, f"{pre}.attn.{part}", d, d, seed)
        init_linear(params, f"{pre}.ffn.w1", d, cfg.ffn_mult * d, seed)
        init_linear(params, f"{pre}.ffn.w2", cfg.ffn_mult * d, d, seed)
    return params


def extract_patches(img: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """Flatten each P x P x 3 block to a row, row-major over the patch grid."""
    c, h, w = img.shape
    if (c, h, w) != (3, cfg.image_height, cfg.image_width):
        raise NumericsError(
            f"image shape {img.shape} does not match config "
            f"(3, {cfg.image_height}, {cfg.image_width})")
    p = cfg.patch_size
    # (3, gh, P, gw, P) -> (gh, gw, 3, P, P) -> (N, 3*P*P)
    blocks = img.reshape(3, cfg.grid_h, p, cfg.grid_w, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(blocks.reshape(cfg.n_tokens, 3 * p * p))


def embed_patches(img, cfg: VitConfig, params: dict) -> Tensor:
    """Project flattened patches and add the learned positional embedding."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    patches = Tensor(extract_patches(arr, cfg), dtype=params["vit.patch.w"].dtype)
    tokens = linear(patches, params, "vit.patch")
    return ops.add(tokens, params["vit.pos"])


def vit_layer(tokens: Tensor, params: dict, layer: int, cfg: VitConfig) -> Tensor:
    """Pre-norm MHSA with residual, then pre-norm FFN with residual."""
    pre = f"vit.layer{layer}"
    d = cfg.embed_dim
    dh = d // cfg.num_heads

    h = ops.layer_norm(tokens, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    q = linear(h, params, f"{pre}.attn.q")
    k = linear(h, params, f"{pre}.attn.k")
    v = linear(h, params, f"{pre}.attn.v")
    attn_out = linear(ops.mhsa_core(q, k, v, cfg.num_heads), params, f"{pre}.attn.o")
    tokens = ops.add(tokens, attn_out)

    h2 = ops.layer_norm(tokens, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    mid = ops.gelu(linear(h2, params, f"{pre}.ffn.w1"))
    return ops.add(tokens, linear(mid, params, f"{pre}.ffn.w2"))


def run_stage(state: TokenState, layers, params: dict, cfg: VitConfig) -> TokenState:
    """Run consecutive layers over the active tokens only.

    Active rows are compacted, processed, and scattered back; frozen rows are
    carried through untouched.
    """
    idx = np.flatnonzero(state.active)
    if idx.size == 0:
        raise NumericsError("run_stage: no active tokens")
    layers = list(layers)
    if not layers:
        return state
    seq = ops.gather_rows(state.values, idx)
    for layer in layers:
        seq = vit_layer(seq, params, layer, cfg)
    merged = ops.scatter_rows(state.values, idx, seq)
    return TokenState(active=state.active.copy(), values=merged, scores=state.scores)
