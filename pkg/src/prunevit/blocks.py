"""Shared parameter initialization and small attention/FFN building blocks.

The single-head blocks here are used by the prune decoder and the mask
decoder, both of which operate at the guidance dimension d.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .rng import Stream
from .tensor import Tensor


def init_weight(params: dict, name: str, shape, fan_in: int, seed: int) -> None:
    """uniform(-s, s) with s = 1/sqrt(fan_in), from the substream named after
    the parameter."""
    s = 1.0 / math.sqrt(fan_in)
    stream = Stream.from_seed(seed, name)
    params[name] = Tensor(stream.uniforms(shape, -s, s), requires_grad=True)


def init_zeros(params: dict, name: str, shape) -> None:
    params[name] = Tensor(np.zeros(shape), requires_grad=True)


def init_linear(params: dict, prefix: str, d_in: int, d_out: int, seed: int) -> None:
    init_weight(params, f"{prefix}.w", (d_in, d_out), d_in, seed)
    init_zeros(params, f"{prefix}.b", (d_out,))


def linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return ops.add_bias(ops.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def init_attn(params: dict, prefix: str, dim: int, seed: int) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{part}", dim, dim, seed)


def attn(tgt: Tensor, src: Tensor, params: dict, prefix: str) -> Tensor:
    """Single-head scaled dot-product attention of tgt rows over src rows."""
    d = tgt.shape[1]
    q = linear(tgt, params, f"{prefix}.q")
    k = linear(src, params, f"{prefix}.k")
    v = linear(src, params, f"{prefix}.v")
    scores = ops.mul(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d))
    out = ops.matmul(ops.softmax(scores), v)
    return linear(out, params, f"{prefix}.o")


def init_ffn(params: dict, prefix: str, dim: int, hidden: int, seed: int) -> None:
    init_linear(params, f"{prefix}.w1", dim, hidden, seed)
    init_linear(params, f"{prefix}.w2", hidden, dim, seed)


def ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ops.gelu(linear(x, params, f"{prefix}.w1"))
    return linear(h, params, f"{prefix}.w2")
