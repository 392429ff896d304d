"""Differentiable operations over :class:`~prunevit.tensor.Tensor`.

Shape rules are intentionally narrow: each op supports exactly what the model
needs (2-d matrices, 1-d vectors, scalars, plus a row-bias and a row-scale
broadcast). softmax and layer_norm act over the last axis. Reductions and
matmul accumulate in float64 before casting back to the input dtype.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import NumericsError, Tensor, result_tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else x


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _cast(arr, dtype):
    return arr.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    """Elementwise a + b. Accepts a python float for either side."""
    av, bv = _as_array(a), _as_array(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        raise NumericsError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return (g if isinstance(a, Tensor) else None,
                g if isinstance(b, Tensor) else None)

    return result_tensor(av + bv, "add", (a, b), bwd)


def sub(a, b):
    av, bv = _as_array(a), _as_array(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        raise NumericsError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return (g if isinstance(a, Tensor) else None,
                -g if isinstance(b, Tensor) else None)

    return result_tensor(av - bv, "sub", (a, b), bwd)


def mul(a, b):
    """Elementwise product; either operand may be a python float."""
    av, bv = _as_array(a), _as_array(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        raise NumericsError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return (g * bv if isinstance(a, Tensor) else None,
                g * av if isinstance(b, Tensor) else None)

    return result_tensor(av * bv, "mul", (a, b), bwd)


def div(a, b):
    av, bv = _as_array(a), _as_array(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        raise NumericsError(f"div: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        ga = g / bv if isinstance(a, Tensor) else None
        gb = -g * av / (bv * bv) if isinstance(b, Tensor) else None
        return (ga, gb)

    return result_tensor(av / bv, "div", (a, b), bwd)


def add_bias(x: Tensor, b: Tensor):
    """x[M, D] + b[D], broadcast over rows; bias grad sums over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise NumericsError(f"add_bias: incompatible shapes {x.shape}, {b.shape}")

    def bwd(g):
        return (g, _cast(g.sum(axis=0, dtype=np.float64), b.dtype))

    return result_tensor(x.data + b.data, "add_bias", (x, b), bwd)


def scale_rows(x: Tensor, s: Tensor):
    """Multiply row i of x[M, D] by s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise NumericsError(f"scale_rows: incompatible shapes {x.shape}, {s.shape}")
    sv = s.data[:, None]

    def bwd(g):
        gx = g * sv
        gs = _cast((g * x.data).sum(axis=1, dtype=np.float64), s.dtype)
        return (gx, gs)

    return result_tensor(x.data * sv, "scale_rows", (x, s), bwd)


def matmul(a: Tensor, b: Tensor):
    """Matrix product a[m, k] @ b[k, n], accumulated in float64."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError(f"matmul: expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    dtype = np.result_type(a.data.dtype, b.data.dtype)
    out = _cast(np.matmul(a.data, b.data, dtype=np.float64), dtype)

    def bwd(g):
        # Backward runs at storage precision; the f64 accumulation above is
        # what stabilizes the forward values the gradients are built from.
        return (_cast(g @ b.data.T, a.dtype), _cast(a.data.T @ g, b.dtype))

    return result_tensor(out, "matmul", (a, b), bwd)


def transpose(x: Tensor):
    if x.data.ndim != 2:
        raise NumericsError(f"transpose: expects a matrix, got {x.shape}")

    def bwd(g):
        return (g.T,)

    return result_tensor(x.data.T, "transpose", (x,), bwd)


def reshape(x: Tensor, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise NumericsError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return result_tensor(x.data.reshape(shape), "reshape", (x,), bwd)


# ---------------------------------------------------------------------------
# indexing and assembly
# ---------------------------------------------------------------------------


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    nd = tensors[0].data.ndim
    if axis < 0 or axis >= nd:
        raise NumericsError(f"concat: axis {axis} out of range for rank {nd}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return result_tensor(np.concatenate([t.data for t in tensors], axis=axis),
                         "concat", tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int):
    """Contiguous slice of ``length`` entries along ``axis``."""
    if axis < 0 or axis >= x.data.ndim:
        raise NumericsError(f"narrow: axis {axis} out of range for rank {x.data.ndim}")
    if start < 0 or start + length > x.shape[axis]:
        raise NumericsError(
            f"narrow: [{start}, {start + length}) outside axis of size {x.shape[axis]}")
    sl = tuple(slice(start, start + length) if i == axis else slice(None)
               for i in range(x.data.ndim))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return result_tensor(x.data[sl].copy(), "narrow", (x,), bwd)


def gather_rows(x: Tensor, idx):
    """Rows of x at integer positions idx; index argument is not differentiated."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise NumericsError(f"gather_rows: expects a matrix, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise NumericsError(f"gather_rows: index out of bounds for {x.shape[0]} rows")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return result_tensor(x.data[idx], "gather_rows", (x,), bwd)


def scatter_rows(base: Tensor, idx, rows: Tensor):
    """Copy of base with base[idx] replaced by rows; untouched rows pass through."""
    idx = np.asarray(idx, dtype=np.int64)
    if base.data.ndim != 2 or rows.data.ndim != 2 or base.shape[1] != rows.shape[1]:
        raise NumericsError(
            f"scatter_rows: incompatible shapes {base.shape}, {rows.shape}")
    if idx.shape[0] != rows.shape[0]:
        raise NumericsError("scatter_rows: index count must match row count")
    if np.unique(idx).size != idx.size:
        raise NumericsError("scatter_rows: duplicate indices")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise NumericsError(f"scatter_rows: index out of bounds for {base.shape[0]} rows")
    out = base.data.copy()
    out[idx] = rows.data

    def bwd(g):
        gb = g.copy()
        gb[idx] = 0.0
        return (gb, g[idx])

    return result_tensor(out, "scatter_rows", (base, rows), bwd)


def patches_to_image(x: Tensor, grid_h: int, grid_w: int, patch: int):
    """Scatter per-token P*P blocks x[N, P*P] into an (H, W) image."""
    n, pp = x.shape
    if n != grid_h * grid_w or pp != patch * patch:
        raise NumericsError(
            f"patches_to_image: {x.shape} does not match grid "
            f"{grid_h}x{grid_w}, patch {patch}")
    h, w = grid_h * patch, grid_w * patch
    img = (x.data.reshape(grid_h, grid_w, patch, patch)
           .transpose(0, 2, 1, 3).reshape(h, w))

    def bwd(g):
        gx = (g.reshape(grid_h, patch, grid_w, patch)
              .transpose(0, 2, 1, 3).reshape(n, pp))
        return (np.ascontiguousarray(gx),)

    return result_tensor(img, "patches_to_image", (x,), bwd)


def mhsa_core(q: Tensor, k: Tensor, v: Tensor, num_heads: int):
    """Fused scaled dot-product attention over ``num_heads`` column blocks.

    q, k, v are (M, D) with D split into head slices; returns the (M, D)
    concatenation of per-head softmax(q k^T / sqrt(dh)) v. Equivalent to the
    head-by-head composition of narrow/matmul/softmax, just batched.
    """
    m, d = q.shape
    if k.shape != (m, d) or v.shape != (m, d):
        raise NumericsError(f"mhsa_core: shapes {q.shape}, {k.shape}, {v.shape} differ")
    if d % num_heads:
        raise NumericsError(f"mhsa_core: dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):  # (M, D) -> (heads, M, dh)
        return t.data.reshape(m, num_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh.astype(np.float64) @ kh.astype(np.float64).transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = _cast(e / e.sum(axis=-1, keepdims=True), q.dtype)
    out = _cast(attn.astype(np.float64) @ vh.astype(np.float64), q.dtype)

    def bwd(g):
        gh = g.reshape(m, num_heads, dh).transpose(1, 0, 2)
        dv = attn.transpose(0, 2, 1) @ gh
        da = gh @ vh.transpose(0, 2, 1)
        ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = ds @ kh
        dk = ds.transpose(0, 2, 1) @ qh

        def join(t):  # (heads, M, dh) -> (M, D)
            return np.ascontiguousarray(
                t.transpose(1, 0, 2).reshape(m, d)).astype(q.dtype, copy=False)

        return (join(dq), join(dk), join(dv))

    return result_tensor(
        np.ascontiguousarray(out.transpose(1, 0, 2).reshape(m, d)),
        "mhsa_core", (q, k, v), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor):
    """Softmax over the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = _cast(e / e.sum(axis=-1, keepdims=True, dtype=np.float64), x.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64)
        return (_cast(y * (g - dot), x.dtype),)

    return result_tensor(y, "softmax", (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Uses the population variance with an eps guard in the denominator.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise NumericsError(
            f"layer_norm: scale/shift must have shape ({d},), got {gamma.shape}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv_std
    y = _cast(gamma.data * xhat + beta.data, x.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        dgamma = _cast((g64 * xhat).sum(axis=tuple(range(g.ndim - 1))), gamma.dtype)
        dbeta = _cast(g64.sum(axis=tuple(range(g.ndim - 1))), beta.dtype)
        dxhat = g64 * gamma.data.astype(np.float64)
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (_cast(dx, x.dtype), dgamma, dbeta)

    return result_tensor(y, "layer_norm", (x, gamma, beta), bwd)


def gelu(x: Tensor):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv * xv.dtype.type(_INV_SQRT2)))
    y = xv * cdf

    def bwd(g):
        pdf = xv.dtype.type(_INV_SQRT2PI) * np.exp(xv.dtype.type(-0.5) * xv * xv)
        return (_cast(g * (cdf + xv * pdf), x.dtype),)

    return result_tensor(y, "gelu", (x,), bwd)


def sigmoid(x: Tensor):
    with np.errstate(over="ignore"):  # exp underflow/overflow saturates safely
        y = _cast(1.0 / (1.0 + np.exp(-x.data.astype(np.float64))), x.dtype)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return result_tensor(y, "sigmoid", (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def tsum(x: Tensor):
    """Sum of all entries, as a scalar tensor."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return (np.full_like(x.data, g[()] if g.ndim == 0 else g),)

    return result_tensor(out, "sum", (x,), bwd)


def tmean(x: Tensor):
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return (np.full_like(x.data, (g[()] if g.ndim == 0 else g) / n),)

    return result_tensor(out, "mean", (x,), bwd)


def bce_with_logits(logits: Tensor, target):
    """Mean binary cross-entropy from logits, in the stable log-sum form.

    target is a constant array of {0, 1} with the same shape as logits.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise NumericsError(
            f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    z = logits.data.astype(np.float64)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=logits.dtype)
    n = z.size

    def bwd(g):
        p = 1.0 / (1.0 + np.exp(-z))
        gv = g[()] if g.ndim == 0 else g
        return (_cast(gv * (p - t) / n, logits.dtype),)

    return result_tensor(out, "bce_with_logits", (logits,), bwd)


def bce_probs(p: Tensor, target, clamp: float = 1e-6):
    """Mean binary cross-entropy taking probabilities directly.

    Probabilities are clamped to [clamp, 1-clamp]; gradient is zero where the
    clamp is active.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise NumericsError(f"bce_probs: shape mismatch {p.shape} vs {t.shape}")
    pv = p.data.astype(np.float64)
    pc = np.clip(pv, clamp, 1.0 - clamp)
    per = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    out = np.asarray(per.mean(), dtype=p.dtype)
    n = pv.size
    inside = (pv > clamp) & (pv < 1.0 - clamp)

    def bwd(g):
        gv = g[()] if g.ndim == 0 else g
        gp = np.where(inside, (-t / pc + (1.0 - t) / (1.0 - pc)) / n, 0.0)
        return (_cast(gv * gp, p.dtype),)

    return result_tensor(out, "bce_probs", (p,), bwd)
