"""Guidance-conditioned token scoring, top-k pruning, and reactivation.

A single scoring decoder is shared by every pruning stage. At each stage
boundary it scores all N tokens (frozen ones included, which is what lets a
token dropped earlier come back), and either hard-selects the top-k at
inference or soft-gates token values during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import attn, ffn, init_attn, init_ffn, init_linear, init_zeros, linear
from .tensor import NumericsError, Tensor


@dataclass
class PruneSchedule:
    """Stage boundaries (1-based layer indices) and per-stage pruning rates."""

    boundaries: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    alpha: float = 10.0

    def __post_init__(self):
        if len(self.boundaries) != len(self.rates):
            raise NumericsError(
                f"schedule has {len(self.boundaries)} boundaries but "
                f"{len(self.rates)} rates")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise NumericsError(f"boundaries not strictly increasing: {self.boundaries}")
        if self.boundaries and self.boundaries[0] < 1:
            raise NumericsError(f"boundaries must be >= 1: {self.boundaries}")
        for r in self.rates:
            if not 0.0 <= r < 1.0:
                raise NumericsError(f"pruning rate {r} outside [0, 1)")
        if self.alpha <= 0:
            raise NumericsError(f"gate sharpness must be positive, got {self.alpha}")

    @property
    def n_stages(self) -> int:
        return len(self.boundaries)

    def validate_for(self, num_layers: int) -> None:
        if self.boundaries and self.boundaries[-1] > num_layers:
            raise NumericsError(
                f"boundary {self.boundaries[-1]} beyond last layer {num_layers}")


def retained_count(n: int, r: float) -> int:
    """Tokens kept at rate r: ceil((1 - r) * N)."""
    if not 0.0 <= r < 1.0:
        raise NumericsError(f"pruning rate {r} outside [0, 1)")
    return int(math.ceil((1.0 - r) * n))


def init_prune_params(embed_dim: int, guide_dim: int, seed: int) -> dict:
    """The single shared scoring decoder, under ``prune.*`` names."""
    params: dict = {}
    init_linear(params, "prune.neck", embed_dim, guide_dim, seed)
    # trainable query token, concatenated in front of the guidance embedding
    init_zeros(params, "prune.query", (1, guide_dim))
    init_attn(params, "prune.self.attn", guide_dim, seed)
    init_ffn(params, "prune.self.ffn", guide_dim, 2 * guide_dim, seed)
    init_attn(params, "prune.cat.attn", guide_dim, seed)
    init_ffn(params, "prune.cat.ffn", guide_dim, 2 * guide_dim, seed)
    init_attn(params, "prune.img.attn", guide_dim, seed)
    return params


def prune_decoder_forward(tokens: Tensor, seg: Tensor, params: dict) -> Tensor:
    """Relevance score per token, length N, differentiable throughout.

    seg is the guidance embedding, shape (d,) or (1, d).
    """
    d = params["prune.query"].shape[1]
    if seg.data.ndim == 1:
        seg = ops.reshape(seg, (1, seg.shape[0]))
    if seg.shape != (1, d):
        raise NumericsError(f"guidance embedding shape {seg.shape}, expected (1, {d})")

    timg = linear(tokens, params, "prune.neck")                       # (N, d)
    cat = ops.concat([params["prune.query"], seg], axis=0)            # (2, d)
    # Residual adds throughout: without them the 2-row guidance sequence
    # collapses to near-identical rows under attention and every token ends
    # up with the same score, which makes the scorer untrainable.
    tcat = ops.add(cat, attn(cat, cat, params, "prune.self.attn"))
    tcat = ops.add(tcat, ffn(tcat, params, "prune.self.ffn"))
    tcat2 = ops.add(tcat, attn(tcat, timg, params, "prune.cat.attn"))
    tcat2 = ops.add(tcat2, ffn(tcat2, params, "prune.cat.ffn"))
    timg2 = ops.add(timg, attn(timg, tcat2, params, "prune.img.attn"))
    query = ops.narrow(tcat2, 0, 0, 1)                                # (1, d)
    scores = ops.matmul(timg2, ops.transpose(query))                  # (N, 1)
    return ops.reshape(scores, (tokens.shape[0],))


def topk_prune_mask(scores, r: float) -> np.ndarray:
    """Binary keep-mask retaining the ceil((1-r)*N) highest scores.

    Ties break toward the lower token index.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n = s.shape[0]
    k = retained_count(n, r)
    order = np.argsort(-s, kind="stable")
    mask = np.zeros(n, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask


def topk_threshold(scores: np.ndarray, r: float) -> float:
    """The k-th highest score, used as the (constant) soft-gate pivot."""
    n = scores.shape[0]
    k = retained_count(n, r)
    return float(np.sort(scores)[::-1][k - 1])


def soft_gate(scores: Tensor, r: float, alpha: float) -> Tensor:
    """Sigmoid relaxation of the top-k mask: sigmoid(alpha * (s - tau)).

    tau is the k-th highest score, treated as a constant during backward.
    """
    tau = topk_threshold(scores.data, r)
    return ops.sigmoid(ops.mul(ops.sub(scores, tau), alpha))


def apply_pruning_stage(state, seg: Tensor, params: dict, r: float, alpha: float,
                        mode: str, prev_values: Tensor | None = None,
                        score_fn=None):
    """Score all N tokens at a stage boundary and prune or gate them.

    In ``infer`` mode the active set becomes the top-k support (reactivating
    any previously frozen token that now scores high). In ``train`` mode all
    tokens stay active and each value row is blended
    ``g * v_new + (1 - g) * v_old`` with the soft gate; ``prev_values`` is the
    freeze-reference (the values entering the stage).

    Returns (new_state, record) where record holds scores and the mask/gates.
    """
    from .backbone import TokenState

    scorer = score_fn or prune_decoder_forward
    scores = scorer(state.values, seg, params)
    if scores.shape[0] != state.n_tokens:
        raise NumericsError("stage scoring must cover all N tokens")
    record = {"scores": scores}
    if mode == "infer":
        mask = topk_prune_mask(scores, r)
        record["mask"] = mask
        new_state = TokenState(active=mask.astype(bool), values=state.values,
                               scores=scores.data.copy())
    elif mode == "train":
        if prev_values is None:
            raise NumericsError("train-mode pruning needs the stage-entry values")
        gates = soft_gate(scores, r, alpha)
        record["gates"] = gates
        blended = ops.add(ops.scale_rows(state.values, gates),
                          ops.scale_rows(prev_values, ops.sub(1.0, gates)))
        new_state = TokenState(active=np.ones(state.n_tokens, dtype=bool),
                               values=blended, scores=scores.data.copy())
    else:
        raise NumericsError(f"unknown pruning mode {mode!r}")
    return new_state, record


def merge_for_decoder(state) -> Tensor:
    """All N token rows in original patch order: fresh values for active
    tokens, freeze-point values for frozen ones."""
    return state.values
