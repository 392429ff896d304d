"""Analytic FLOPs accounting for staged token pruning.

Two usage modes:

* calibrated -- a uniform per-layer cost (e.g. a published baseline divided by
  the layer count); the estimate is then linear in the retained-token fraction
  at each layer.
* analytic -- per-layer cost built from the transformer shapes, with a
  token-linear part (projections, FFN) and a token-quadratic attention part.

A multiply-accumulate counts as two FLOPs throughout.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

from .prune import PruneSchedule, retained_count
from .tensor import NumericsError


@dataclass
class CostConfig:
    total_layers: int
    per_layer_cost: float
    prune_decoder_cost: float = 0.0
    attention_mode: str = "global"  # "global" or "windowed"
    window_tokens: int = 0

    def __post_init__(self):
        if self.per_layer_cost <= 0:
            raise NumericsError(f"per-layer cost must be positive: {self.per_layer_cost}")
        if self.attention_mode not in ("global", "windowed"):
            raise NumericsError(f"unknown attention mode {self.attention_mode!r}")
        if self.attention_mode == "windowed" and self.window_tokens <= 0:
            raise NumericsError("windowed mode needs a positive window token count")


def analytic_layer_cost(n_tokens: int, embed_dim: int, heads: int, ffn_mult: int,
                        attention_mode: str = "global",
                        window_tokens: int = 0) -> float:
    """FLOPs for one transformer layer at the given sequence length.

    QKV + output projections: 2 * 4 * N * D^2; attention scores and weighted
    sum: 2 * 2 * N^2 * D (per window in windowed mode); FFN: 2 * 2 * N * D *
    ffn_mult * D. Head count does not change the total.
    """
    if n_tokens < 1 or embed_dim < 1 or heads < 1 or ffn_mult < 1:
        raise NumericsError("analytic_layer_cost: dimensions must be positive")
    n, d = float(n_tokens), float(embed_dim)
    proj = 2.0 * 4.0 * n * d * d
    if attention_mode == "windowed":
        w = min(window_tokens, n_tokens)
        n_windows = math.ceil(n_tokens / w)
        quad = n_windows * 2.0 * 2.0 * float(w) ** 2 * d
    else:
        quad = 2.0 * 2.0 * n * n * d
    ffn = 2.0 * 2.0 * n * d * ffn_mult * d
    return proj + quad + ffn


def retained_fraction_per_layer(schedule: PruneSchedule, total_layers: int) -> list:
    """Retained-token fraction in force at each layer 1..L.

    Full sequence up to and including the first boundary layer; 1 - r_m from
    just after boundary l_m until the next boundary.
    """
    schedule.validate_for(total_layers)
    fractions = []
    frac = 1.0
    stage = 0
    for layer in range(1, total_layers + 1):
        fractions.append(frac)
        if stage < schedule.n_stages and layer == schedule.boundaries[stage]:
            frac = 1.0 - schedule.rates[stage]
            stage += 1
    return fractions


def flops_estimate(schedule: PruneSchedule, cfg: CostConfig,
                   include_decoder_overhead: bool = False) -> float:
    """Total FLOPs for a schedule under the calibrated linear model."""
    total = cfg.per_layer_cost * sum(
        retained_fraction_per_layer(schedule, cfg.total_layers))
    if include_decoder_overhead:
        total += cfg.prune_decoder_cost * schedule.n_stages
    return total


def flops_estimate_analytic(schedule: PruneSchedule, n_tokens: int, embed_dim: int,
                            heads: int, ffn_mult: int, total_layers: int,
                            attention_mode: str = "global", window_tokens: int = 0,
                            prune_decoder_cost: float = 0.0,
                            include_decoder_overhead: bool = False) -> float:
    """Per-layer analytic costs at the retained token count in force."""
    fractions = retained_fraction_per_layer(schedule, total_layers)
    total = 0.0
    for frac in fractions:
        n_active = retained_count(n_tokens, 1.0 - frac) if frac < 1.0 else n_tokens
        total += analytic_layer_cost(n_active, embed_dim, heads, ffn_mult,
                                     attention_mode, window_tokens)
    if include_decoder_overhead:
        total += prune_decoder_cost * schedule.n_stages
    return total


def analytic_prune_decoder_cost(n_tokens: int, embed_dim: int, guide_dim: int) -> float:
    """FLOPs for one scoring-decoder invocation (matmul terms only)."""
    n, d_big, d = float(n_tokens), float(embed_dim), float(guide_dim)
    neck = 2.0 * n * d_big * d
    self_attn = 2.0 * (4.0 * 2 * d * d + 2.0 * 2 * 2 * d)  # 2-token sequence
    self_ffn = 2.0 * 2.0 * 2 * d * 2 * d
    cat_attn = 2.0 * (2 * d * d + 2.0 * n * d * d + 2.0 * 2 * n * d + 2 * d * d)
    cat_ffn = 2.0 * 2.0 * 2 * d * 2 * d
    img_attn = 2.0 * (n * d * d + 2.0 * 2 * d * d + 2.0 * 2 * n * d + n * d * d)
    score = 2.0 * n * d
    return neck + self_attn + self_ffn + cat_attn + cat_ffn + img_attn + score


def sweep(boundaries_grid, rates_grid, cfg: CostConfig,
          include_decoder_overhead: bool = False, alpha: float = 10.0) -> list:
    """Exhaustive (boundaries, rates) cross product, ascending by FLOPs.

    Rate tuples whose length does not match a boundary tuple are skipped.
    Returns rows of (boundaries, rates, flops).
    """
    if not boundaries_grid or not rates_grid:
        raise NumericsError("sweep needs nonempty grids")
    rows = []
    for bounds, rates in itertools.product(boundaries_grid, rates_grid):
        if len(bounds) != len(rates):
            continue
        sched = PruneSchedule(boundaries=list(bounds), rates=list(rates), alpha=alpha)
        rows.append((tuple(bounds), tuple(rates),
                     flops_estimate(sched, cfg, include_decoder_overhead)))
    rows.sort(key=lambda row: (row[2], row[0], row[1]))
    return rows


def write_sweep_csv(rows, path) -> None:
    """CSV with header boundaries,rates,gflops; lists are |-separated and
    rates are written as integer percentages."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["boundaries", "rates", "gflops"])
        for bounds, rates, flops in rows:
            writer.writerow(["|".join(str(b) for b in bounds),
                             "|".join(str(int(round(r * 100))) for r in rates),
                             f"{flops:.6g}"])
