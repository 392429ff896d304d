"""The full staged model: backbone + shared scoring decoder + mask decoder.

``forward`` owns the stage partition. At every boundary the scoring decoder
sees all N token rows (frozen ones at their freeze-point values), so frozen
tokens can be reactivated, and the merged N x D sequence always reaches the
mask decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import TokenState, VitConfig, embed_patches, init_vit_params, run_stage
from .maskdec import decode_mask, init_dec_params
from .prune import (PruneSchedule, apply_pruning_stage, init_prune_params,
                    merge_for_decoder)
from .synthdata import GuidanceProvider
from .tensor import NumericsError, Tensor


@dataclass
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    guide_dim: int = 32
    n_tasks: int = 8


class Model:
    """Holds every parameter tensor under its canonical name."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.params: dict = {}
        self.params.update(init_vit_params(cfg.vit, seed))
        self.params.update(init_prune_params(cfg.vit.embed_dim, cfg.guide_dim, seed))
        self.params.update(init_dec_params(cfg.vit.embed_dim, cfg.guide_dim,
                                           cfg.vit.patch_size, seed))
        self.guidance = GuidanceProvider(cfg.n_tasks, cfg.guide_dim, seed)
        self.params["guide.table"] = self.guidance.table

    def set_trainable(self, prefixes) -> None:
        """Only parameters under the given name prefixes receive gradients."""
        for name, tensor in self.params.items():
            tensor.requires_grad = any(name.startswith(p) for p in prefixes)

    def trainable_names(self) -> list:
        return [n for n, t in self.params.items() if t.requires_grad]

    def forward(self, image, task_id: int, schedule: PruneSchedule,
                mode: str = "infer", score_fn=None):
        """Mask logits (H, W) plus one record per pruning stage.

        Records carry the stage scores and, per mode, the hard keep-mask or
        the soft gate tensor.
        """
        vit = self.cfg.vit
        schedule.validate_for(vit.num_layers)
        if mode not in ("infer", "train"):
            raise NumericsError(f"unknown forward mode {mode!r}")

        seg = self.guidance.guidance_for(task_id)
        values = embed_patches(image, vit, self.params)
        state = TokenState(active=np.ones(vit.n_tokens, dtype=bool), values=values)
        prev = state.values  # freeze reference for train-mode blending
        records = []
        layer = 0
        for boundary, rate in zip(schedule.boundaries, schedule.rates):
            state = run_stage(state, range(layer, boundary), self.params, vit)
            layer = boundary
            state, rec = apply_pruning_stage(
                state, seg, self.params, rate, schedule.alpha, mode,
                prev_values=prev, score_fn=score_fn)
            prev = state.values
            records.append(rec)
        state = run_stage(state, range(layer, vit.num_layers), self.params, vit)
        merged = merge_for_decoder(state)
        logits = decode_mask(merged, seg, self.params, vit.grid_h, vit.grid_w,
                             vit.patch_size)
        return logits, records
