"""Guidance-conditioned token pruning for a staged ViT segmenter, with an
analytic FLOPs cost model, on a self-contained numpy tensor/tape substrate."""

from .backbone import TokenState, VitConfig, patch_grid_length
from .costmodel import CostConfig, analytic_layer_cost, flops_estimate, sweep
from .model import Model, ModelConfig
from .objectives import cross_entropy, derive_gt_patch_labels, dice_loss, miou
from .prune import PruneSchedule, soft_gate, topk_prune_mask
from .tensor import NumericsError, Tape, Tensor

__all__ = [
    "CostConfig", "Model", "ModelConfig", "NumericsError", "PruneSchedule",
    "Tape", "Tensor", "TokenState", "VitConfig", "analytic_layer_cost",
    "cross_entropy", "derive_gt_patch_labels", "dice_loss", "flops_estimate",
    "miou", "patch_grid_length", "soft_gate", "sweep", "topk_prune_mask",
]
