"""Two-phase training and evaluation.

Phase A trains backbone + mask decoder (+ guidance table) with no pruning;
phase B starts from the phase-A checkpoint, freezes the backbone, and trains
the scoring decoder + mask decoder (+ guidance table) with the schedule
active and soft gates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import VitConfig
from .costmodel import analytic_prune_decoder_cost, flops_estimate_analytic
from .model import Model, ModelConfig
from .objectives import iou, prune_recall_precision, vltp_loss
from .prune import PruneSchedule
from .rng import Stream
from .serialize import load_params, save_params
from .synthdata import load_dataset
from .tensor import NumericsError, Tape


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moment buffers (float64) plus the step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> None:
    """One bias-corrected adaptive-moment update, in place and deterministic."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params[name]
        g64 = np.asarray(g, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g64)
            state.v[name] = np.zeros_like(g64)
        m = state.m[name] = hyper.beta1 * state.m[name] + (1 - hyper.beta1) * g64
        v = state.v[name] = hyper.beta2 * state.v[name] + (1 - hyper.beta2) * g64 * g64
        m_hat = m / (1 - hyper.beta1 ** t)
        v_hat = v / (1 - hyper.beta2 ** t)
        step = hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        p.data = (p.data.astype(np.float64) - step).astype(p.data.dtype)


@dataclass
class RunConfig:
    phase: str = "A"
    seed: int = 0
    dataset: str = "data"
    checkpoint_out: str = "checkpoint.vltp1"
    checkpoint_in: str | None = None
    metrics_out: str | None = None
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    guide_dim: int = 32
    n_tasks: int = 8
    vit: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in ("A", "B"):
            raise NumericsError(f"phase must be A or B, got {self.phase!r}")
        if self.phase == "B" and not self.checkpoint_in:
            raise NumericsError("phase B requires a phase-A checkpoint")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def vit_config(self) -> VitConfig:
        return VitConfig(**self.vit)

    def prune_schedule(self) -> PruneSchedule:
        if self.phase == "A":
            return PruneSchedule()
        return PruneSchedule(**self.schedule)

    def model_config(self) -> ModelConfig:
        return ModelConfig(vit=self.vit_config(), guide_dim=self.guide_dim,
                           n_tasks=self.n_tasks)


PHASE_TRAINABLE = {
    "A": ("vit.", "dec.", "guide."),
    "B": ("prune.", "dec.", "guide."),
}


def default_schedule_for(num_layers: int, rates=(0.5, 0.5), alpha: float = 10.0):
    """Boundaries after L/2 and 3L/4, the desk analog of pruning late."""
    return PruneSchedule(boundaries=[num_layers // 2, (3 * num_layers) // 4],
                         rates=list(rates), alpha=alpha)


def train(cfg: RunConfig, samples=None, model: Model | None = None):
    """Gradient-descent loop; returns (model, history).

    History is a list of per-epoch dicts; it is also written to
    ``metrics_out`` as JSON lines when configured.
    """
    if samples is None:
        samples, _, _ = load_dataset(cfg.dataset)
    if model is None:
        model = Model(cfg.model_config(), cfg.seed)
    if cfg.phase == "B":
        load_params(cfg.checkpoint_in, model.params)
    model.set_trainable(PHASE_TRAINABLE[cfg.phase])
    schedule = model_schedule = cfg.prune_schedule()
    schedule.validate_for(model.cfg.vit.num_layers)

    hyper = AdamHyper(lr=cfg.lr)
    adam = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        order = list(range(len(samples)))
        Stream.from_seed(cfg.seed, f"epoch/{epoch}").shuffle(order)
        ep_loss, ep_lx, ep_lp, ep_iou, n_seen = 0.0, 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad_sums: dict = {}
            for si in batch:
                s = samples[si]
                with Tape() as tape:
                    logits, records = model.forward(s.image, s.task_id,
                                                    model_schedule, mode="train")
                    gates = [r["gates"] for r in records]
                    loss, l_x, l_p = vltp_loss(logits, s.gt_mask, gates,
                                               s.patch_labels)
                    try:
                        tape.backward(loss)
                    except NumericsError as err:
                        raise NumericsError(
                            f"epoch {epoch}, sample {si}: {err}") from err
                for name, t in model.params.items():
                    if t.requires_grad and t.grad is not None:
                        if name in grad_sums:
                            grad_sums[name] += t.grad.astype(np.float64)
                        else:
                            grad_sums[name] = t.grad.astype(np.float64)
                        t.grad = None
                ep_loss += loss.item()
                ep_lx += l_x.item()
                ep_lp += l_p.item() if l_p is not None else 0.0
                pred = logits.data > 0.0  # sigmoid(z) > 0.5 iff z > 0
                ep_iou += iou(pred, s.gt_mask)
                n_seen += 1
            grads = {n: g / len(batch) for n, g in grad_sums.items()}
            if grads and cfg.lr != 0.0:
                adam_step(model.params, grads, adam, hyper)
        entry = {"epoch": epoch, "loss": ep_loss / n_seen, "lx": ep_lx / n_seen,
                 "lp": ep_lp / n_seen, "miou": ep_iou / n_seen}
        history.append(entry)
    if cfg.metrics_out:
        Path(cfg.metrics_out).write_text(
            "".join(json.dumps(e) + "\n" for e in history))
    if cfg.checkpoint_out:
        save_params(cfg.checkpoint_out, model.params)
    return model, history


def evaluate(model: Model, samples, schedule: PruneSchedule) -> dict:
    """Hard top-k inference over a corpus.

    Reports mIoU, per-stage retention recall/precision against the patch
    labels, and the analytic FLOPs estimate for the schedule.
    """
    vit = model.cfg.vit
    ious, recalls, precisions, lines = [], [], [], []
    for s in samples:
        logits, records = model.forward(s.image, s.task_id, schedule, mode="infer")
        pred = logits.data > 0.0
        sample_iou = iou(pred, s.gt_mask)
        ious.append(sample_iou)
        rec_stage, prec_stage = [], []
        for r in records:
            rec, prec = prune_recall_precision(r["mask"], s.patch_labels)
            rec_stage.append(rec)
            prec_stage.append(prec)
        recalls.append(rec_stage)
        precisions.append(prec_stage)
        lines.append({"sample": s.patch_labels.sample_id, "iou": sample_iou,
                      "prune_recall": float(np.mean(rec_stage)) if rec_stage else 1.0,
                      "prune_precision": float(np.mean(prec_stage)) if prec_stage else 1.0})
    decoder_cost = analytic_prune_decoder_cost(vit.n_tokens, vit.embed_dim,
                                               model.cfg.guide_dim)
    flops = flops_estimate_analytic(
        schedule, vit.n_tokens, vit.embed_dim, vit.num_heads, vit.ffn_mult,
        vit.num_layers, prune_decoder_cost=decoder_cost,
        include_decoder_overhead=True)
    out = {"miou": float(np.mean(ious)), "n_samples": len(samples),
           "flops": flops, "samples": lines}
    if recalls and recalls[0]:
        out["stage_recall"] = [float(np.mean([r[i] for r in recalls]))
                               for i in range(len(recalls[0]))]
        out["stage_precision"] = [float(np.mean([p[i] for p in precisions]))
                                  for i in range(len(precisions[0]))]
    return out
