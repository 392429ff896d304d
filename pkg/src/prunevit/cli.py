"""Command-line driver: dataset generation, training, evaluation, FLOPs
estimates, schedule sweeps, and PPM visualizations.

Exit codes: 0 success, 1 runtime error, 2 usage error. Logs go to stderr;
data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .costmodel import CostConfig, flops_estimate, sweep, write_sweep_csv
from .model import Model
from .pipeline import RunConfig, evaluate, train
from .prune import PruneSchedule
from .serialize import load_params
from .synthdata import SceneConfig, generate, load_dataset, save_dataset
from .tensor import NumericsError


def _parse_int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def _parse_rates(text: str) -> list:
    """Rates given as percentages on the command line."""
    return [int(x) / 100.0 for x in text.split(",") if x.strip()] if text else []


def write_ppm(path, rgb: np.ndarray) -> None:
    """rgb: (H, W, 3) floats in [0, 1], written as binary P6 with maxval 255."""
    h, w, _ = rgb.shape
    payload = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def _mask_rgb(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float32)
    return np.repeat(m[:, :, None], 3, axis=2)


def _patch_map_rgb(mask_tokens: np.ndarray, grid_h: int, grid_w: int,
                   patch: int) -> np.ndarray:
    """Retained patches white, frozen black, at full image resolution."""
    grid = np.asarray(mask_tokens, dtype=np.float32).reshape(grid_h, grid_w)
    img = np.kron(grid, np.ones((patch, patch), dtype=np.float32))
    return np.repeat(img[:, :, None], 3, axis=2)


def cmd_gen_data(args) -> int:
    cfg = SceneConfig(n_tasks=args.tasks)
    samples = generate(args.seed, args.samples, cfg)
    save_dataset(samples, cfg, args.seed, args.out)
    print(f"wrote {len(samples)} samples to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.phase:
        raw["phase"] = args.phase
    cfg = RunConfig(**raw)
    _, history = train(cfg)
    print(f"trained {cfg.epochs} epochs, final loss {history[-1]['loss']:.4f}, "
          f"train miou {history[-1]['miou']:.4f}", file=sys.stderr)
    return 0


def _load_model_for_eval(checkpoint: str, data_dir: str):
    samples, scene_cfg, seed = load_dataset(data_dir)
    run = RunConfig(seed=seed, n_tasks=scene_cfg.n_tasks,
                    vit={"image_height": scene_cfg.size,
                         "image_width": scene_cfg.size,
                         "patch_size": scene_cfg.patch_size})
    model = Model(run.model_config(), seed)
    load_params(checkpoint, model.params)
    return model, samples


def cmd_eval(args) -> int:
    model, samples = _load_model_for_eval(args.checkpoint, args.data)
    schedule = PruneSchedule(boundaries=_parse_int_list(args.boundaries),
                             rates=_parse_rates(args.rates))
    result = evaluate(model, samples, schedule)
    for line in result.pop("samples"):
        print(json.dumps(line))
    print(json.dumps(result))
    return 0


def cmd_flops(args) -> int:
    schedule = PruneSchedule(boundaries=_parse_int_list(args.boundaries),
                             rates=_parse_rates(args.rates))
    cfg = CostConfig(total_layers=args.layers,
                     per_layer_cost=args.baseline_gflops / args.layers,
                     prune_decoder_cost=args.decoder_gflops)
    print(f"{flops_estimate(schedule, cfg, args.include_decoder_overhead):g}")
    return 0


def cmd_sweep(args) -> int:
    grid = json.loads(Path(args.grid_file).read_text())
    cfg = CostConfig(total_layers=grid["layers"],
                     per_layer_cost=grid["baseline_gflops"] / grid["layers"],
                     prune_decoder_cost=grid.get("decoder_gflops", 0.0))
    rows = sweep([tuple(b) for b in grid["boundaries"]],
                 [tuple(r / 100.0 for r in rr) for rr in grid["rates"]],
                 cfg, grid.get("include_decoder_overhead", False))
    write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)
    return 0


def cmd_dump_masks(args) -> int:
    model, samples = _load_model_for_eval(args.checkpoint, args.data)
    if not 0 <= args.index < len(samples):
        raise NumericsError(f"--index {args.index} outside corpus of {len(samples)}")
    s = samples[args.index]
    schedule = PruneSchedule(boundaries=_parse_int_list(args.boundaries),
                             rates=_parse_rates(args.rates))
    logits, records = model.forward(s.image, s.task_id, schedule, mode="infer")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vit = model.cfg.vit
    write_ppm(out / "input.ppm", s.image.transpose(1, 2, 0))
    pred = logits.data > 0.0
    write_ppm(out / "pred_mask.ppm", _mask_rgb(pred))
    write_ppm(out / "gt_mask.ppm", _mask_rgb(s.gt_mask))
    for i, rec in enumerate(records):
        write_ppm(out / f"stage{i}_retained.ppm",
                  _patch_map_rgb(rec["mask"], vit.grid_h, vit.grid_w,
                                 vit.patch_size))
    print(f"wrote visualizations to {out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunevit",
        description="Guidance-conditioned token pruning for a staged ViT "
                    "segmenter.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--tasks", type=int, default=8)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training phase from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", choices=["A", "B"], default=None,
                   help="override the config's phase")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with hard pruning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--boundaries", default="", help="comma-separated layer indices")
    p.add_argument("--rates", default="", help="comma-separated percentages")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="calibrated FLOPs estimate for a schedule")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--baseline-gflops", type=float, required=True)
    p.add_argument("--boundaries", default="")
    p.add_argument("--rates", default="")
    p.add_argument("--include-decoder-overhead", action="store_true")
    p.add_argument("--decoder-gflops", type=float, default=6.0)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("sweep", help="schedule sweep to CSV")
    p.add_argument("--grid-file", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("dump-masks", help="write PPM visualizations for a sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--boundaries", default="")
    p.add_argument("--rates", default="")
    p.set_defaults(fn=cmd_dump_masks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (NumericsError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
