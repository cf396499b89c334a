"""Command-line entry point.

Exit codes: 0 success, 1 verification failure (gradcheck), 2 usage or bad
parameters, 3 I/O failure, 4 training aborted, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff.gradcheck import catalog, run_grad_checks
from .config import RunConfig
from .datagen import (
    DEFAULT_THRESHOLD,
    generate_samples,
    load_dataset,
    split_samples,
    write_dataset,
)
from .errors import CheckpointError, ConfigError, DatasetError, ImageIOError, ShapeError, TrainingAborted
from .imaging import (
    AffineParams,
    affine_place,
    alpha_over,
    classical_composite,
    load_depth,
    load_image,
    quantize,
    save_image,
    threshold_depth,
)
from .losses import LossConfig
from .metrics import write_metric_csv
from .networks import build_networks
from .trainer.checkpoint import load_checkpoint, restore_networks, save_checkpoint
from .trainer.experiments import (
    ABLATION_FIELDS,
    BATCH_FIELDS,
    LR_FIELDS,
    ablation_run,
    sweep_batch_size,
    sweep_learning_rates,
    write_table_csv,
)
from .trainer.loop import evaluate, evaluate_predictions, train
from .trainer.pixelopt import direct_pixel_optimize, monotone_trend

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_ABORT, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5

logger = logging.getLogger("depthcomp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _lr_grid(text: str):
    pairs = []
    for item in text.split(","):
        try:
            g, d = item.split(":")
            pairs.append((float(g), float(d)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected lr_g:lr_d pairs, got {item!r}") from None
    return pairs


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        max_steps=getattr(args, "steps", None),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
    )


def _data_root(args, cfg: RunConfig) -> str:
    root = getattr(args, "data", None) or cfg.data.root
    if not root:
        raise UsageError("a dataset directory is required (--data or data.root)")
    return root


def _load(args, cfg: RunConfig):
    samples, manifest = load_dataset(_data_root(args, cfg))
    threshold = cfg.data.threshold if cfg.data.threshold is not None else (
        cfg.train.loss.depth_threshold if cfg.train.loss.depth_threshold is not None else manifest.threshold)
    return samples, manifest, threshold


def _split(samples, manifest, name: str):
    chosen = split_samples(samples, manifest, name)
    if not chosen:
        raise DatasetError(f"split {name!r} is empty")
    return chosen


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(out, f"cannot create directory ({exc.strerror})") from exc
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if len(args.splits) != 3 or min(args.splits) < 0 or sum(args.splits) <= 0:
        raise UsageError("--splits takes three non-negative integers, e.g. 80,10,10")
    samples = generate_samples(args.count, args.seed, args.size, args.threshold, workers=args.workers)
    manifest = write_dataset(samples, args.out, args.splits, args.threshold, args.seed)
    counts = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {args.count} samples to {args.out}: train {counts['train']}, test {counts['test']}, "
          f"validation {counts['validation']}; threshold {args.threshold}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples, manifest, threshold = _load(args, cfg)
    train_set = _split(samples, manifest, cfg.data.train_split)
    out = _out_dir(args.out)
    (out / "run.yaml").write_text(cfg.to_text())
    resume = load_checkpoint(args.resume) if args.resume else None

    def periodic(ckpt, step):
        save_checkpoint(ckpt, out / f"checkpoint_step{step:06d}.dpgn")

    try:
        result = train(cfg.train, train_set, threshold, resume=resume, on_checkpoint=periodic)
    except TrainingAborted as exc:
        (out / "abort.txt").write_text(f"{exc}\nlast_finite_step: {exc.last_finite_step}\n")
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    save_checkpoint(result.checkpoint, out / "checkpoint.dpgn")
    result.history.write_csv(out / "curves.csv")
    (out / "collapse.json").write_text(json.dumps(result.collapse.as_dict(), indent=1, sort_keys=True) + "\n")
    last = result.history.rows[-1] if result.history.rows else None
    summary = f"trained to step {result.step}"
    if last:
        summary += f"; final total_g {last['total_g']:.4f}, l1 {last['l1']:.4f}"
    print(summary + f"; collapsed: {'yes' if result.collapse.collapsed else 'no'}")
    return EXIT_OK


def _baseline_predictions(kind: str, samples) -> list:
    preds = []
    for s in samples:
        spec = s.spec
        if kind == "gt":
            preds.append(s.ground_truth)
            continue
        if spec is None:
            raise DatasetError(f"sample {s.id}: baseline {kind!r} needs scene metadata")
        placed = affine_place(s.foreground, spec.placement)
        if kind == "classical":
            preds.append(quantize(classical_composite(placed, spec.fg_depth, s.background, s.depth)))
        else:
            preds.append(quantize(alpha_over(placed, s.background)))
    return preds


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    samples, manifest, threshold = _load(args, cfg)
    chosen = _split(samples, manifest, args.split or cfg.data.eval_split)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        t = cfg.train
        nets = build_networks(t.generator, t.discriminator, t.stn, t.init, t.seed)
        restore_networks(ckpt, nets, t.architecture_hash())
        rows = evaluate(nets, chosen, threshold, args.workers)
    else:
        rows = evaluate_predictions(_baseline_predictions(args.baseline, chosen), chosen, threshold, args.workers)
    write_metric_csv(rows, args.report)
    mean = rows and {k: float(np.mean([r[k] for r in rows])) for k in ("mae", "psnr", "ssim", "masked_mae")}
    print(f"evaluated {len(rows)} samples: " + ", ".join(f"{k} {v:.4f}" for k, v in mean.items()))
    return EXIT_OK


def cmd_composite(args) -> int:
    for name in ("threshold", "fg_depth"):
        if not 0.0 <= getattr(args, name) <= 1.0:
            raise UsageError(f"--{name.replace('_', '-')} must lie in [0, 1]")
    if not args.scale > 0:
        raise UsageError("--scale must be positive")
    fg, bg, depth = load_image(args.fg), load_image(args.bg), load_depth(args.depth)
    placed = affine_place(fg, AffineParams(args.scale, args.scale, args.tx, args.ty))
    save_image(classical_composite(placed, args.fg_depth, bg, depth), args.out)
    if args.mask_out:
        mask = threshold_depth(depth, args.threshold)
        from PIL import Image
        Image.fromarray(mask.values * 255).save(args.mask_out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _experiment_sets(args, cfg):
    samples, manifest, threshold = _load(args, cfg)
    return _split(samples, manifest, cfg.data.train_split), _split(samples, manifest, cfg.data.eval_split), threshold


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    train_set, eval_set, threshold = _experiment_sets(args, cfg)
    rows = ablation_run(cfg.train, train_set, eval_set, threshold, args.workers)
    write_table_csv(rows, ABLATION_FIELDS, args.out)
    for r in rows:
        print(f"{r['mode']}: mae {r['mae']:.3f} psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} masked_mae {r['masked_mae']:.3f}")
    return EXIT_OK


def cmd_sweep_batch(args) -> int:
    cfg = _run_config(args)
    train_set, eval_set, threshold = _experiment_sets(args, cfg)
    rows = sweep_batch_size(cfg.train, train_set, eval_set, threshold, args.sizes, args.budget, args.workers)
    write_table_csv(rows, BATCH_FIELDS, args.out)
    for r in rows:
        print(f"batch {r['batch_size']}: mae {r['mae']:.3f}")
    return EXIT_OK


def cmd_sweep_lr(args) -> int:
    cfg = _run_config(args)
    train_set, eval_set, threshold = _experiment_sets(args, cfg)
    mode = "constant" if args.frozen_generator else "trained"
    rows = sweep_learning_rates(cfg.train, train_set, eval_set, threshold, args.grid, mode, args.workers)
    write_table_csv(rows, LR_FIELDS, args.out)
    for r in rows:
        print(f"G {r['lr_g']:g} D {r['lr_d']:g}: mae {r['mae']:.3f} collapsed {r['collapsed']} "
              f"plateau {r['steps_to_plateau']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = catalog()
    chosen = list(ops.values())
    if args.ops:
        missing = [o for o in args.ops if o not in ops]
        if missing:
            raise UsageError(f"unknown op(s): {', '.join(missing)}; known: {', '.join(ops)}")
        chosen = [ops[o] for o in args.ops]
    report = run_grad_checks(chosen, args.trials, args.tolerance, args.seed)
    for line in report.lines():
        print(line)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["op", "max_rel_error", "trials", "passed"])
            for r in report.results:
                writer.writerow([r.name, f"{r.max_rel_error:.6e}", r.trials, "yes" if r.passed else "no"])
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_pixelopt(args) -> int:
    cfg = _run_config(args)
    samples, manifest, threshold = _load(args, cfg)
    by_id = {s.id: s for s in samples}
    sid = args.sample_id or manifest.ids[0]
    if sid not in by_id:
        raise UsageError(f"unknown sample id {sid!r}")
    sample = by_id[sid]
    initial = _baseline_predictions("paste", [sample])[0]
    loss = cfg.train.loss
    if args.lambda_depth is not None or args.lambda_l1 is not None:
        loss = LossConfig(args.lambda_l1 if args.lambda_l1 is not None else loss.lambda_l1,
                          args.lambda_depth if args.lambda_depth is not None else loss.lambda_depth,
                          loss.depth_threshold, loss.adversarial)
    result = direct_pixel_optimize(initial, sample.ground_truth, threshold_depth(sample.depth, threshold), loss, args.iterations)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "masked_mae", "loss"])
        for k, v in enumerate(result.masked_mae):
            writer.writerow([k, repr(v), repr(result.loss[k]) if k < len(result.loss) else ""])
    if args.image:
        save_image(result.image, args.image)
    first, final = result.masked_mae[0], result.masked_mae[-1]
    ratio = final / first if first > 0 else 0.0
    print(f"sample {sid}: masked_mae {first:.4f} -> {final:.6f} ({ratio:.2%}); "
          f"monotone trend: {'yes' if monotone_trend(result.masked_mae) else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthcomp", description="Depth-aware compositing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True, workers=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="evaluation threads (1 keeps runs bit-exact)")

    p = sub.add_parser("gen-data", help="write a synthetic occlusion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--splits", type=_int_list, default=[80, 10, 10])
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the compositing networks")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="maximum optimizer steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a baseline on a split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("gt", "classical", "paste"), default="gt",
                   help="predictions to score when no checkpoint is given")
    p.add_argument("--split")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("composite", help="classical depth-ordered composite of one foreground")
    p.add_argument("--fg", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--tx", type=float, default=0.0)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--fg-depth", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", help="also write the thresholded depth mask")
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("ablate", help="train with and without the depth-aware term")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-batch", help="held-out MAE per batch size")
    common(p)
    p.add_argument("--sizes", type=_int_list, default=[1, 4, 8, 16, 32])
    p.add_argument("--budget", type=int, help="optimizer steps per run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_batch)

    p = sub.add_parser("sweep-lr", help="MAE, collapse flag and plateau step per learning-rate pair")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--grid", type=_lr_grid, default=_lr_grid("2e-4:1e-4,1e-4:1e-4,2e-4:2e-4,3e-4:3e-4,4e-4:4e-4"))
    p.add_argument("--frozen-generator", action="store_true", help="collapse fixture: constant generator output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lr)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", nargs="*")
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pixelopt", help="optimize a naive paste's pixels toward the ground truth")
    common(p, workers=False)
    p.add_argument("--sample-id")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--lambda-depth", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--image")
    p.set_defaults(func=cmd_pixelopt)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, CheckpointError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ImageIOError, DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
