#!/usr/bin/env python3
"""
DoseDiff Desk-Scale Pipeline

Command-line entry point: synthesize phantoms, build distance-map conditioning,
train the diffusion dose predictor, sample doses and evaluate them.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.pipeline.config import LOG_LEVEL, RUNS_DIR, load_run_config, worker_count
from src.pipeline.dataset import generate_dataset, load_manifest, split_case_ids, write_sdm_files
from src.pipeline.evaluate import run_evaluate
from src.pipeline.predict import load_predictor, predict_volumes, run_predict, write_predictions
from src.pipeline.studies import DEFAULT_SWEEP_STEPS, ablate, baseline, seed_study, sweep_steps
from src.pipeline.train import run_train

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def print_banner(command: str):
    """Print welcome banner."""
    print("\n" + "=" * 50)
    print(f"       DoseDiff Pipeline: {command}")
    print("=" * 50 + "\n")


def print_progress(current: int, total: int, prefix: str = ""):
    """Print a simple progress bar."""
    bar_length = 30
    filled = int(bar_length * current / total)
    bar = "█" * filled + "░" * (bar_length - filled)
    print(f"\r{prefix}[{bar}] {current}/{total}", end="", flush=True)
    if current == total:
        print()


def parse_int_list(text: str):
    return [int(part) for part in text.split(",") if part.strip()]


def parse_switches(text: str):
    """'on,off' -> [True, False]"""
    values = {"on": True, "off": False}
    try:
        return [values[part.strip().lower()] for part in text.split(",") if part.strip()]
    except KeyError as e:
        raise ValueError(f"Switch values must be on/off, got {e.args[0]!r}") from e


def write_json(document, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    print(f"  Wrote {out}")


def print_aggregate(aggregate: dict):
    for key in ("mae_gy", "ssim", "psnr_db", "dose_score_gy", "volume_score_percent"):
        if key in aggregate:
            if aggregate[key]["mean"] is None:
                print(f"  {key:<22} {'n/a':>10}")
                continue
            print(f"  {key:<22} {aggregate[key]['mean']:10.4f} ± {aggregate[key]['std']:.4f}")


def cmd_phantom_gen(args):
    config = load_run_config(args.config)
    out = args.out or config.data.data_dir
    print(f"Generating {config.data.phantom_count} phantoms into {out}...")
    manifest = generate_dataset(config, out, worker_count(args.deterministic),
                                on_case=lambda done, total: print_progress(done, total, "  "))
    print(f"  Manifest: {manifest}")


def cmd_make_sdm(args):
    spacing = None if args.spacing == "auto" else [float(s) for s in args.spacing.split(",")]
    if spacing is not None and len(spacing) != 3:
        raise ValueError(f"--spacing must be 'auto' or three comma-separated values, got {args.spacing!r}")
    written = write_sdm_files(args.rois, args.out, args.mode, spacing)
    print(f"  Wrote {len(written)} {args.mode} maps to {args.out}")


def cmd_train(args):
    config = load_run_config(args.config)
    out = args.out or str(Path(RUNS_DIR) / "train")
    print(f"Training for {config.training.iterations} iterations into {out}...")
    result = run_train(config, out, args.data, args.resume,
                       on_iteration=lambda it, total, loss: print_progress(it, total, f"  loss {loss:.4f} "))
    print(f"  Last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"  Best checkpoint: {result.best_checkpoint}")
    print(f"  Final loss {result.losses[-1]:.4f} after {result.seconds:.1f}s")


def cmd_predict(args):
    if args.case:
        path = run_predict(args.ckpt, args.case, args.steps, args.seed, args.data, args.out)
        print(f"  Wrote {path}")
        return

    _, config = load_predictor(args.ckpt)
    data_dir = args.data or config.data.data_dir
    case_ids = split_case_ids(load_manifest(data_dir), args.split)
    print(f"Predicting {len(case_ids)} {args.split} cases...")
    predictions = predict_volumes(args.ckpt, case_ids, args.steps, args.seed, data_dir,
                                  worker_count(args.deterministic),
                                  on_case=lambda done, total: print_progress(done, total, "  "))
    written = write_predictions(predictions, args.out or ".")
    print(f"  Wrote {len(written)} volumes to {args.out or '.'}")


def cmd_evaluate(args):
    document = run_evaluate(args.pred, args.truth, args.specs, args.out,
                            on_case=lambda done, total: print_progress(done, total, "  "))
    print(f"\nAggregate over {len(document['cases'])} cases:")
    print_aggregate(document["aggregate"])


def cmd_sweep_steps(args):
    rows = sweep_steps(args.ckpt, parse_int_list(args.steps), args.seed, args.data,
                       worker_count(args.deterministic),
                       on_step=lambda done, total: print_progress(done, total, "  "))
    print(f"\n  {'S':>4}  {'MAE (Gy)':>10}  {'seconds':>8}")
    for row in rows:
        print(f"  {row['steps']:>4}  {row['aggregate']['mae_gy']['mean']:>10.4f}  {row['seconds']:>8.1f}")
    if args.out:
        write_json(rows, args.out)


def cmd_seed_study(args):
    result = seed_study(args.ckpt, args.seeds, args.steps, args.data, worker_count(args.deterministic),
                        on_seed=lambda done, total: print_progress(done, total, "  "))
    mae = result["summary"]["mae_gy"]
    print(f"\n  MAE over {args.seeds} seeds: {mae['mean']:.4f} ± {mae['std']:.4f} Gy (cv {mae['cv']:.4f})")
    if args.out:
        write_json(result, args.out)


def cmd_ablate(args):
    config = load_run_config(args.config)
    summary = ablate(config, args.out, [m.strip() for m in args.modes.split(",")],
                     parse_switches(args.ms), parse_switches(args.ff), worker_count(args.deterministic),
                     on_variant=lambda done, total: print_progress(done, total, "  "))
    print(f"\n  {'variant':<20} {'MAE (Gy)':>10}")
    for name, entry in summary.items():
        print(f"  {name:<20} {entry['aggregate']['mae_gy']['mean']:>10.4f}")


def cmd_baseline(args):
    data_dir = args.data or load_run_config(args.config).data.data_dir
    result = baseline(data_dir, on_case=lambda done, total: print_progress(done, total, "  "))
    print(f"\nMean-dose baseline ({result['mean_dose_gy']:.2f} Gy):")
    print_aggregate(result["aggregate"])
    if args.out:
        write_json(result, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DoseDiff desk-scale dose prediction pipeline")
    parser.add_argument("--deterministic", action="store_true", help="Force single-lane execution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="Synthesize the phantom dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("make-sdm", help="Convert ROI masks into distance maps")
    p.add_argument("--rois", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", default="auto")
    p.add_argument("--mode", default="psdm", choices=["psdm", "isdm", "mask"])
    p.set_defaults(func=cmd_make_sdm)

    p = sub.add_parser("train", help="Train the denoiser")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Sample dose volumes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", help="Case id; omit to predict a whole split")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Score predictions against reference doses")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--specs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-steps", help="Metrics and time per number of generation steps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", default=",".join(str(s) for s in DEFAULT_SWEEP_STEPS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_steps)

    p = sub.add_parser("seed-study", help="Metric spread across sampling seeds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_seed_study)

    p = sub.add_parser("ablate", help="Train and evaluate the conditioning x MS x FF grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="mask,isdm,psdm")
    p.add_argument("--ms", default="on,off")
    p.add_argument("--ff", default="on,off")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="Evaluate the mean-dose predictor")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    print_banner(args.command)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("\n\nInterrupted.")
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"\nError: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
