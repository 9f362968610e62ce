"""``rcanit`` command line.

Exit codes: 0 success, 1 runtime failure (including non-finite aborts and I/O errors),
2 usage or configuration error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List
from typing import Optional

import torch

from rcanit.benchmark import evaluate_benchmark
from rcanit.benchmark import infer_image
from rcanit.checkpoint import load_checkpoint
from rcanit.checkpoint import restore_model
from rcanit.checkpoint import save_checkpoint
from rcanit.conf.config import NUM_THREADS
from rcanit.conf.config import RESOLVED_FILE
from rcanit.conf.config import RunConfig
from rcanit.conf.config import format_value
from rcanit.conf.config import load_settings
from rcanit.conf.config import parse_assignments
from rcanit.conf.config import preset_description
from rcanit.conf.config import preset_names
from rcanit.data import META_FILE
from rcanit.data import prepare_dataset
from rcanit.data import scan_dataset
from rcanit.exceptions import CheckpointError
from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import DatasetNotFound
from rcanit.exceptions import RCANItException
from rcanit.metrics import bicubic_upsampler
from rcanit.metrics import nearest_upsampler
from rcanit.model import SUPPORTED_SCALES
from rcanit.model import build_model
from rcanit.trainer import WARM_SOURCE_SCALE
from rcanit.trainer import WARM_TARGET_SCALES
from rcanit.trainer import finetune_oracle
from rcanit.trainer import train_pipeline
from rcanit.trainer import warm_start
from rcanit.utils.helpers import load_file

LOGGER = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigurationError, DatasetNotFound, CheckpointError)
BASELINES = {"bicubic": bicubic_upsampler, "nearest": nearest_upsampler}


def parse_scales(text: str) -> List[int]:
    try:
        scales = sorted({int(item) for item in text.split(",") if item.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scale list {text!r}")
    if not scales or any(s not in SUPPORTED_SCALES for s in scales):
        raise argparse.ArgumentTypeError(f"scales must be a subset of {SUPPORTED_SCALES}")
    return scales


def print_plan(run: RunConfig, command: str) -> None:
    for line in run.to_lines():
        print(line)
    plan = run.stage_plan(command)
    print("stages = " + ",".join(f"{stage}:{iters}" for stage, iters in plan))
    print(f"stage_iters_total = {sum(iters for _, iters in plan)}")


def resolve_run(args, **overrides) -> RunConfig:
    values = parse_assignments(getattr(args, "set", None))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.resolve(
        preset=getattr(args, "preset", None),
        config_path=getattr(args, "config", None),
        overrides=values,
    )


def require_root(run: RunConfig) -> Path:
    if run.data_root is None:
        raise ConfigurationError("data_root", "no dataset root given (--data-root)")
    root = Path(run.data_root)
    if not root.is_dir():
        raise DatasetNotFound(f"dataset root not found: {root}")
    return root


def resolve_mean_shift(run: RunConfig, root: Path):
    if run.mean_shift != "auto":
        return run.mean_shift
    meta = root / META_FILE
    if not meta.exists():
        raise ConfigurationError("mean_shift", f"'auto' needs {meta}; run prepare-data first")
    return tuple(load_file(meta)["mean_rgb"])


def load_model(args, device: str):
    if getattr(args, "baseline", None):
        if args.scale is None:
            raise ConfigurationError("scale", "--baseline needs --scale")
        return BASELINES[args.baseline](args.scale), args.scale
    if not args.ckpt:
        raise ConfigurationError("ckpt", "either --ckpt or --baseline is required")
    ckpt = load_checkpoint(args.ckpt)
    return restore_model(ckpt).to(device), ckpt.scale


def cmd_prepare_data(args) -> int:
    if args.dry_run:
        print(f"root = {args.root}")
        print("scales = " + ",".join(str(s) for s in args.scales))
        return 0
    meta = prepare_dataset(args.root, args.scales)
    print(f"prepared {meta['count']} images for scales {meta['scale_list']} under {args.root}")
    return 0


def cmd_train(args) -> int:
    run = resolve_run(args, data_root=args.data_root, out_dir=args.out_dir, device=args.device)
    if args.dry_run:
        print_plan(run, "train")
        return 0
    root = require_root(run)
    index = scan_dataset(root, run.scale)
    out_dir = Path(run.out_dir)
    run.write(out_dir / RESOLVED_FILE)
    model = build_model(run.model_config(resolve_mean_shift(run, root)), run.seed)
    ckpt = train_pipeline(
        model,
        index,
        run.train_config(),
        finetune_iters=run.finetune_iters,
        finetune_patch=run.finetune_patch_size,
        finetune_batch=run.finetune_batch,
        out_dir=out_dir,
        device=run.resolved_device,
    )
    save_checkpoint(ckpt, out_dir / "final.ckpt")
    print(f"trained {ckpt.iteration} iterations, checkpoint: {out_dir / 'final.ckpt'}")
    return 0


def cmd_warm_start(args) -> int:
    run = resolve_run(
        args, scale=args.scale, data_root=args.data_root, out_dir=args.out_dir, device=args.device
    )
    ckpt = load_checkpoint(args.from_ckpt) if args.from_ckpt else None
    if ckpt is not None and ckpt.scale != WARM_SOURCE_SCALE:
        raise ConfigurationError(
            "from", f"warm start needs a x{WARM_SOURCE_SCALE} checkpoint, got x{ckpt.scale}"
        )
    if args.dry_run:
        print_plan(run, "warm-start")
        return 0
    if ckpt is None:
        raise ConfigurationError("from", "--from is required")
    root = require_root(run)
    index = scan_dataset(root, run.scale)
    out_dir = Path(run.out_dir)
    run.write(out_dir / RESOLVED_FILE)
    result = warm_start(
        ckpt,
        index,
        run.scale,
        run.train_config(),
        tail_iters=run.warm_tail_iters,
        full_iters=run.warm_full,
        out_dir=out_dir,
        device=run.resolved_device,
    )
    save_checkpoint(result, out_dir / "final.ckpt")
    print(f"warm-started x{run.scale}: {result.iteration} iterations recorded")
    return 0


def cmd_eval(args) -> int:
    run = resolve_run(
        args,
        ensemble="true" if args.ensemble else None,
        crop_border=args.crop_border,
        y_swing="full" if args.full_swing else None,
        quantize="false" if args.no_quantize else None,
        tile=args.tile,
        device=args.device,
    )
    if args.dry_run:
        print("\n".join(run.to_lines()))
        return 0
    if not Path(args.benchmark).is_dir():
        raise DatasetNotFound(f"benchmark directory not found: {args.benchmark}")
    model, scale = load_model(args, run.resolved_device)
    report = evaluate_benchmark(
        model,
        args.benchmark,
        scale,
        ensemble=run.ensemble,
        crop_border=run.crop_border,
        full_swing=run.y_swing == "full",
        quantize_output=run.quantize,
        tile=run.tile,
    )
    print(report.to_table())
    json_path = Path(args.json) if args.json else None
    if json_path is None:
        json_path = Path(run.out_dir) / f"{Path(args.benchmark).name}_x{scale}.json"
    report.write_json(json_path)
    LOGGER.info(f"report written to {json_path}")
    run.write(json_path.with_name(f"{json_path.stem}.{RESOLVED_FILE}"))
    return 0


def cmd_infer(args) -> int:
    run = resolve_run(
        args, ensemble="true" if args.ensemble else None, tile=args.tile, device=args.device
    )
    if args.dry_run:
        print(f"input = {args.input}")
        print(f"output = {args.output}")
        for key in ("ensemble", "tile", "tile_overlap", "device"):
            print(f"{key} = {format_value(getattr(run, key))}")
        return 0
    model, _ = load_model(args, run.resolved_device)
    infer_image(model, args.input, args.output, run.ensemble, run.tile, run.tile_overlap)
    output = Path(args.output)
    run.write(output.with_name(f"{output.stem}.{RESOLVED_FILE}"))
    return 0


def cmd_oracle(args) -> int:
    run = resolve_run(args, oracle_iters=args.iters, out_dir=args.out_dir, device=args.device)
    if args.dry_run:
        print_plan(run, "oracle")
        return 0
    ckpt = load_checkpoint(args.ckpt)
    out_dir = Path(run.out_dir)
    run.write(out_dir / RESOLVED_FILE)
    result = finetune_oracle(
        ckpt,
        args.benchmark,
        run.train_config(),
        max_iters=run.oracle_iters,
        out_dir=out_dir,
        device=run.resolved_device,
    )
    best = max((value for _, value in result.history.get("val_psnr", [])), default=float("nan"))
    print(f"oracle finetune: {result.stages[-1]['iters']} iterations, best PSNR {best:.4f} dB")
    return 0


def _add_run_options(parser, presets: bool = False) -> None:
    parser.add_argument("--config", help="flat key = value run configuration file")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override one configuration key"
    )
    if presets:
        settings = load_settings()
        names = preset_names(settings)
        parser.add_argument("--preset", choices=names, help="recipe preset")
        parser.epilog = "presets:\n" + "\n".join(
            f"  {name:<18}{preset_description(name, settings)}" for name in names
        )
        parser.formatter_class = argparse.RawDescriptionHelpFormatter
    parser.add_argument("--device", help="torch device (default: $RCANIT_DEVICE or cpu)")
    parser.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")


def _add_model_source(parser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--ckpt", help="checkpoint file")
    source.add_argument("--baseline", choices=sorted(BASELINES), help="parameter-free upsampler")
    parser.add_argument("--scale", type=int, choices=SUPPORTED_SCALES, help="scale for --baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcanit", description="RCAN super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    prep = commands.add_parser("prepare-data", help="write bicubic LR trees and meta.json")
    prep.add_argument("--root", required=True, help="dataset root containing HR/")
    prep.add_argument("--scales", type=parse_scales, default=[2, 3, 4], help="e.g. 2,3,4")
    prep.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    prep.set_defaults(func=cmd_prepare_data)

    train = commands.add_parser("train", help="train a model from scratch")
    _add_run_options(train, presets=True)
    train.add_argument("--data-root", help="training dataset root")
    train.add_argument("--out-dir", help="output directory")
    train.set_defaults(func=cmd_train)

    warm = commands.add_parser("warm-start", help="initialize x3/x4 from a x2 checkpoint")
    _add_run_options(warm, presets=True)
    warm.add_argument("--from", dest="from_ckpt", help="x2 checkpoint")
    warm.add_argument("--scale", type=int, required=True, choices=WARM_TARGET_SCALES)
    warm.add_argument("--data-root", help="training dataset root")
    warm.add_argument("--out-dir", help="output directory")
    warm.set_defaults(func=cmd_warm_start)

    evaluate = commands.add_parser("eval", help="score a model on a benchmark directory")
    _add_run_options(evaluate)
    _add_model_source(evaluate)
    evaluate.add_argument("--benchmark", required=True, help="benchmark root containing HR/")
    evaluate.add_argument("--ensemble", action="store_true", help="x8 self-ensemble")
    evaluate.add_argument("--crop-border", type=int, help="border pixels to ignore (default: scale)")
    evaluate.add_argument("--full-swing", action="store_true", help="full-range Y instead of studio")
    evaluate.add_argument("--no-quantize", action="store_true", help="score unquantized output")
    evaluate.add_argument("--tile", type=int, help="tile size in LR pixels")
    evaluate.add_argument("--json", help="report path")
    evaluate.set_defaults(func=cmd_eval)

    infer = commands.add_parser("infer", help="super-resolve one image")
    _add_run_options(infer)
    _add_model_source(infer)
    infer.add_argument("--in", dest="input", required=True, help="LR image")
    infer.add_argument("--out", dest="output", required=True, help="SR PNG to write")
    infer.add_argument("--ensemble", action="store_true", help="x8 self-ensemble")
    infer.add_argument("--tile", type=int, help="tile size in LR pixels")
    infer.set_defaults(func=cmd_infer)

    oracle = commands.add_parser("oracle", help="finetune on a benchmark until PSNR plateaus")
    _add_run_options(oracle)
    oracle.add_argument("--ckpt", required=True, help="checkpoint file")
    oracle.add_argument("--benchmark", required=True, help="benchmark root containing HR/")
    oracle.add_argument("--iters", type=int, help="iteration cap")
    oracle.add_argument("--out-dir", help="output directory")
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if NUM_THREADS:
        torch.set_num_threads(int(NUM_THREADS))

    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"rcanit: error: {exc}", file=sys.stderr)
        return 2
    except (RCANItException, OSError) as exc:
        print(f"rcanit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
