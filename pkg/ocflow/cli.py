"""
Command-line entry point.

    python -m ocflow train --strategy octc --steps 500 --out runs/octc
    python -m ocflow eval --out runs/octc
    python -m ocflow viz --flow flow.flo --out flow.png
    python -m ocflow cdf data/seq_*/flow_*.flo --out runs/cdf
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

from ocflow import analysis, config, data, evaluation, training, visualize
from ocflow.errors import NonFiniteLossError
from ocflow.flow import FlowField
from ocflow.model import load_checkpoint

logger = logging.getLogger("ocflow")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--strategy", choices=config.STRATEGIES)
    p.add_argument("--steps", type=int)
    p.add_argument("--k-set", help="comma-separated frame gaps, e.g. 1,2")
    p.add_argument("--transforms", help="comma-separated subset of hflip,vflip,rot")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocflow", description="Occlusion/transformation consistency flow training")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("train", help="train a model and write logs plus a checkpoint"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", help="defaults to OUT/checkpoint.bin")

    p = sub.add_parser("viz", help="render a flow field (colour wheel) to PNG")
    p.add_argument("--flow", help=".flo file to render")
    p.add_argument("--checkpoint", help="checkpoint to run on --images")
    p.add_argument("--images", nargs=2, metavar=("A", "B"))
    p.add_argument("--percentile", type=float, default=99.0)
    p.add_argument("--side-by-side", action="store_true",
                   help="draw the occlusion mask beside the flow instead of over it")
    p.add_argument("--out", required=True, help="PNG path")

    p = sub.add_parser("cdf", help="per-axis displacement CDFs of .flo files")
    p.add_argument("flows", nargs="*", help=".flo files or glob patterns")
    p.add_argument("--data", help="dataset directory written by `synth`")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="render synthetic sequences with ground truth to a dataset directory")
    _add_run_flags(p)
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("sweep", help="one-at-a-time sweep of lambda1, lambda2 and epsilon")
    _add_run_flags(p)

    p = sub.add_parser("compare", help="train every strategy over several seeds")
    _add_run_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    return parser


def resolve_config(args: argparse.Namespace) -> config.RunConfig:
    """Strategy preset < config file < explicit flags."""
    file_values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_values = config.parse_lines(fh.read(), args.config)
    strategy = args.strategy or file_values.get("strategy", "baseline")
    cfg = config.with_overrides(config.preset(strategy), file_values)
    flags = {
        "strategy": args.strategy,
        "seed": None if args.seed is None else str(args.seed),
        "out_dir": args.out,
        "steps": None if args.steps is None else str(args.steps),
        "k_set": args.k_set,
        "transforms": args.transforms,
    }
    return config.with_overrides(cfg, {k: v for k, v in flags.items() if v is not None})


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = training.train(cfg)
    print(result.eval_log.tail(1).to_string(index=False))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if args.config is None:
        stored = os.path.join(cfg.out_dir, training.CONFIG)
        if os.path.exists(stored):
            cfg = config.load_config(stored)
    checkpoint = args.checkpoint or os.path.join(cfg.out_dir, training.CHECKPOINT)
    report = evaluation.evaluate(checkpoint, cfg, out_dir=cfg.out_dir)
    print(report.table.to_string(index=False))
    return 0


def cmd_viz(args) -> int:
    if args.flow:
        visualize.render_png(args.out, data.read_flo(args.flow), percentile=args.percentile)
    elif args.checkpoint and args.images:
        model, _ = load_checkpoint(args.checkpoint)
        flow, occ = model.predict(data.read_image(args.images[0]), data.read_image(args.images[1]))
        visualize.render_png(args.out, flow, occ, args.percentile, side_by_side=args.side_by_side)
    else:
        raise ValueError("viz needs --flow, or --checkpoint together with --images A B")
    return 0


def _flow_paths(args) -> list[str]:
    paths = []
    for pattern in args.flows:
        matched = sorted(glob.glob(pattern))
        paths.extend(matched or [pattern])
    if args.data:
        paths.extend(data.flow_files(args.data))
    return paths


def cmd_cdf(args) -> int:
    flows: list[FlowField] = [data.read_flo(p) for p in _flow_paths(args)]
    result = analysis.displacement_cdf(flows)
    analysis.write_cdf(result, args.out)
    print(result.stats().to_string(index=False))
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    data.write_dataset(cfg.out_dir, data.make_split(cfg.scene, args.count, seed=cfg.seed))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    print(analysis.grid_sweep(cfg, out_dir=cfg.out_dir).to_string(index=False))
    return 0


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    comparison = analysis.compare_strategies(cfg, seeds=seeds, out_dir=cfg.out_dir)
    print(comparison.summary.to_string(index=False))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "cdf": cmd_cdf,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as exc:
        logger.error("%s", exc)
        return 1
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    except RuntimeError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
