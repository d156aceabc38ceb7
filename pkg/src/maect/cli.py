"""Command line: ``maect <stage> --config <path> --out <dir> [overrides]``.

Exit codes: 0 success, 2 invalid configuration or usage, 3 missing
prerequisite stage, 4 run directory locked, 5 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .artifacts import export_report
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .containers import save_dataset
from .data import generate_toy_dataset
from .pipeline import SUBCOMMANDS, StageError, run_stage
from .training import TrainingDiverged

EXIT_DIVERGED = 5


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path, help="run directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--skip-init", action="store_true", help="ct: train a fresh head instead of loading head-init")
        s.add_argument("--mask-ratio", type=float)
        s.add_argument("--combined", action="store_true", help="pretrain: add lambda * NNCLR loss")
        s.add_argument("--lambda", dest="lam", type=float)
        s.add_argument("--detached", action="store_true", help="pretrain: stop NNCLR gradients at the encoder")
    g = sub.add_parser("generate-data", help="write the toy train/test datasets")
    g.add_argument("--config", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int)
    r = sub.add_parser("report", help="re-export report.json for a run directory")
    r.add_argument("--out", required=True, type=Path)
    return p


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line flags into the config and re-validate everything."""
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.skip_init:
        raw["skip_init"] = True
    if args.mask_ratio is not None:
        raw["mask_ratio"] = args.mask_ratio
    if args.combined:
        raw["combined"] = True
        raw["views"] = 2
    if args.lam is not None:
        raw["lam"] = args.lam
    if args.detached:
        raw["detached"] = True
    return config_from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            report = export_report(args.out)
            print(f"report written to {args.out / 'report.json'} (complete={report['complete']})")
            return 0
        cfg = load_config(args.config)
        if args.command == "generate-data":
            seed = cfg.data_seed if args.seed is None else args.seed
            train, test = generate_toy_dataset(cfg.toy, seed)
            save_dataset(args.out / "train.ds", train)
            save_dataset(args.out / "test.ds", test)
            print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")
            return 0
        cfg = apply_overrides(cfg, args)
        if (args.combined or args.detached or args.lam is not None) and args.command != "pretrain":
            raise ConfigError(["--combined/--lambda/--detached apply to pretrain only"])
        manifest = run_stage(args.command, cfg, args.out)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{args.command} done: run {manifest.run_id} in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
