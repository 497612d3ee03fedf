#!/usr/bin/env python3
"""
Command-line entry point for domain-adaptive femur segmentation experiments.

Usage:
    python main.py phantom-gen --config configs/phantom_benchmark.cfg --out runs/data
    python main.py run --config configs/phantom_benchmark.cfg --set adaptation.study_mode=none --out runs/no_da
    python main.py grid --config configs/phantom_benchmark.cfg --out runs/grid --workers 3
    python main.py compare --run-a runs/grl_mmd --run-b runs/no_da --out runs/stats
    python main.py surface-map --run runs/grl_mmd --case target/case_0003 --out runs/maps
    python main.py features --run runs/grl_mmd
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.config import Settings, load_experiment_config, resolve_project_path
from model.volume import MaskVolume
from services.experiment import (
    compare_runs,
    export_surface_map,
    feature_consistency,
    run_ablation_grid,
    run_case_masks,
    run_experiment,
)
from services.volume_pipeline import generate_phantom_dataset, load_volume
from utils.errors import ConfigurationError, PFDAError
from utils.logging_config import setup_logging

logger = logging.getLogger(__name__)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="Experiment config file (dotted key = value)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key; repeatable",
    )
    parser.add_argument("--out", "-o", help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Domain-adaptive 3D femur segmentation: training, ablation grid and analysis"
    )
    parser.add_argument("--verbose", "-V", action="store_true", help="Enable debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", help="Train and validate one configuration")
    _add_config_arguments(run)

    grid = verbs.add_parser("grid", help="Run the 4 study x 3 ratio ablation grid")
    _add_config_arguments(grid)
    grid.add_argument("--workers", type=int, default=1, help="Grid cells run in parallel")
    grid.add_argument("--table1-ratio", help="Ratio used for the combined method table")

    compare = verbs.add_parser("compare", help="Paired t-tests between two finished runs")
    compare.add_argument("--run-a", required=True)
    compare.add_argument("--run-b", required=True)
    compare.add_argument("--site", help="Restrict to one site (default: all validated cases)")
    compare.add_argument("--out", "-o", help="Output directory for stats.csv (default: run A)")

    surface = verbs.add_parser("surface-map", help="Export predicted-surface distances as CSV")
    surface.add_argument("--run", help="Finished run directory")
    surface.add_argument("--case", help="site/case_id inside the run")
    surface.add_argument("--pred", help="Predicted mask .pfda (instead of --run/--case)")
    surface.add_argument("--gt", help="Ground-truth mask .pfda (instead of --run/--case)")
    surface.add_argument("--out", "-o", required=True, help="Output directory")

    features = verbs.add_parser("features", help="Mask-feature consistency of a finished run")
    features.add_argument("--run", required=True)
    features.add_argument("--out", "-o", help="Output directory (default: the run)")

    phantom = verbs.add_parser("phantom-gen", help="Write a two-site phantom dataset")
    _add_config_arguments(phantom)
    return parser


def _config_defaults(settings: Settings) -> dict:
    defaults = {"training.dtype": settings.DEFAULT_DTYPE, "training.device": settings.DEVICE}
    if settings.DATA_ROOT:
        defaults["data_root"] = str(settings.get_data_root())
    return defaults


def _load_config(args, settings: Settings):
    return load_experiment_config(args.config, args.overrides, defaults=_config_defaults(settings))


def _output_dir(args, settings: Settings, fallback: str) -> Path:
    if args.out:
        return resolve_project_path(args.out)
    return settings.get_output_root() / fallback


def _surface_map(args) -> int:
    if args.pred and args.gt:
        pred, gt = load_volume(args.pred), load_volume(args.gt)
        if not (isinstance(pred, MaskVolume) and isinstance(gt, MaskVolume)):
            raise ConfigurationError("--pred and --gt must both be mask volumes")
        name = Path(args.pred).name.replace(".pfda", "")
    elif args.run and args.case:
        matches = [
            (case, pred, gt)
            for case, pred, gt in run_case_masks(args.run)
            if f"{case.site}/{case.case_id}" == args.case
        ]
        if not matches:
            raise ConfigurationError(f"no stored prediction for '{args.case}'", field="--case")
        _, pred, gt = matches[0]
        name = args.case.replace("/", "_")
    else:
        raise ConfigurationError("give either --pred and --gt, or --run and --case")
    export_surface_map(pred, gt, Path(args.out) / f"surface_map_{name}.csv")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings()
    setup_logging("DEBUG" if args.verbose else settings.LOG_LEVEL)

    try:
        if args.verb == "run":
            config = _load_config(args, settings)
            out_dir = _output_dir(args, settings, config.name)
            run_experiment(config, out_dir, settings)
            return 0

        if args.verb == "grid":
            config = _load_config(args, settings)
            out_dir = _output_dir(args, settings, f"{config.name}_grid")
            result = run_ablation_grid(config, out_dir, args.workers, args.table1_ratio)
            return 0 if not result["failed"] else 1

        if args.verb == "compare":
            report = compare_runs(args.run_a, args.run_b, args.out or args.run_a, args.site)
            for row in report.itertuples(index=False):
                logger.info(f"   • {row.metric}: t={row.t:.4f}, p={row.p:.4g} {row.flag}")
            return 0

        if args.verb == "surface-map":
            return _surface_map(args)

        if args.verb == "features":
            table = feature_consistency(args.run, args.out)
            for row in table.itertuples(index=False):
                logger.info(f"   • {row.feature}: r={row.r:.4f} (n={row.n_cases}) {row.flag}")
            return 0

        if args.verb == "phantom-gen":
            config = _load_config(args, settings)
            out_dir = _output_dir(args, settings, "phantom_data")
            generate_phantom_dataset(
                out_dir, config.phantom, (config.source_site_name, config.target_site_name)
            )
            return 0
    except ConfigurationError as err:
        logger.error(f"❌ Invalid configuration: {err}")
        return 2
    except (PFDAError, FileNotFoundError) as err:
        logger.error(f"❌ {args.verb} failed: {err}")
        logger.exception("Detailed error information:")
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
