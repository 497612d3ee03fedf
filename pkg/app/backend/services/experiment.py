"""
Experiment orchestration: single runs, the study x ratio ablation grid,
paired significance between runs, surface-distance exports and mask-feature
consistency.

Run directory layout::

    <run>/manifest.txt          loadable config echo + seeds, version, timestamp
    <run>/summary.csv           one row per validation site
    <run>/cases.csv             per-case metrics
    <run>/training_log.csv      per-step losses
    <run>/checkpoint.pt
    <run>/predictions/<site>/<case_id>.pfda
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import pytz
import torch

from config.config import (
    Settings,
    build_experiment_config,
    dump_experiment_config,
    load_experiment_config,
    resolve_project_path,
)
from model.models import METRIC_NAMES, RATIO_GRID, ExperimentConfig
from model.volume import MaskVolume
from services.adaptation import fit_domain_probe
from services.data_loader import prepare_case
from services.metrics import mask_features, surface_map_points
from services.stats import one_way_anova, paired_t_test, pearson_r
from services.trainer import Trainer
from services.volume_pipeline import (
    CaseRecord,
    generate_phantom_dataset,
    load_case,
    load_cases,
    load_volume,
    save_volume,
    standardize_cube,
)
from utils.enum import Split, StudyMode
from utils.errors import (
    AlignmentError,
    DegenerateVarianceError,
    InvariantError,
    ShapeError,
    UndefinedCorrelationError,
)
from utils.table_format import FAILED, render_markdown_table, summary_rows_to_frame

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"
SUMMARY_FILE = "summary.csv"
CASES_FILE = "cases.csv"
TABLE_FILE = "table.md"
STATS_FILE = "stats.csv"
FEATURES_FILE = "features.csv"
TRAINING_LOG_FILE = "training_log.csv"
CHECKPOINT_FILE = "checkpoint.pt"
PREDICTIONS_DIR = "predictions"

RATIO_COLUMN = "DiceCE/Focal"
METHOD_COLUMN = "Method"
SIGNIFICANCE_LEVEL = 0.05
FEATURE_NAMES = ("voxel_volume", "surface_area", "sphericity", "energy")
# Study order of the combined table: baseline first
TABLE1_ORDER = (StudyMode.NONE, StudyMode.GRL, StudyMode.MMD, StudyMode.GRL_MMD)


def _timestamp(settings: Settings) -> str:
    try:
        timezone = pytz.timezone(settings.TIME_ZONE)
    except pytz.UnknownTimeZoneError:
        logger.warning(f"⚠️ Unknown time zone {settings.TIME_ZONE}, using UTC")
        timezone = pytz.UTC
    return datetime.now(timezone).isoformat(timespec="seconds")


def ensure_dataset(config: ExperimentConfig, out_dir: Path) -> Tuple[ExperimentConfig, Path]:
    """Return a config whose ``data_root`` points at a dataset, generating phantoms if needed."""
    if config.data_root:
        return config, resolve_project_path(config.data_root)
    data_root = out_dir / "data"
    generate_phantom_dataset(
        data_root, config.phantom, (config.source_site_name, config.target_site_name)
    )
    return config.model_copy(update={"data_root": str(data_root)}), data_root


def write_manifest(config: ExperimentConfig, out_dir: Path, settings: Settings) -> Path:
    header = {
        "run": config.name,
        "study": config.adaptation.study_mode.label,
        "ratio": config.ratio,
        "training_seed": config.training.seed,
        "phantom_seed": config.phantom.seed,
        "code_version": settings.CODE_VERSION,
        "torch_version": torch.__version__,
        "created": _timestamp(settings),
    }
    path = out_dir / MANIFEST_FILE
    path.write_text(dump_experiment_config(config, header), encoding="utf-8")
    return path


def _save_predictions(predictions: Dict[str, MaskVolume], out_dir: Path) -> None:
    for key, mask in predictions.items():
        site, case_id = key.split("/", 1)
        save_volume(mask, out_dir / PREDICTIONS_DIR / site / f"{case_id}.pfda")


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    settings: Optional[Settings] = None,
) -> Path:
    """
    Train, validate on both sites and write the run directory.

    Returns:
        The run directory
    """
    settings = settings or Settings()
    out_dir = resolve_project_path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if settings.NUM_THREADS:
        torch.set_num_threads(settings.NUM_THREADS)

    config, data_root = ensure_dataset(config, out_dir)
    config = config.model_copy(update={"output_dir": str(out_dir)})
    write_manifest(config, out_dir, settings)
    logger.info(
        f"🚀 Run '{config.name}': {config.adaptation.study_mode.label}, ratio {config.ratio}, "
        f"output {out_dir}"
    )

    source, target = config.source_site_name, config.target_site_name
    source_train = load_cases(data_root, source, Split.TRAIN.value)
    target_train = load_cases(data_root, target, Split.TRAIN.value)
    source_val = load_cases(data_root, source, Split.VAL.value)
    target_val = load_cases(data_root, target, Split.VAL.value)

    trainer = Trainer(config)
    # Model selection uses source labels only; target labels stay unseen during training
    trainer.fit(source_train, target_train, source_val, log_path=out_dir / TRAINING_LOG_FILE)
    trainer.save(out_dir / CHECKPOINT_FILE)

    predictions: Dict[str, MaskVolume] = {}
    reports = {
        source: trainer.validate(source_val, predictions),
        target: trainer.validate(target_val, predictions),
    }
    _save_predictions(predictions, out_dir)

    features = trainer.pooled_features(list(source_val) + list(target_val))
    labels = torch.cat(
        [torch.zeros(len(source_val), dtype=torch.long), torch.ones(len(target_val), dtype=torch.long)]
    )
    probe_acc = fit_domain_probe(features, labels, seed=config.training.seed)

    cases = pd.concat([r.to_frame() for r in reports.values()], ignore_index=True)
    cases.to_csv(out_dir / CASES_FILE, index=False)

    rows = []
    for site, report in reports.items():
        row = {
            "run": config.name,
            "study": config.adaptation.study_mode.value,
            "ratio": config.ratio,
            "site": site,
            "n_cases": len(report.cases),
        }
        row.update(report.summary())
        row["probe_acc"] = probe_acc
        rows.append(row)
    pd.DataFrame(rows).to_csv(out_dir / SUMMARY_FILE, index=False)

    target_summary = reports[target].summary()
    logger.info(
        f"✅ Run '{config.name}' done: target dice {target_summary['dice']:.4f}, "
        f"hd95 {target_summary['hd95']:.3f} mm, domain probe accuracy {probe_acc:.3f}"
    )
    return out_dir


def load_run_config(run_dir: Union[str, Path]) -> ExperimentConfig:
    return load_experiment_config(Path(run_dir) / MANIFEST_FILE)


def read_summary(run_dir: Union[str, Path], site: Optional[str] = None) -> Dict[str, float]:
    """Metric means of one run; ``site`` defaults to the run's target site."""
    run_dir = Path(run_dir)
    site = site or load_run_config(run_dir).target_site_name
    summary = pd.read_csv(run_dir / SUMMARY_FILE)
    row = summary[summary["site"] == site]
    if row.empty:
        raise AlignmentError([site])
    return {name: float(row.iloc[0][name]) for name in METRIC_NAMES}


def cell_directory(root: Path, mode: StudyMode, ratio: str) -> Path:
    return root / f"study{mode.study_number}_{mode.value}" / f"ratio_{ratio.replace('/', '-')}"


def cell_config(base: ExperimentConfig, mode: StudyMode, ratio: str, out_dir: Path) -> ExperimentConfig:
    tree = base.model_dump()
    tree["name"] = f"{base.name}-{mode.value}-{ratio}"
    tree["adaptation"]["study_mode"] = mode.value
    tree["ratio"] = ratio
    tree["loss"]["alpha_mix"] = float(ratio.split("/")[1])
    tree["output_dir"] = str(out_dir)
    return build_experiment_config(tree)


def _run_cell(config: ExperimentConfig, out_dir: Path) -> Path:
    return run_experiment(config, out_dir)


def _per_case_target(run_dir: Path, target: str, metric: str) -> np.ndarray:
    cases = pd.read_csv(run_dir / CASES_FILE)
    return cases.loc[cases["site"] == target, metric].to_numpy(dtype=np.float64)


def run_ablation_grid(
    base: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    max_workers: int = 1,
    table1_ratio: Optional[str] = None,
) -> Dict[str, object]:
    """
    Run every study mode at every DiceCE/Focal ratio and tabulate target-site
    metrics per study. Failed cells are recorded as FAILED and the grid
    continues.

    Returns:
        ``{"cells": {(mode, ratio): run_dir or None}, "failed": [...], "tables": {...}}``
    """
    root = resolve_project_path(out_dir or base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    base, _ = ensure_dataset(base, root)
    table1_ratio = table1_ratio or base.ratio

    jobs = []
    for mode in StudyMode:
        for ratio in RATIO_GRID:
            cell_dir = cell_directory(root, mode, ratio)
            jobs.append((mode, ratio, cell_config(base, mode, ratio, cell_dir), cell_dir))
    logger.info(f"🔧 Ablation grid: {len(jobs)} cells under {root}, {max_workers} worker(s)")

    cells: Dict[Tuple[StudyMode, str], Optional[Path]] = {}
    failed: List[str] = []

    def record(mode: StudyMode, ratio: str, run) -> None:
        try:
            cells[(mode, ratio)] = run()
            logger.info(f"✅ cell {mode.label} {ratio} finished")
        except Exception as err:
            logger.error(f"❌ cell {mode.label} {ratio} failed: {err}", exc_info=True)
            cells[(mode, ratio)] = None
            failed.append(f"{mode.value} {ratio}")

    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = [(m, r, pool.submit(_run_cell, c, d)) for m, r, c, d in jobs]
            for mode, ratio, future in futures:
                record(mode, ratio, future.result)
    else:
        for mode, ratio, config, cell_dir in jobs:
            record(mode, ratio, lambda c=config, d=cell_dir: _run_cell(c, d))

    target = base.target_site_name
    tables: Dict[str, pd.DataFrame] = {}
    for mode in StudyMode:
        rows = []
        for ratio in RATIO_GRID:
            run_dir = cells.get((mode, ratio))
            if run_dir is not None:
                rows.append({"label": ratio, **read_summary(run_dir, target)})
        frame = summary_rows_to_frame(rows, RATIO_COLUMN, list(RATIO_GRID))
        study_dir = root / f"study{mode.study_number}_{mode.value}"
        study_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(study_dir / "table.csv", index=False)
        title = f"Study {mode.study_number}: {mode.label}\n\n"
        (study_dir / TABLE_FILE).write_text(
            title + render_markdown_table(frame, RATIO_COLUMN), encoding="utf-8"
        )
        tables[mode.value] = frame

    rows = []
    for mode in TABLE1_ORDER:
        run_dir = cells.get((mode, table1_ratio))
        if run_dir is not None:
            rows.append({"label": mode.label, **read_summary(run_dir, target)})
    table1 = summary_rows_to_frame(rows, METHOD_COLUMN, [m.label for m in TABLE1_ORDER])
    table1.to_csv(root / "table1.csv", index=False)
    (root / "table1.md").write_text(
        f"Domain adaptation on the hybrid backbone (ratio {table1_ratio})\n\n"
        + render_markdown_table(table1, METHOD_COLUMN),
        encoding="utf-8",
    )
    tables["table1"] = table1

    anova_rows = []
    for mode in StudyMode:
        run_dirs = [cells.get((mode, ratio)) for ratio in RATIO_GRID]
        for metric in METRIC_NAMES:
            row = {"study": mode.value, "metric": metric, "F": math.nan, "p": math.nan, "flag": ""}
            if any(d is None for d in run_dirs):
                row["flag"] = FAILED
            else:
                try:
                    f_stat, p_value = one_way_anova(*(_per_case_target(d, target, metric) for d in run_dirs))
                    row.update({"F": f_stat, "p": p_value})
                    if not (math.isfinite(f_stat) and math.isfinite(p_value)):
                        row["flag"] = "degenerate_variance"
                except ShapeError as err:
                    row["flag"] = f"insufficient_data: {err}"
            anova_rows.append(row)
    pd.DataFrame(anova_rows).to_csv(root / "anova.csv", index=False)

    if failed:
        logger.warning(f"⚠️ {len(failed)} grid cell(s) failed: {', '.join(failed)}")
    else:
        logger.info(f"🎉 Ablation grid complete: tables under {root}")
    return {"cells": cells, "failed": failed, "tables": tables, "root": root}


def compare_runs(
    run_a: Union[str, Path],
    run_b: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    site: Optional[str] = None,
) -> pd.DataFrame:
    """
    Paired t-test of A against B per metric over their common validation cases.

    Raises:
        AlignmentError: if the two runs did not evaluate the same cases
    """
    frames = []
    for run in (run_a, run_b):
        cases = pd.read_csv(Path(run) / CASES_FILE, dtype={"case_id": str, "site": str})
        if site is not None:
            cases = cases[cases["site"] == site]
        cases = cases.assign(key=cases["site"].fillna("") + "/" + cases["case_id"])
        frames.append(cases.set_index("key"))
    a, b = frames
    unmatched = set(a.index) ^ set(b.index)
    if unmatched:
        raise AlignmentError(unmatched)
    b = b.loc[a.index]

    rows = []
    for metric in METRIC_NAMES:
        x = a[metric].to_numpy(dtype=np.float64)
        y = b[metric].to_numpy(dtype=np.float64)
        finite = np.isfinite(x) & np.isfinite(y)
        flags = []
        if not finite.all():
            flags.append(f"dropped_nan:{int((~finite).sum())}")
        row = {"metric": metric, "t": math.nan, "p": math.nan, "df": int(finite.sum()) - 1}
        try:
            result = paired_t_test(x[finite], y[finite])
            row.update({"t": result.t, "p": result.p, "df": result.df})
        except DegenerateVarianceError:
            flags.append("degenerate_variance")
        except ShapeError:
            flags.append("insufficient_cases")
        row["significant"] = bool(row["p"] < SIGNIFICANCE_LEVEL) if math.isfinite(row["p"]) else False
        row["flag"] = ";".join(flags)
        if math.isfinite(row["p"]):
            row["neg_log10_p"] = math.inf if row["p"] == 0 else -math.log10(row["p"])
        else:
            row["neg_log10_p"] = math.nan
        rows.append(row)

    report = pd.DataFrame(
        rows, columns=["metric", "t", "p", "df", "significant", "flag", "neg_log10_p"]
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_dir / STATS_FILE, index=False)
    logger.info(f"Compared {len(a)} cases: {int(report['significant'].sum())} significant metric(s)")
    return report


def export_surface_map(pred: MaskVolume, gt: MaskVolume, path: Union[str, Path]) -> pd.DataFrame:
    """Write the predicted-surface distance point cloud to ``path`` (CSV)."""
    points = surface_map_points(pred, gt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points.to_csv(path, index=False)
    logger.info(f"Surface map with {len(points)} points written to {path}")
    return points


def run_case_masks(run_dir: Union[str, Path]) -> List[Tuple[CaseRecord, MaskVolume, MaskVolume]]:
    """(case with cube-standardized volume, predicted mask, ground-truth mask) for every stored prediction."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    data_root = resolve_project_path(config.data_root)
    side = config.model.input_side
    triples = []
    for path in sorted((run_dir / PREDICTIONS_DIR).glob("*/*.pfda")):
        site, case_id = path.parent.name, path.name[: -len(".pfda")]
        case = load_case(data_root, site, case_id)
        volume = standardize_cube(case.volume, side)
        gt = MaskVolume(prepare_case(case, side)[1], case.volume.spacing)
        pred = load_volume(path)
        triples.append((CaseRecord(case_id, site, case.split, volume, gt), pred, gt))
    return triples


def feature_consistency(run_dir: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Pearson r between predicted-mask and ground-truth-mask features across cases."""
    predicted: Dict[str, List[float]] = {name: [] for name in FEATURE_NAMES}
    reference: Dict[str, List[float]] = {name: [] for name in FEATURE_NAMES}
    skipped = 0
    for case, pred, gt in run_case_masks(run_dir):
        try:
            fp = mask_features(case.volume, pred)
            fg = mask_features(case.volume, gt)
        except InvariantError as err:
            logger.warning(f"⚠️ skipping {case.site}/{case.case_id}: {err}")
            skipped += 1
            continue
        for name in FEATURE_NAMES:
            predicted[name].append(getattr(fp, name))
            reference[name].append(getattr(fg, name))

    rows = []
    for name in FEATURE_NAMES:
        row = {"feature": name, "r": math.nan, "n_cases": len(predicted[name]), "flag": ""}
        try:
            row["r"] = pearson_r(predicted[name], reference[name])
        except UndefinedCorrelationError:
            row["flag"] = "degenerate_variance"
        except ShapeError:
            row["flag"] = "insufficient_cases"
        if skipped:
            row["flag"] = ";".join(f for f in (row["flag"], f"skipped_empty:{skipped}") if f)
        rows.append(row)
    table = pd.DataFrame(rows, columns=["feature", "r", "n_cases", "flag"])
    target = Path(out_dir) if out_dir is not None else Path(run_dir)
    target.mkdir(parents=True, exist_ok=True)
    table.to_csv(target / FEATURES_FILE, index=False)
    return table

