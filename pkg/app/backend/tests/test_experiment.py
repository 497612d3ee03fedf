"""
Experiment orchestration and CLI tests.

A single tiny run (16^3 phantoms, one epoch) is shared by the module; the
full 12-cell grid and the three-seed benchmark comparison are marked slow.

Usage:
    pytest tests/test_experiment.py -v
    pytest tests/test_experiment.py --runslow
"""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config.config import load_experiment_config
from main import main
from model.models import METRIC_NAMES, RATIO_GRID, ModelConfig
from model.volume import MaskVolume
from services.experiment import (
    CASES_FILE,
    CHECKPOINT_FILE,
    FEATURES_FILE,
    MANIFEST_FILE,
    STATS_FILE,
    SUMMARY_FILE,
    TRAINING_LOG_FILE,
    compare_runs,
    export_surface_map,
    feature_consistency,
    load_run_config,
    read_summary,
    run_ablation_grid,
    run_case_masks,
    run_experiment,
)
from services.volume_pipeline import generate_phantom_dataset, load_manifest, save_volume
from utils.errors import AlignmentError
from utils.table_format import FAILED, render_markdown_table, summary_rows_to_frame

TINY_CONFIG = Path(__file__).parent.parent / "configs" / "tiny.cfg"
BENCHMARK_CONFIG = TINY_CONFIG.parent / "phantom_benchmark.cfg"


def tiny_config(**overrides):
    items = [f"{k}={v}" for k, v in overrides.items()]
    return load_experiment_config(TINY_CONFIG, overrides=["training.epochs=1", *items])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    return run_experiment(tiny_config(), out)


def write_cases(run_dir: Path, rows):
    run_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=["case_id", "site", *METRIC_NAMES, "flags"])
    frame.to_csv(run_dir / CASES_FILE, index=False)
    return run_dir


def synthetic_rows(values, site="target"):
    rows = []
    for i, dice in enumerate(values):
        rows.append([f"case_{i:04d}", site, dice, dice, dice, 1.0 + i, 2.0 + i * i, 0.5 * i, ""])
    return rows


class TestRunExperiment:
    def test_run_directory_layout(self, tiny_run):
        for name in (MANIFEST_FILE, SUMMARY_FILE, CASES_FILE, TRAINING_LOG_FILE, CHECKPOINT_FILE):
            assert (tiny_run / name).exists(), name
        assert len(list((tiny_run / "predictions" / "target").glob("*.pfda"))) == 2
        assert len(list((tiny_run / "predictions" / "source").glob("*.pfda"))) == 2

    def test_summary_has_one_row_per_site(self, tiny_run):
        summary = pd.read_csv(tiny_run / SUMMARY_FILE)
        assert summary["site"].tolist() == ["source", "target"]
        assert set(METRIC_NAMES) <= set(summary.columns)
        assert summary["n_cases"].tolist() == [2, 2]
        assert ((summary["probe_acc"] >= 0) & (summary["probe_acc"] <= 1)).all()
        assert set(read_summary(tiny_run)) == set(METRIC_NAMES)

    def test_manifest_reloads_config(self, tiny_run):
        cfg = load_run_config(tiny_run)
        assert cfg.model == ModelConfig.tiny()
        assert cfg.training.epochs == 1
        assert Path(cfg.data_root) == tiny_run / "data"
        header = (tiny_run / MANIFEST_FILE).read_text().splitlines()[0]
        assert header == "# run: tiny"

    def test_training_log_rows(self, tiny_run):
        log = pd.read_csv(tiny_run / TRAINING_LOG_FILE)
        assert log["step"].tolist() == [1, 2]
        assert np.isfinite(log["total"]).all()

    def test_case_masks_come_back_aligned(self, tiny_run):
        triples = run_case_masks(tiny_run)
        assert len(triples) == 4
        for case, pred, gt in triples:
            assert pred.shape == gt.shape == case.volume.shape == (16, 16, 16)

    def test_feature_consistency_table(self, tiny_run, tmp_path):
        table = feature_consistency(tiny_run, tmp_path)
        assert table["feature"].tolist() == ["voxel_volume", "surface_area", "sphericity", "energy"]
        assert (tmp_path / FEATURES_FILE).exists()
        for row in table.itertuples():
            assert math.isnan(row.r) or -1.0 <= row.r <= 1.0

    def test_compare_with_itself_is_degenerate(self, tiny_run, tmp_path):
        report = compare_runs(tiny_run, tiny_run, tmp_path)
        assert report["metric"].tolist() == list(METRIC_NAMES)
        assert not report["significant"].any()
        assert report["t"].isna().all()
        assert (tmp_path / STATS_FILE).exists()

    def test_same_seed_reproduces_summary(self, tiny_run, tmp_path):
        again = run_experiment(tiny_config(), tmp_path / "again")
        for name in (SUMMARY_FILE, CASES_FILE, TRAINING_LOG_FILE):
            pd.testing.assert_frame_equal(pd.read_csv(again / name), pd.read_csv(tiny_run / name), check_exact=True)

    def test_manifest_rerun_reproduces_summary(self, tiny_run, tmp_path):
        rerun = run_experiment(load_run_config(tiny_run), tmp_path / "rerun")
        pd.testing.assert_frame_equal(
            pd.read_csv(rerun / SUMMARY_FILE), pd.read_csv(tiny_run / SUMMARY_FILE), check_exact=True
        )


class TestCompareRuns:
    def test_antisymmetry(self, tmp_path):
        a = write_cases(tmp_path / "a", synthetic_rows([0.90, 0.92, 0.88, 0.95]))
        b = write_cases(tmp_path / "b", synthetic_rows([0.85, 0.91, 0.80, 0.90]))
        ab = compare_runs(a, b).set_index("metric")
        ba = compare_runs(b, a).set_index("metric")
        assert ab.loc["dice", "t"] == pytest.approx(-ba.loc["dice", "t"])
        assert ab.loc["dice", "p"] == pytest.approx(ba.loc["dice", "p"])
        assert ab.loc["dice", "df"] == 3
        assert ab.loc["hd", "flag"] == "degenerate_variance"

    def test_hand_example(self, tmp_path):
        a = write_cases(tmp_path / "a", synthetic_rows([1.0, 2.0, 3.0]))
        b = write_cases(tmp_path / "b", synthetic_rows([2.0, 2.0, 5.0]))
        dice = compare_runs(a, b).set_index("metric").loc["dice"]
        assert dice["t"] == pytest.approx(-math.sqrt(3))
        assert dice["p"] == pytest.approx(0.2254, abs=1e-4)
        assert not dice["significant"]
        assert dice["neg_log10_p"] == pytest.approx(-math.log10(dice["p"]))

    def test_constant_hd_offset_is_flagged(self, tmp_path):
        rows_a = synthetic_rows([0.90, 0.92, 0.88, 0.95, 0.91])
        rows_b = synthetic_rows([0.85, 0.91, 0.80, 0.90, 0.93])
        for row_a, row_b, hd in zip(rows_a, rows_b, [3.71, 17.29, 42.07, 8.33, 55.9]):
            row_a[5] = hd
            row_b[5] = hd + 0.013
        a = write_cases(tmp_path / "a", rows_a)
        b = write_cases(tmp_path / "b", rows_b)
        hd_row = compare_runs(a, b).set_index("metric").loc["hd"]
        assert hd_row["flag"] == "degenerate_variance"
        assert math.isnan(hd_row["t"])
        assert not hd_row["significant"]

    def test_mismatched_cases(self, tmp_path):
        a = write_cases(tmp_path / "a", synthetic_rows([0.9, 0.8, 0.7]))
        b = write_cases(tmp_path / "b", synthetic_rows([0.9, 0.8]))
        with pytest.raises(AlignmentError) as err:
            compare_runs(a, b)
        assert err.value.unmatched == ["target/case_0002"]

    def test_nan_pairs_are_dropped_and_flagged(self, tmp_path):
        rows_a = synthetic_rows([0.9, 0.8, 0.7, 0.6])
        rows_a[0][5] = float("nan")
        a = write_cases(tmp_path / "a", rows_a)
        b = write_cases(tmp_path / "b", synthetic_rows([0.8, 0.8, 0.6, 0.4]))
        hd = compare_runs(a, b).set_index("metric").loc["hd"]
        assert "dropped_nan:1" in hd["flag"]
        assert hd["df"] == 2


class TestSurfaceMap:
    def test_export(self, tmp_path):
        pred = np.zeros((6, 6, 6), dtype=np.uint8)
        gt = np.zeros((6, 6, 6), dtype=np.uint8)
        pred[1:3, 1:3, 1:3] = 1
        gt[2:4, 1:3, 1:3] = 1
        points = export_surface_map(MaskVolume(pred), MaskVolume(gt), tmp_path / "maps" / "case.csv")
        assert len(points) == 8
        reloaded = pd.read_csv(tmp_path / "maps" / "case.csv")
        assert list(reloaded.columns) == ["x_mm", "y_mm", "z_mm", "distance_mm"]
        assert reloaded["distance_mm"].max() == pytest.approx(1.0)


class TestTableFormat:
    def test_bold_best_and_percent(self):
        frame = pd.DataFrame(
            {
                "Method": ["A", "B"],
                "Dice": [0.90, 0.95],
                "Precision": [0.9, 0.9],
                "Recall": [0.8, 0.7],
                "HD": [3.0, 2.0],
                "HD95": [1.0, 1.5],
                "ASD": [0.5, 0.4],
            }
        )
        lines = render_markdown_table(frame, "Method").splitlines()
        assert lines[0] == "| Method | Dice | Precision | Recall | HD | HD95 | ASD |"
        assert lines[2] == "| A | 90.00 | **90.00** | **80.00** | 3.00 | **1.00** | 0.50 |"
        assert lines[3] == "| B | **95.00** | 90.00 | 70.00 | **2.00** | 1.50 | **0.40** |"

    def test_missing_rows_are_failed(self):
        frame = summary_rows_to_frame([{"label": "0.6/0.4", "dice": 0.9}], "DiceCE/Focal", list(RATIO_GRID))
        assert frame["DiceCE/Focal"].tolist() == list(RATIO_GRID)
        failed = frame[frame["DiceCE/Focal"] != "0.6/0.4"]
        assert (failed["Dice"] == FAILED).all()
        assert FAILED in render_markdown_table(frame, "DiceCE/Focal")


class TestCli:
    def test_phantom_gen(self, tmp_path):
        assert main(["phantom-gen", "--config", str(TINY_CONFIG), "--out", str(tmp_path)]) == 0
        assert len(load_manifest(tmp_path)) == 12

    def test_bad_override_exits_2(self, tmp_path):
        code = main(["run", "--config", str(TINY_CONFIG), "--set", "ratio=0.9/0.1", "--out", str(tmp_path)])
        assert code == 2

    def test_missing_run_exits_1(self, tmp_path):
        assert main(["compare", "--run-a", str(tmp_path / "a"), "--run-b", str(tmp_path / "b")]) == 1

    def test_surface_map_from_files(self, tmp_path):
        data = np.zeros((4, 4, 4), dtype=np.uint8)
        data[1:3, 1:3, 1:3] = 1
        save_volume(MaskVolume(data), tmp_path / "pred.pfda")
        save_volume(MaskVolume(data), tmp_path / "gt.pfda")
        code = main(
            ["surface-map", "--pred", str(tmp_path / "pred.pfda"), "--gt", str(tmp_path / "gt.pfda"), "--out", str(tmp_path)]
        )
        assert code == 0
        assert (tmp_path / "surface_map_pred.csv").exists()


@pytest.mark.slow
class TestAblationGrid:
    def test_grid_tables(self, tmp_path):
        result = run_ablation_grid(tiny_config(), tmp_path)
        assert result["failed"] == []
        assert len(result["cells"]) == 12
        assert (tmp_path / "study1_grl_mmd" / "table.md").read_text().startswith("Study 1: GRL+MMD")
        table1 = pd.read_csv(tmp_path / "table1.csv")
        assert table1["Method"].tolist() == ["No DA", "GRL only", "MMD only", "GRL+MMD"]
        anova = pd.read_csv(tmp_path / "anova.csv")
        assert len(anova) == 4 * len(METRIC_NAMES)


@pytest.mark.slow
class TestDirectionalAdaptation:
    """Phantom benchmark at S = 48, median over three training seeds."""

    SEEDS = (0, 1, 2)

    def test_alignment_improves_target_site(self, tmp_path):
        base = load_experiment_config(BENCHMARK_CONFIG)
        data_root = tmp_path / "data"
        generate_phantom_dataset(data_root, base.phantom, (base.source_site_name, base.target_site_name))
        target = base.target_site_name

        dice = {"none": [], "grl_mmd": []}
        probe_without_adaptation, final_domain_acc, domain_acc_drop = [], [], []
        for seed in self.SEEDS:
            for mode in dice:
                cfg = load_experiment_config(
                    BENCHMARK_CONFIG,
                    overrides=[f"adaptation.study_mode={mode}", f"training.seed={seed}", f"data_root={data_root}"],
                )
                run = run_experiment(cfg, tmp_path / f"{mode}_{seed}")
                summary = pd.read_csv(run / SUMMARY_FILE).set_index("site")
                dice[mode].append(float(summary.loc[target, "dice"]))
                if mode == "none":
                    probe_without_adaptation.append(float(summary.loc[target, "probe_acc"]))
                    continue
                log = pd.read_csv(run / TRAINING_LOG_FILE)
                epochs = np.array_split(log["domain_acc"].to_numpy(dtype=np.float64), cfg.training.epochs)
                final_domain_acc.append(float(epochs[-1].mean()))
                domain_acc_drop.append(float(epochs[0].mean() - epochs[-1].mean()))

        assert np.median(dice["grl_mmd"]) >= np.median(dice["none"]) - 0.002
        assert np.median(final_domain_acc) <= 0.65
        assert np.median(domain_acc_drop) > 0.0
        assert np.median(probe_without_adaptation) > 0.9
