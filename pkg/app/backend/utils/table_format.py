import logging
import math
from typing import Dict, Iterable, List, Sequence

import pandas as pd

logger = logging.getLogger(__name__)

# Table column -> metric key
TABLE_COLUMNS: Dict[str, str] = {
    "Dice": "dice",
    "Precision": "precision",
    "Recall": "recall",
    "HD": "hd",
    "HD95": "hd95",
    "ASD": "asd",
}
PERCENT_METRICS = {"dice", "precision", "recall"}
LOWER_IS_BETTER = {"hd", "hd95", "asd"}
FAILED = "FAILED"


def _best_index(values: pd.Series, metric: str):
    numeric = pd.to_numeric(values, errors="coerce")
    if numeric.notna().sum() == 0:
        return None
    return numeric.idxmin() if metric in LOWER_IS_BETTER else numeric.idxmax()


def _format_cell(value, metric: str, decimals: int) -> str:
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if metric in PERCENT_METRICS:
        return f"{100.0 * value:.{decimals}f}"
    return f"{value:.{decimals}f}"


def render_markdown_table(
    frame: pd.DataFrame,
    label_column: str,
    metric_columns: Sequence[str] = tuple(TABLE_COLUMNS),
    decimals: int = 2,
    bold_best: bool = True,
) -> str:
    """
    Markdown table with overlap metrics shown in percent and the best value of
    each metric column in bold. Cells holding a string (e.g. ``FAILED``) are
    copied through unchanged.
    """
    header = [label_column, *metric_columns]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(["---"] * len(header)) + "|",
    ]
    best = {}
    if bold_best:
        for column in metric_columns:
            best[column] = _best_index(frame[column], TABLE_COLUMNS[column])

    for index, row in frame.iterrows():
        cells = [str(row[label_column])]
        for column in metric_columns:
            text = _format_cell(row[column], TABLE_COLUMNS[column], decimals)
            if bold_best and best.get(column) == index:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def summary_rows_to_frame(
    rows: Iterable[Dict[str, object]], label_column: str, labels: List[str]
) -> pd.DataFrame:
    """
    Build a table frame from ``{label, dice, ..., asd}`` summaries; labels with
    no summary get ``FAILED`` in every metric column.
    """
    by_label = {str(r["label"]): r for r in rows}
    records = []
    for label in labels:
        summary = by_label.get(label)
        record = {label_column: label}
        for column, metric in TABLE_COLUMNS.items():
            record[column] = FAILED if summary is None else summary.get(metric, math.nan)
        records.append(record)
    return pd.DataFrame(records, columns=[label_column, *TABLE_COLUMNS])
