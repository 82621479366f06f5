"""
summary.py

This module aggregates metric records into summary rows shaped like a results table:
one row per evaluated method with AUC, accuracy and one CaseFD column per extractor.

Main features:
- Aggregate {metric, extractor, case_id, value} records into a single row.
- Aggregate per-case CaseFD values by mean or median.
- Assemble rows into a table (DataFrame) and write it as CSV.

Functions:
    summarize_metrics(records, aggregation="mean"): Aggregate metric records into one row dict.
    build_table(rows, extractors=None): Assemble named rows into a results DataFrame.
    save_table(table, path): Write the results table as CSV.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from app.errors import ConfigError, RejectedInputError

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["metric", "extractor", "case_id", "value"]


def casefd_column(extractor: str) -> str:
    return f"CaseFD[{extractor}]"


def summarize_metrics(records: Union[pd.DataFrame, Iterable[dict]], aggregation: str = "mean") -> Dict[str, float]:
    """
    Aggregate metric records into one summary row.

    Args:
        records (pd.DataFrame or iterable of dict): Records with columns metric, extractor, case_id, value.
            Classification metrics (``macro_auc``, ``accuracy`` and their ``*_std``) carry an empty case_id;
            ``case_fd`` records carry one value per case.
        aggregation (str): How per-case CaseFD values are combined, "mean" or "median".

    Returns:
        dict: AUC and Acc in percent, AUC_std and Acc_std in percent, and ``CaseFD[<extractor>]`` columns.

    Raises:
        RejectedInputError: If required columns are missing.
        ConfigError: If the aggregation is unknown.
    """
    df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records), columns=RECORD_COLUMNS)
    missing = [col for col in RECORD_COLUMNS if col not in df.columns]
    if missing:
        raise RejectedInputError(f"Missing expected columns: {missing}")
    if aggregation not in ("mean", "median"):
        raise ConfigError(f"Unknown aggregation {aggregation!r}", "eval.aggregation")

    row: Dict[str, float] = {}
    scalar = df[df["metric"] != "case_fd"]
    for metric, column in (("macro_auc", "AUC"), ("auc_std", "AUC_std"), ("accuracy", "Acc"), ("accuracy_std", "Acc_std")):
        values = scalar.loc[scalar["metric"] == metric, "value"]
        if len(values):
            row[column] = float(values.mean()) * 100.0

    case_fd = df[df["metric"] == "case_fd"]
    for extractor, group in case_fd.groupby("extractor", sort=True):
        row[casefd_column(extractor)] = float(group["value"].agg(aggregation))
    return row


def build_table(rows: Dict[str, Dict[str, float]], extractors: Optional[List[str]] = None) -> pd.DataFrame:
    """
    Assemble named summary rows into a results table.

    Rows lacking a CaseFD column (the FFPE reference row) get ``inf`` there, as CaseFD of
    the reference against itself is not a comparison.

    Returns:
        pd.DataFrame: Columns Method, AUC, AUC_std, Acc, Acc_std, then one CaseFD column per extractor.
    """
    extractors = extractors or sorted(
        {col[len("CaseFD["):-1] for row in rows.values() for col in row if col.startswith("CaseFD[")}
    )
    columns = ["Method", "AUC", "AUC_std", "Acc", "Acc_std"] + [casefd_column(e) for e in extractors]
    table = []
    for method, row in rows.items():
        entry = {"Method": method}
        for col in columns[1:]:
            default = np.inf if col.startswith("CaseFD[") else np.nan
            entry[col] = row.get(col, default)
        table.append(entry)
    return pd.DataFrame(table, columns=columns)


def save_table(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.6f")
    logger.info("table written path=%s rows=%d", path, len(table))
    return path
