"""
report_gen.py

This module generates evaluation reports in Markdown and HTML from the results table,
the guidance settings of the run and the per-case CaseFD table.

Main features:
- Generate a Markdown report with the results table, settings and per-case distances.
- Format settings as a Markdown bullet list.
- Convert Markdown reports to HTML using markdown2.

Functions:
    generate_markdown_report(table, settings, case_table=None, generated=None): Generate a Markdown report.
    settings_to_list(settings): Format a settings dictionary as a Markdown bullet list.
    save_report(md_content, filename="report"): Save a Markdown report and its HTML rendering.
"""

from datetime import datetime
from pathlib import Path
from typing import Optional, Tuple, Union

import markdown2
import pandas as pd


def generate_markdown_report(
    table: pd.DataFrame,
    settings: dict,
    case_table: Optional[pd.DataFrame] = None,
    generated: Optional[str] = None,
) -> str:
    """
    Generate a Markdown report for one evaluation run.

    Args:
        table (pd.DataFrame): Results table from ``summary.build_table``.
        settings (dict): Flat mapping of the settings worth reporting (GS, S, alpha, ...).
        case_table (pd.DataFrame, optional): Per-case CaseFD values.
        generated (str, optional): Timestamp to print; the current time when omitted.

    Returns:
        str: The generated Markdown report as a string.
    """
    md = "# FS to FFPE Translation Report\n\n"
    md += f"**Generated:** {generated or datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n\n"
    md += "## Results\n"
    md += table.to_markdown(index=False, floatfmt=".2f") + "\n\n"
    md += "---\n\n"
    md += "## Settings\n"
    md += settings_to_list(settings) + "\n\n"
    if case_table is not None and len(case_table):
        md += "---\n\n"
        md += "## Case-wise Frechet Distance\n"
        md += case_table.to_markdown(index=False, floatfmt=".3f") + "\n"
    return md


def settings_to_list(settings: dict) -> str:
    """
    Format settings as a Markdown bullet list.

    Args:
        settings (dict): Setting name -> value.

    Returns:
        str: Markdown-formatted bullet list.
    """
    return "\n".join(f"- **{key}**: {value}" for key, value in settings.items())


def save_report(md_content: str, filename: Union[str, Path] = "report") -> Tuple[Path, Path]:
    """
    Save a Markdown report and its HTML rendering.

    Args:
        md_content (str): The Markdown content to save and convert.
        filename (str or Path, optional): Base filename for the report (without extension).

    Returns:
        tuple: Paths to the Markdown and HTML files.
    """
    base = Path(filename)
    base.parent.mkdir(parents=True, exist_ok=True)
    md_path = base.with_suffix(".md")
    html_path = base.with_suffix(".html")

    with open(md_path, "w") as f:
        f.write(md_content)

    html = markdown2.markdown(md_content, extras=["tables"])
    with open(html_path, "w") as f:
        f.write(html)

    return md_path, html_path
