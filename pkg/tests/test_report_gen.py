import os
import tempfile

import numpy as np
import pandas as pd

from app.report_gen import generate_markdown_report, save_report, settings_to_list


def make_table():
    return pd.DataFrame([
        {"Method": "FFPE", "AUC": 95.0, "AUC_std": 1.2, "Acc": 90.0, "Acc_std": 2.0, "CaseFD[toy]": np.inf},
        {"Method": "Frozen Section", "AUC": 71.5, "AUC_std": 4.0, "Acc": 60.0, "Acc_std": 5.0, "CaseFD[toy]": 12.5},
        {"Method": "default", "AUC": 84.25, "AUC_std": 3.0, "Acc": 75.0, "Acc_std": 4.0, "CaseFD[toy]": 6.1},
    ])


def make_settings():
    return {"S": 0.7, "GS": 4.0, "alpha": 0.25}


def test_generate_markdown_report_basic():
    md = generate_markdown_report(make_table(), make_settings(), generated="2026-01-01 00:00:00")
    assert isinstance(md, str)
    assert "# FS to FFPE Translation Report" in md
    assert "**Generated:** 2026-01-01 00:00:00" in md
    assert "Frozen Section" in md
    assert "84.25" in md
    assert "## Case-wise Frechet Distance" not in md


def test_generate_markdown_report_with_case_table():
    cases = pd.DataFrame({"case_id": ["case_000"], "class": ["A"], "method": ["default"], "toy": [1.23456]})
    md = generate_markdown_report(make_table(), make_settings(), cases)
    assert "## Case-wise Frechet Distance" in md
    assert "1.235" in md


def test_settings_to_list():
    out = settings_to_list(make_settings())
    assert "- **S**: 0.7" in out
    assert "- **alpha**: 0.25" in out
    assert len(out.splitlines()) == 3


def test_save_report_creates_markdown_and_html():
    md = generate_markdown_report(make_table(), make_settings())
    with tempfile.TemporaryDirectory() as tmpdir:
        md_path, html_path = save_report(md, filename=os.path.join(tmpdir, "eval", "report"))
        assert os.path.isfile(md_path)
        assert str(html_path).endswith(".html")
        html = html_path.read_text()
        assert "<table>" in html
        assert "Frozen Section" in html
