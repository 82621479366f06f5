import io
import os
import tempfile

import numpy as np
import pandas as pd
import pytest

from app.errors import RejectedInputError
from app.manifest import (
    MANIFEST_COLUMNS, load_image, load_patches, parse_manifest, patches_to_tensor, save_image, write_manifest,
)

SAMPLE_JSONL = """{"case_id": "case_000", "class": "A", "domain": "FS", "split": "train", "path": "train/FS/case_000/p000.png", "seed": 11, "patch_id": "p000"}
{"case_id": "case_000", "class": "A", "domain": "FFPE", "split": "train", "path": "train/FFPE/case_000/p000.png", "seed": 12, "patch_id": "p000"}
{"case_id": "case_001", "class": "B", "domain": "FS", "split": "test", "path": "test/FS/case_001/p000.png", "seed": 13, "patch_id": "p000"}
"""


def test_parse_jsonl_manifest():
    with tempfile.NamedTemporaryFile(mode="w+", suffix=".jsonl", delete=False) as f:
        f.write(SAMPLE_JSONL)
        temp_path = f.name

    df = parse_manifest(temp_path)
    os.unlink(temp_path)

    assert isinstance(df, pd.DataFrame)
    assert list(df.columns) == MANIFEST_COLUMNS
    assert df.shape[0] == 3
    assert df.loc[df["case_id"] == "case_001", "split"].iloc[0] == "test"
    assert df["seed"].dtype == np.int64


def test_parse_csv_manifest():
    sample_csv = """case_id,class,domain,split,path,seed,patch_id
case_002,C,FFPE,val,val/FFPE/case_002/p000.png,5,p000
"""
    with tempfile.NamedTemporaryFile(mode="w+", suffix=".csv", delete=False) as f:
        f.write(sample_csv)
        temp_path = f.name

    df = parse_manifest(temp_path)
    os.unlink(temp_path)

    assert df.iloc[0]["class"] == "C"
    assert df.iloc[0]["patch_id"] == "p000"


def test_parse_manifest_from_file_object():
    df = parse_manifest(io.BytesIO(SAMPLE_JSONL.encode("utf-8")))
    assert len(df) == 3
    assert parse_manifest(io.StringIO("")).empty


def test_manifest_missing_column_raises():
    broken = '{"case_id": "case_000", "class": "A"}\n'
    try:
        parse_manifest(io.StringIO(broken))
        assert False, "Should raise ValueError for missing columns"
    except ValueError as e:
        assert "Missing expected columns" in str(e)


def test_parse_manifest_unsupported_type():
    try:
        parse_manifest("unsupported_file_type.xyz")
        assert False, "Should raise ValueError for unsupported file type"
    except ValueError as e:
        assert "Unsupported file type" in str(e)


def test_manifest_unknown_domain_raises():
    bad = SAMPLE_JSONL.replace('"domain": "FS"', '"domain": "HE"', 1)
    with pytest.raises(RejectedInputError, match="Unknown domain"):
        parse_manifest(io.StringIO(bad))


def test_write_manifest_sorts_rows(tmp_path):
    df = parse_manifest(io.StringIO(SAMPLE_JSONL))
    path = write_manifest(df.iloc[::-1], tmp_path / "out" / "manifest.jsonl")
    written = parse_manifest(path)
    assert list(written["split"]) == ["test", "train", "train"]
    assert list(written["domain"])[1:] == ["FFPE", "FS"]


def test_save_and_load_image_quantizes(tmp_path):
    pixels = np.full((4, 4, 3), 0.5)
    path = save_image(tmp_path / "a" / "img.png", pixels)
    loaded = load_image(path)
    assert loaded.shape == (4, 4, 3)
    assert np.allclose(loaded, 128 / 255.0)


def test_load_image_missing_raises(tmp_path):
    with pytest.raises(RejectedInputError):
        load_image(tmp_path / "missing.png")


def test_load_patches(tmp_path):
    df = parse_manifest(io.StringIO(SAMPLE_JSONL))
    for rel in df["path"]:
        save_image(tmp_path / rel, np.zeros((8, 8, 3)))
    patches = load_patches(df, tmp_path)
    assert [p.class_label for p in patches] == ["A", "A", "B"]
    assert patches[1].domain == "FFPE"
    assert tuple(patches_to_tensor(patches).shape) == (3, 3, 8, 8)
    with pytest.raises(RejectedInputError):
        patches_to_tensor([])
