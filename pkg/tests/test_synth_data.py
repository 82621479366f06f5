import numpy as np
import pandas as pd
import pytest

from app.config import ArtifactConfig
from app.errors import RejectedInputError
from app.manifest import MANIFEST_COLUMNS, load_image, parse_manifest
from app.synth_data import (
    CaseSpec, apply_fs_artifacts, assign_splits, derive_seed, generate_composites, generate_dataset, reassemble,
    render_texture, tile,
)

NO_ARTIFACTS = ArtifactConfig(fold_density=0.0, ice_hole_rate=0.0, color_shift=[0.0, 0.0, 0.0], blur_sigma=0.0)


def test_derive_seed_is_stable_and_31_bit():
    assert derive_seed(0, "case", 3) == derive_seed(0, "case", 3)
    assert derive_seed(0, "case", 3) != derive_seed(0, "case", 4)
    assert 0 <= derive_seed("x") < 2 ** 31


def test_case_spec_rejects_unknown_class():
    with pytest.raises(RejectedInputError):
        CaseSpec("case_000", "D", 1, 2)


def test_case_params_are_fixed_by_seed():
    assert CaseSpec("a", "A", 5, 1).case_params() == CaseSpec("b", "B", 5, 1).case_params()


def test_render_texture_is_deterministic():
    a = render_texture("C", 32, None, np.random.default_rng(1))
    b = render_texture("C", 32, None, np.random.default_rng(1))
    assert a.shape == (32, 32, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_classes_differ_in_nucleus_coverage():
    def dark_fraction(label):
        image = render_texture(label, 64, None, np.random.default_rng(0))
        return float((image.mean(axis=2) < 0.6).mean())

    # A packs many small nuclei, B few large ones
    assert dark_fraction("A") != dark_fraction("B")


def test_zero_artifact_config_is_identity():
    clean = render_texture("A", 32, None, np.random.default_rng(2))
    out = apply_fs_artifacts(clean, NO_ARTIFACTS, np.random.default_rng(3))
    assert np.array_equal(out, clean)


def test_folds_darken_the_image():
    clean = render_texture("A", 64, None, np.random.default_rng(5))
    folds_only = ArtifactConfig(fold_density=2.0, ice_hole_rate=0.0, color_shift=[0.0, 0.0, 0.0], blur_sigma=0.0)
    out = apply_fs_artifacts(clean, folds_only, np.random.default_rng(6))
    assert out.mean() < clean.mean()


def test_ice_holes_brighten_the_image():
    clean = render_texture("B", 64, None, np.random.default_rng(5))
    holes_only = ArtifactConfig(fold_density=0.0, ice_hole_rate=3.0, color_shift=[0.0, 0.0, 0.0], blur_sigma=0.0)
    out = apply_fs_artifacts(clean, holes_only, np.random.default_rng(6))
    assert out.mean() > clean.mean()


def test_artifacts_change_the_image():
    clean = render_texture("B", 64, None, np.random.default_rng(2))
    out = apply_fs_artifacts(clean, ArtifactConfig(), np.random.default_rng(3))
    assert out.shape == clean.shape
    assert not np.array_equal(out, clean)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_assign_splits_is_balanced_and_stratified():
    specs = assign_splits(18, (0.7, 0.15, 0.15), seed=0)
    assert [s.case_id for s in specs] == [f"case_{i:03d}" for i in range(18)]
    assert specs[0].class_label == "A" and specs[1].class_label == "B" and specs[2].class_label == "C"
    df = pd.DataFrame([{"class": s.class_label, "split": s.split} for s in specs])
    counts = df.groupby(["class", "split"]).size().unstack(fill_value=0)
    assert (counts["train"] == 4).all()
    assert (counts["val"] == 1).all()
    assert (counts["test"] == 1).all()


def test_assign_splits_rejects_bad_arguments():
    with pytest.raises(RejectedInputError):
        assign_splits(10, (0.7, 0.15, 0.15), seed=0)
    with pytest.raises(RejectedInputError):
        assign_splits(9, (0.7, 0.2, 0.2), seed=0)


def test_generate_dataset_layout(tmp_path):
    manifest = generate_dataset(tmp_path, n_cases=3, patches_per_case=2, seed=0, image_size=16)
    assert len(manifest) == 12
    assert set(manifest["domain"]) == {"FS", "FFPE"}
    parsed = parse_manifest(tmp_path / "manifest.jsonl")
    assert list(parsed.columns) == MANIFEST_COLUMNS
    assert len(parsed) == 12
    for rel in parsed["path"]:
        assert load_image(tmp_path / rel).shape == (16, 16, 3)


def test_generate_dataset_is_reproducible(tmp_path):
    generate_dataset(tmp_path / "a", n_cases=3, patches_per_case=1, seed=4, image_size=16)
    generate_dataset(tmp_path / "b", n_cases=3, patches_per_case=1, seed=4, image_size=16, workers=2)
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for rel in parse_manifest(tmp_path / "a" / "manifest.jsonl")["path"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_fs_and_ffpe_renders_are_not_aligned(tmp_path):
    manifest = generate_dataset(tmp_path, n_cases=3, patches_per_case=1, seed=0, image_size=16)
    row = manifest.iloc[0]
    pair = manifest[(manifest["case_id"] == row["case_id"]) & (manifest["patch_id"] == row["patch_id"])]
    seeds = set(pair["seed"])
    assert len(seeds) == 2


def test_generate_composites(tmp_path):
    manifest = generate_dataset(tmp_path, n_cases=3, patches_per_case=1, split_ratios=(0.0, 0.0, 1.0), image_size=16)
    composites = generate_composites(tmp_path, manifest, size=32, artifacts=ArtifactConfig(), seed=0)
    assert len(composites) == 6
    assert set(composites["split"]) == {"composite"}
    assert (tmp_path / "composites.jsonl").exists()
    assert load_image(tmp_path / composites["path"].iloc[0]).shape == (32, 32, 3)


def test_tile_and_reassemble():
    image = np.random.default_rng(0).uniform(size=(64, 64, 3))
    tiles = tile(image, 16)
    assert len(tiles) == 16
    assert tiles[5][:2] == (1, 1)
    shuffled = [tiles[i] for i in np.random.default_rng(1).permutation(16)]
    assert np.array_equal(reassemble(shuffled, image.shape), image)
    with pytest.raises(RejectedInputError):
        tile(image, 24)
