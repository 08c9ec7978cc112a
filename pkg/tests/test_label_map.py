"""Tests for label harmonization."""

import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from label_map import LABEL_SPACE, OUT_OF_SCOPE, PATHOLOGY_LABELS, HarmonizationMap, harmonize


def test_label_space_order():
    assert len(PATHOLOGY_LABELS) == 8
    assert LABEL_SPACE[-1] == "Normal"


@pytest.mark.parametrize(
    "source_label,expected",
    [
        ("Mass", ["Nodule/Mass"]),
        ("Nodule", ["Nodule/Mass"]),
        ("No Finding", ["Normal"]),
        ("Fibrosis", ["Pulmonary fibrosis"]),
        ("Pleural_Thickening", ["Pleural thickening"]),
        ("Cardiomegaly", ["Cardiomegaly"]),
    ],
)
def test_builtin_aliases(source_label, expected):
    assert harmonize(source_label, "nih") == expected


def test_out_of_scope_dropped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert harmonize("Hernia", "nih") == []
    assert "Hernia" in caplog.text


def test_reason_reported():
    labels, reason = HarmonizationMap().map_label("Emphysema")
    assert labels == []
    assert reason == OUT_OF_SCOPE


def test_source_specific_override():
    mapping = HarmonizationMap({("padchest", "infiltrates"): ["Pneumonia"]})
    assert mapping.harmonize("Infiltrates", "PadChest") == ["Pneumonia"]
    assert mapping.harmonize("Infiltrates", "nih") == []


def test_override_target_must_be_canonical():
    with pytest.raises(ValueError):
        HarmonizationMap({("nih", "x"): ["Edema"]})


def test_from_csv(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text(
        "source,source_label,target_label\n"
        "chexpert,Lung Opacity,Consolidation\n"
        "chexpert,Lung Opacity,Pneumonia\n"
        "nih,Mass,\n",
        encoding="utf-8",
    )
    mapping = HarmonizationMap.from_csv(path)
    assert mapping.harmonize("Lung Opacity", "chexpert") == ["Consolidation", "Pneumonia"]
    assert mapping.harmonize("Mass", "nih") == []
    assert mapping.harmonize("Mass", "other") == ["Nodule/Mass"]


def test_from_csv_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("source,label\nnih,Mass\n", encoding="utf-8")
    with pytest.raises(ValueError, match="missing columns"):
        HarmonizationMap.from_csv(path)


def test_from_csv_keeps_na_like_labels_as_text(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("source,source_label,target_label\nlocal,NA,Pneumothorax\n", encoding="utf-8")
    mapping = HarmonizationMap.from_csv(path)
    assert mapping.harmonize("NA", "local") == ["Pneumothorax"]


def test_from_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        HarmonizationMap.from_csv(path)


@given(label=st.one_of(st.sampled_from(LABEL_SPACE), st.text(max_size=20)))
def test_harmonize_is_idempotent(label):
    first = harmonize(label)
    for name in first:
        assert harmonize(name) == [name]
