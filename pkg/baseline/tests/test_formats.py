"""Interchange file parsing and the predictions export layout."""
from __future__ import annotations

import json

import pytest
from conftest import build_workspace, write_codebook, write_split_file

from roadbaseline.errors import FormatError
from roadbaseline.formats import (
    PredictionRow,
    read_codebook,
    read_manifest,
    read_split,
    source_image_id,
    write_predictions,
)


def test_manifest_rows_carry_ground_truth(tmp_path):
    manifest = build_workspace(tmp_path, [("a1", "s1", "1", "2"), ("a2", "s1", "1", "2")])
    rows = read_manifest(manifest)
    assert [row.image_id for row in rows] == ["a1", "a2"]
    assert rows[0].ground_truth == {"lighting": "1", "surface": "2"}
    assert rows[1].order_in_segment == 2


def test_manifest_missing_base_column_rejected(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("image_id,segment_id\na,s\n", encoding="utf-8")
    with pytest.raises(FormatError, match="lacks columns"):
        read_manifest(path)


def test_manifest_duplicate_image_rejected(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text(
        "image_id,segment_id,order_in_segment,relative_path\n"
        "a,s,1,a.png\na,s,2,a2.png\n",
        encoding="utf-8",
    )
    with pytest.raises(FormatError, match="duplicate image_id"):
        read_manifest(path)


def test_manifest_blank_ground_truth_cell_is_absent(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text(
        "image_id,segment_id,order_in_segment,relative_path,gt_lighting\n"
        "a,s,1,a.png,\n",
        encoding="utf-8",
    )
    rows = read_manifest(path)
    assert rows[0].ground_truth == {}


def test_split_buckets_read_back(tmp_path):
    path = write_split_file(
        tmp_path / "split.json",
        train=["a", "b"],
        validation=["c"],
        test=["d"],
        excluded_attributes=["gamma"],
    )
    split = read_split(path)
    assert split.train_original == frozenset({"a", "b"})
    assert split.validation == frozenset({"c"})
    assert split.excluded_attributes == ("gamma",)


def test_split_missing_bucket_rejected(tmp_path):
    path = tmp_path / "split.json"
    path.write_text(json.dumps({"train_original": []}), encoding="utf-8")
    with pytest.raises(FormatError, match="lacks bucket"):
        read_split(path)


def test_codebook_classes_preserve_order(tmp_path):
    path = write_codebook(tmp_path / "codebook.json")
    book = read_codebook(path)
    assert book.version == "fixture-1"
    assert book.classes["surface"] == ("1", "2", "3")
    assert not book.single_class("surface")


def test_codebook_single_class_flagged(tmp_path):
    path = write_codebook(tmp_path / "codebook.json", single_class_attr="jurisdiction")
    book = read_codebook(path)
    assert book.single_class("jurisdiction")


def test_codebook_duplicate_attribute_rejected(tmp_path):
    payload = json.loads(write_codebook(tmp_path / "c.json").read_text())
    payload["attributes"].append(payload["attributes"][0])
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(FormatError, match="duplicate attribute"):
        read_codebook(path)


def test_source_image_id_strips_augment_suffix():
    assert source_image_id("img07__aug_gaussian") == "img07"
    with pytest.raises(FormatError):
        source_image_id("img07")


def test_export_layout_header_then_sorted_rows(tmp_path):
    rows = [
        PredictionRow("b", "VGG16-like", {"surface": "2"}, '{"surface": "2"}', "f" * 64),
        PredictionRow("a", "VGG16-like", {"surface": "1"}, '{"surface": "1"}', "f" * 64),
    ]
    out = tmp_path / "predictions.jsonl"
    write_predictions(rows, out, header={"model": "VGG16-like", "excluded_attributes": []})
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert "run_manifest" in lines[0]
    assert [line["image_id"] for line in lines[1:]] == ["a", "b"]
    assert lines[1]["invalid_attributes"] == []
    assert set(lines[1]) == {
        "image_id", "model", "predictions", "invalid_attributes",
        "raw_response", "prompt_digest",
    }
