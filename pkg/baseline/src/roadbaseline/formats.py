"""Readers and writers for the pipeline's interchange files.

The trainer talks to the coding pipeline only through files: the dataset
manifest (CSV), the split assignment (JSON), the codebook (JSON), and the
predictions export (JSONL). Schemas here mirror those files exactly; no
code is shared with the pipeline package.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import FormatError

AUGMENT_MARKER = "__aug_"
GT_PREFIX = "gt_"
_BASE_COLUMNS = ("image_id", "segment_id", "order_in_segment", "relative_path")


@dataclass(frozen=True)
class ManifestRow:
    image_id: str
    segment_id: str
    order_in_segment: int
    relative_path: str
    ground_truth: Mapping[str, str] = field(default_factory=dict)


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        columns = reader.fieldnames or []
        missing = [c for c in _BASE_COLUMNS if c not in columns]
        if missing:
            raise FormatError(f"{path}: manifest lacks columns {missing}")
        gt_columns = [c for c in columns if c.startswith(GT_PREFIX)]
        rows: list[ManifestRow] = []
        seen: set[str] = set()
        for index, record in enumerate(reader, start=2):
            image_id = (record.get("image_id") or "").strip()
            if not image_id:
                raise FormatError(f"{path}: row {index} has no image_id")
            if image_id in seen:
                raise FormatError(f"{path}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            try:
                order = int(record["order_in_segment"])
            except (TypeError, ValueError):
                raise FormatError(
                    f"{path}: row {index} has a non-integer order_in_segment"
                ) from None
            ground_truth = {
                column[len(GT_PREFIX):]: record[column].strip()
                for column in gt_columns
                if (record.get(column) or "").strip()
            }
            rows.append(
                ManifestRow(
                    image_id=image_id,
                    segment_id=record["segment_id"].strip(),
                    order_in_segment=order,
                    relative_path=record["relative_path"].strip(),
                    ground_truth=ground_truth,
                )
            )
    if not rows:
        raise FormatError(f"{path}: manifest holds no images")
    return rows


@dataclass(frozen=True)
class SplitBuckets:
    train_original: frozenset[str]
    train_augmented: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    unseen: frozenset[str]
    excluded_attributes: tuple[str, ...] = ()


def read_split(path: str | Path) -> SplitBuckets:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise FormatError(f"{path}: split file is not valid JSON: {error}") from None
    try:
        return SplitBuckets(
            train_original=frozenset(payload["train_original"]),
            train_augmented=frozenset(payload["train_augmented"]),
            validation=frozenset(payload["validation"]),
            test=frozenset(payload["test"]),
            unseen=frozenset(payload["unseen"]),
            excluded_attributes=tuple(payload.get("excluded_attributes", [])),
        )
    except KeyError as error:
        raise FormatError(f"{path}: split file lacks bucket {error}") from None


def source_image_id(augmented_id: str) -> str:
    base, _, _ = augmented_id.rpartition(AUGMENT_MARKER)
    if not base:
        raise FormatError(f"{augmented_id!r} is not an augmented image id")
    return base


@dataclass(frozen=True)
class CodebookInfo:
    version: str
    # Attribute id to its class codes, in codebook order.
    classes: Mapping[str, tuple[str, ...]]

    def single_class(self, attribute_id: str) -> bool:
        return len(self.classes[attribute_id]) == 1


def read_codebook(path: str | Path) -> CodebookInfo:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise FormatError(f"{path}: codebook is not valid JSON: {error}") from None
    version = payload.get("version")
    attributes = payload.get("attributes")
    if not isinstance(version, str) or not isinstance(attributes, list):
        raise FormatError(f"{path}: codebook lacks version or attributes")
    classes: dict[str, tuple[str, ...]] = {}
    for attribute in attributes:
        attr_id = attribute.get("id")
        codes = tuple(entry.get("code") for entry in attribute.get("classes", []))
        if not attr_id or not codes or any(not isinstance(c, str) for c in codes):
            raise FormatError(f"{path}: attribute {attr_id!r} has unusable classes")
        if attr_id in classes:
            raise FormatError(f"{path}: duplicate attribute id {attr_id!r}")
        classes[attr_id] = codes
    if not classes:
        raise FormatError(f"{path}: codebook defines no attributes")
    return CodebookInfo(version=version, classes=classes)


@dataclass(frozen=True)
class PredictionRow:
    image_id: str
    model: str
    predictions: Mapping[str, str]
    raw_response: str
    prompt_digest: str


def write_predictions(
    rows: Sequence[PredictionRow],
    path: str | Path,
    header: Mapping[str, object],
) -> None:
    """Write the pipeline's predictions JSONL: header line, then one row per image."""
    lines = [json.dumps({"run_manifest": dict(header)}, sort_keys=True)]
    for row in sorted(rows, key=lambda r: r.image_id):
        lines.append(
            json.dumps(
                {
                    "image_id": row.image_id,
                    "model": row.model,
                    "predictions": dict(sorted(row.predictions.items())),
                    "invalid_attributes": [],
                    "raw_response": row.raw_response,
                    "prompt_digest": row.prompt_digest,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
