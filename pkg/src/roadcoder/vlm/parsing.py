"""Turn raw model text into validated per-attribute predictions.

The parser is total: any input, however mangled, maps every codebook
attribute to either a prediction or an invalid entry with a reason. It never
invents codes; everything it emits exists in the codebook.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from ..codebook import Codebook

log = logging.getLogger("roadcoder.vlm")


class InvalidReason(Enum):
    # JSON parsed but the attribute key is absent.
    Missing = "Missing"
    # Key present but the value is no known code (or label) of the attribute.
    UnknownCode = "UnknownCode"
    # No JSON object found, or the value is structurally unusable.
    Unparseable = "Unparseable"


@dataclass(frozen=True)
class InvalidAttribute:
    attribute_id: str
    reason: InvalidReason


@dataclass(frozen=True)
class ParsedPredictions:
    image_id: str
    model: str
    predictions: Mapping[str, str]
    invalid_attributes: tuple[InvalidAttribute, ...]
    raw_response: str
    prompt_digest: str

    def coverage(self) -> float:
        total = len(self.predictions) + len(self.invalid_attributes)
        return len(self.predictions) / total if total else 0.0

    def validate_against(self, codebook: Codebook) -> None:
        """Assert the partition invariant: every attribute appears exactly once."""
        predicted = set(self.predictions)
        invalid = {entry.attribute_id for entry in self.invalid_attributes}
        expected = set(codebook.ids())
        if predicted & invalid or predicted | invalid != expected:
            raise ValueError(
                f"{self.image_id}: predictions and invalid entries do not "
                f"partition the codebook attributes"
            )
        for attr_id, code in self.predictions.items():
            codebook[attr_id].class_by_code(code)


def _normalise(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip()).lower()


def _first_json_object(raw: str) -> dict | None:
    decoder = json.JSONDecoder()
    for start in range(len(raw)):
        if raw[start] != "{":
            continue
        try:
            value, _ = decoder.raw_decode(raw, start)
        except ValueError:
            continue
        if isinstance(value, dict):
            return value
    return None


def parse_response(
    raw: str,
    codebook: Codebook,
    *,
    salvage_labels: bool = True,
) -> tuple[dict[str, str], list[InvalidAttribute]]:
    """Extract the first JSON object and validate it attribute by attribute.

    Keys are matched to attribute ids case-insensitively after whitespace
    normalisation. A value matching a class *label* rather than a code is
    mapped back to the code when `salvage_labels` is on; every salvage is
    logged. The return pair partitions the codebook's attributes.
    """
    body = _first_json_object(raw)
    if body is None:
        return {}, [
            InvalidAttribute(attr.id, InvalidReason.Unparseable) for attr in codebook
        ]

    by_normalised_key: dict[str, object] = {}
    for key, value in body.items():
        if isinstance(key, str):
            by_normalised_key[_normalise(key)] = value

    predictions: dict[str, str] = {}
    invalid: list[InvalidAttribute] = []
    for attr in codebook:
        lookup = _normalise(attr.id)
        if lookup not in by_normalised_key:
            invalid.append(InvalidAttribute(attr.id, InvalidReason.Missing))
            continue
        value = by_normalised_key[lookup]
        if isinstance(value, bool) or value is None or isinstance(value, (list, dict)):
            invalid.append(InvalidAttribute(attr.id, InvalidReason.Unparseable))
            continue
        if isinstance(value, float) and not value.is_integer():
            invalid.append(InvalidAttribute(attr.id, InvalidReason.UnknownCode))
            continue
        text = str(int(value)) if isinstance(value, (int, float)) else str(value).strip()
        if text in attr.codes():
            predictions[attr.id] = text
            continue
        if salvage_labels:
            wanted = _normalise(text)
            matches = [cls for cls in attr.classes if _normalise(cls.label) == wanted]
            if len(matches) == 1:
                log.info(
                    "salvaged label %r as code %s for %s", text, matches[0].code, attr.id
                )
                predictions[attr.id] = matches[0].code
                continue
        invalid.append(InvalidAttribute(attr.id, InvalidReason.UnknownCode))
    return predictions, invalid


def write_predictions_jsonl(
    items: Iterable[ParsedPredictions],
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    """One ParsedPredictions per line; key order fixed for byte-stable output.

    An optional run manifest becomes a header line that readers skip.
    """
    with Path(path).open("w", encoding="utf-8") as handle:
        if run_manifest is not None:
            handle.write(
                json.dumps({"run_manifest": dict(run_manifest)}, sort_keys=True) + "\n"
            )
        for item in items:
            handle.write(json.dumps(_to_payload(item), sort_keys=True) + "\n")


def read_predictions_jsonl(path: str | Path) -> list[ParsedPredictions]:
    items = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            # Provenance headers travel in-band as a run_manifest object.
            if "run_manifest" in payload:
                continue
            items.append(_from_payload(payload))
    return items


def _to_payload(item: ParsedPredictions) -> dict:
    return {
        "image_id": item.image_id,
        "model": item.model,
        "predictions": dict(sorted(item.predictions.items())),
        "invalid_attributes": [
            [entry.attribute_id, entry.reason.value]
            for entry in sorted(item.invalid_attributes, key=lambda e: e.attribute_id)
        ],
        "raw_response": item.raw_response,
        "prompt_digest": item.prompt_digest,
    }


def _from_payload(payload: Mapping) -> ParsedPredictions:
    return ParsedPredictions(
        image_id=payload["image_id"],
        model=payload["model"],
        predictions=dict(payload["predictions"]),
        invalid_attributes=tuple(
            InvalidAttribute(attr_id, InvalidReason(reason))
            for attr_id, reason in payload["invalid_attributes"]
        ),
        raw_response=payload["raw_response"],
        prompt_digest=payload["prompt_digest"],
    )
