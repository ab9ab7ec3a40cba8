"""Shared fixture builders: tiny colour-coded datasets the models can memorise.

Each image's pixels encode its labels (one colour channel per attribute),
so a few epochs of training separate the classes and overfit runs are
quick and certain.
"""
from __future__ import annotations

import json
from pathlib import Path

from PIL import Image

ATTRS = {"lighting": 2, "surface": 3}


def codebook_payload(
    attrs: dict[str, int] = ATTRS,
    version: str = "fixture-1",
    single_class_attr: str | None = None,
) -> dict:
    attributes = [
        {
            "id": attr_id,
            "display_name": attr_id.replace("_", " ").title(),
            "group": "Mid-block",
            "description": f"Synthetic {attr_id} attribute for trainer tests.",
            "classes": [
                {
                    "code": str(i + 1),
                    "label": f"{attr_id} state {i + 1}",
                    "description": f"{attr_id} in state {i + 1}.",
                    "risk_rank": i,
                }
                for i in range(count)
            ],
        }
        for attr_id, count in attrs.items()
    ]
    if single_class_attr:
        attributes.append(
            {
                "id": single_class_attr,
                "display_name": single_class_attr.title(),
                "group": "Mid-block",
                "description": "Constant across the network; untrainable.",
                "single_class": True,
                "classes": [
                    {
                        "code": "1",
                        "label": "only state",
                        "description": "The sole defined state.",
                        "risk_rank": 0,
                    }
                ],
            }
        )
    return {
        "version": version,
        "attribute_count": len(attributes),
        "attributes": attributes,
    }


def write_codebook(path: Path, **kwargs) -> Path:
    path.write_text(json.dumps(codebook_payload(**kwargs), indent=2), encoding="utf-8")
    return path


def label_colour(lighting: str, surface: str) -> tuple[int, int, int]:
    return (40 + 90 * int(lighting), 30 + 70 * int(surface), 60)


def build_workspace(root: Path, rows: list[tuple[str, str, str, str]]) -> Path:
    """Write images plus a manifest. Rows are (image_id, segment_id,
    lighting_code, surface_code); order within a segment follows row order."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [
        "image_id,segment_id,order_in_segment,relative_path,latitude,longitude,"
        "captured_at,gt_lighting,gt_surface"
    ]
    order: dict[str, int] = {}
    for image_id, segment_id, lighting, surface in rows:
        order[segment_id] = order.get(segment_id, 0) + 1
        Image.new("RGB", (32, 32), color=label_colour(lighting, surface)).save(
            root / "images" / f"{image_id}.png"
        )
        lines.append(
            f"{image_id},{segment_id},{order[segment_id]},images/{image_id}.png,"
            f"13.75,100.50,2023-03-01T08:00:00+00:00,{lighting},{surface}"
        )
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def write_split_file(
    path: Path,
    *,
    train: list[str],
    validation: list[str],
    test: list[str] | None = None,
    unseen: list[str] | None = None,
    train_augmented: list[str] | None = None,
    excluded_attributes: list[str] | None = None,
) -> Path:
    payload = {
        "train_original": sorted(train),
        "train_augmented": sorted(train_augmented or []),
        "validation": sorted(validation),
        "test": sorted(test or []),
        "unseen": sorted(unseen or []),
        "excluded": [],
        "excluded_attributes": list(excluded_attributes or []),
        "augmented_cells": [],
        "provenance_log": [],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
