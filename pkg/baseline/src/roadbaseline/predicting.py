"""Inference and export in the pipeline's predictions JSONL format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import CheckpointMismatch, FormatError
from .formats import CodebookInfo, ManifestRow, PredictionRow, write_predictions
from .model import Backbone, MultiHeadModelSpec, MultiHeadNet, build_model
from .training import _load_pixels


@dataclass(frozen=True)
class LoadedCheckpoint:
    model: MultiHeadNet
    backbone_tag: str
    codebook_version: str
    input_size: int
    # Per head, class codes in head-output order.
    classes: Mapping[str, tuple[str, ...]]


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    try:
        spec = MultiHeadModelSpec(
            backbone=Backbone(payload["backbone"]),
            heads=dict(payload["heads"]),
            input_size=payload["input_size"],
            learning_rate=payload["learning_rate"],
            epochs=payload["epochs"],
            batch_size=payload["batch_size"],
        )
        model = build_model(spec)
        model.load_state_dict(payload["state_dict"])
        classes = {a: tuple(codes) for a, codes in payload["classes"].items()}
        version = payload["codebook_version"]
    except (KeyError, ValueError) as error:
        raise FormatError(f"{path}: unusable checkpoint: {error}") from None
    model.eval()
    return LoadedCheckpoint(
        model=model,
        backbone_tag=spec.backbone.value,
        codebook_version=version,
        input_size=spec.input_size,
        classes=classes,
    )


def predict(
    checkpoint: LoadedCheckpoint,
    manifest: Sequence[ManifestRow],
    codebook: CodebookInfo,
    *,
    image_root: str | Path,
    image_ids: Sequence[str] | None = None,
) -> list[PredictionRow]:
    """Run every selected manifest image through the model, one row each."""
    if checkpoint.codebook_version != codebook.version:
        raise CheckpointMismatch(
            f"checkpoint was trained against codebook "
            f"{checkpoint.codebook_version!r}, not {codebook.version!r}"
        )
    image_root = Path(image_root)
    rows = {row.image_id: row for row in manifest}
    if image_ids is None:
        selected = sorted(rows)
    else:
        unknown = sorted(set(image_ids) - set(rows))
        if unknown:
            raise FormatError(f"image ids absent from the manifest: {unknown}")
        selected = sorted(set(image_ids))

    digest = hashlib.sha256(
        f"{checkpoint.backbone_tag}:{checkpoint.codebook_version}".encode()
    ).hexdigest()
    out: list[PredictionRow] = []
    for image_id in selected:
        row = rows[image_id]
        pixels = torch.from_numpy(
            np.expand_dims(
                _load_pixels(image_root / row.relative_path, checkpoint.input_size), 0
            )
        )
        with torch.no_grad():
            outputs = checkpoint.model(pixels)
        predictions = {
            attr_id: checkpoint.classes[attr_id][int(logits.argmax())]
            for attr_id, logits in outputs.items()
        }
        out.append(
            PredictionRow(
                image_id=image_id,
                model=checkpoint.backbone_tag,
                predictions=predictions,
                raw_response=json.dumps(predictions, sort_keys=True),
                prompt_digest=digest,
            )
        )
    return out


def export_predictions(
    rows: Sequence[PredictionRow],
    path: str | Path,
    checkpoint: LoadedCheckpoint,
    codebook: CodebookInfo,
) -> None:
    """Write rows with a header naming the model and the untrained attributes."""
    excluded = sorted(set(codebook.classes) - set(checkpoint.classes))
    write_predictions(
        rows,
        path,
        header={
            "model": checkpoint.backbone_tag,
            "codebook": checkpoint.codebook_version,
            "excluded_attributes": excluded,
        },
    )
