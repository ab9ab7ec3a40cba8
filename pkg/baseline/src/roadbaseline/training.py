"""Training loop for the multi-head baseline.

One cross-entropy loss per head, summed with equal weights; Adam on the
whole network. Runs single threaded on purpose so a fixed seed reproduces
the loss trajectory exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import EmptySplit, LabelMissing, OutOfMemory
from .formats import (
    AUGMENT_MARKER,
    CodebookInfo,
    ManifestRow,
    SplitBuckets,
    source_image_id,
)
from .model import MultiHeadModelSpec, build_model

log = logging.getLogger("roadbaseline.training")

CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "training_log.jsonl"


@dataclass(frozen=True)
class Examples:
    """A bucket of images as one tensor plus per-head label index tensors."""

    image_ids: tuple[str, ...]
    pixels: torch.Tensor
    labels: Mapping[str, torch.Tensor]

    def __len__(self) -> int:
        return len(self.image_ids)


def _load_pixels(path: Path, input_size: int) -> np.ndarray:
    with Image.open(path) as image:
        resized = image.convert("RGB").resize((input_size, input_size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32).transpose(2, 0, 1) / 255.0


def _resolve(image_id: str, rows: Mapping[str, ManifestRow], image_root: Path,
             augmented_root: Path | None) -> tuple[Path, ManifestRow] | None:
    if AUGMENT_MARKER in image_id:
        if augmented_root is None:
            return None
        source = rows.get(source_image_id(image_id))
        if source is None:
            raise LabelMissing(f"augmented image {image_id} has no source row")
        path = augmented_root / f"{image_id}.png"
        if not path.is_file():
            raise FileNotFoundError(f"augmented image file missing: {path}")
        return path, source
    row = rows.get(image_id)
    if row is None:
        raise LabelMissing(f"split references {image_id} absent from the manifest")
    return image_root / row.relative_path, row


def build_examples(
    image_ids: Sequence[str],
    manifest: Sequence[ManifestRow],
    codebook: CodebookInfo,
    spec: MultiHeadModelSpec,
    image_root: str | Path,
    *,
    augmented_root: str | Path | None = None,
) -> Examples:
    """Load a bucket into tensors. Augmented ids label from their source row;
    they are skipped entirely when no augmented_root is given."""
    rows = {row.image_id: row for row in manifest}
    image_root = Path(image_root)
    augmented_root = Path(augmented_root) if augmented_root is not None else None
    code_index = {
        attr_id: {code: i for i, code in enumerate(codebook.classes[attr_id])}
        for attr_id in spec.heads
    }

    kept: list[str] = []
    pixel_stack: list[np.ndarray] = []
    label_lists: dict[str, list[int]] = {attr_id: [] for attr_id in spec.heads}
    for image_id in sorted(image_ids):
        resolved = _resolve(image_id, rows, image_root, augmented_root)
        if resolved is None:
            continue
        path, row = resolved
        for attr_id in spec.heads:
            code = row.ground_truth.get(attr_id)
            if code is None:
                raise LabelMissing(f"{row.image_id}: no ground truth for {attr_id}")
            if code not in code_index[attr_id]:
                raise LabelMissing(
                    f"{row.image_id}: ground truth {code!r} is not a class of {attr_id}"
                )
            label_lists[attr_id].append(code_index[attr_id][code])
        pixel_stack.append(_load_pixels(path, spec.input_size))
        kept.append(image_id)

    if not kept:
        raise EmptySplit("bucket resolves to zero usable images")
    return Examples(
        image_ids=tuple(kept),
        pixels=torch.from_numpy(np.stack(pixel_stack)),
        labels={
            attr_id: torch.tensor(values, dtype=torch.long)
            for attr_id, values in label_lists.items()
        },
    )


def _head_losses(
    outputs: Mapping[str, torch.Tensor],
    labels: Mapping[str, torch.Tensor],
    criterion: nn.Module,
) -> dict[str, torch.Tensor]:
    return {attr_id: criterion(outputs[attr_id], labels[attr_id]) for attr_id in labels}


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    # One entry per epoch: {"epoch": n, "train": {head: loss}, "val": {head: loss}}.
    history: tuple[dict, ...]


def train(
    spec: MultiHeadModelSpec,
    split: SplitBuckets,
    manifest: Sequence[ManifestRow],
    codebook: CodebookInfo,
    *,
    image_root: str | Path,
    augmented_root: str | Path | None = None,
    out_dir: str | Path,
    seed: int = 0,
) -> TrainResult:
    """Fit the model on train_original (+ augmented copies when available),
    validating each epoch; save the checkpoint and a JSONL loss log."""
    spec.validate_against(codebook)
    train_ids = sorted(split.train_original | split.train_augmented)
    train_set = build_examples(
        train_ids, manifest, codebook, spec, image_root, augmented_root=augmented_root
    )
    if not split.validation:
        raise EmptySplit("validation bucket is empty")
    val_set = build_examples(
        sorted(split.validation), manifest, codebook, spec, image_root
    )

    # Thread count pinned so summed conv reductions are order-stable and a
    # fixed seed reproduces losses exactly.
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    model = build_model(spec)
    optimiser = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    criterion = nn.CrossEntropyLoss()
    shuffler = torch.Generator().manual_seed(seed)

    history: list[dict] = []
    try:
        for epoch in range(1, spec.epochs + 1):
            model.train()
            order = torch.randperm(len(train_set), generator=shuffler)
            sums = {attr_id: 0.0 for attr_id in spec.heads}
            batches = 0
            for start in range(0, len(order), spec.batch_size):
                batch = order[start : start + spec.batch_size]
                outputs = model(train_set.pixels[batch])
                labels = {a: t[batch] for a, t in train_set.labels.items()}
                losses = _head_losses(outputs, labels, criterion)
                optimiser.zero_grad()
                sum(losses.values()).backward()
                optimiser.step()
                for attr_id, value in losses.items():
                    sums[attr_id] += float(value.detach())
                batches += 1
            model.eval()
            with torch.no_grad():
                val_losses = _head_losses(
                    model(val_set.pixels), val_set.labels, criterion
                )
            entry = {
                "epoch": epoch,
                "train": {a: sums[a] / batches for a in sorted(sums)},
                "val": {a: float(v) for a, v in sorted(val_losses.items())},
            }
            history.append(entry)
            log.info(
                "epoch %d: train %.4f, val %.4f",
                epoch,
                sum(entry["train"].values()),
                sum(entry["val"].values()),
            )
    except RuntimeError as error:
        if "out of memory" in str(error).lower():
            raise OutOfMemory(
                f"device memory exhausted; lower batch_size (now "
                f"{spec.batch_size}) or input_size (now {spec.input_size})"
            ) from error
        raise

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / CHECKPOINT_NAME
    torch.save(
        {
            "state_dict": model.state_dict(),
            "backbone": spec.backbone.value,
            "heads": dict(spec.heads),
            "input_size": spec.input_size,
            "learning_rate": spec.learning_rate,
            "epochs": spec.epochs,
            "batch_size": spec.batch_size,
            "codebook_version": codebook.version,
            "classes": {a: list(codebook.classes[a]) for a in spec.heads},
            "seed": seed,
        },
        checkpoint_path,
    )
    log_path = out_dir / LOG_NAME
    log_path.write_text(
        "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in history),
        encoding="utf-8",
    )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        history=tuple(history),
    )


def head_accuracies(model: nn.Module, examples: Examples) -> dict[str, float]:
    """Fraction of examples each head classifies correctly."""
    model.eval()
    with torch.no_grad():
        outputs = model(examples.pixels)
    return {
        attr_id: float((logits.argmax(dim=1) == examples.labels[attr_id]).float().mean())
        for attr_id, logits in outputs.items()
    }
