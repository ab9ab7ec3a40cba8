"""Dataset ingestion, split rules, and noise augmentation.

Loads image/segment manifests, applies the four rarity-driven split rules
(exclude single-class attributes; mark 5..11-sample classes for augmentation;
mark <=4-sample classes of two-class attributes for augmentation; route
<=4-sample classes of wider attributes to the unseen set), and produces
deterministic noise-augmented training copies.
"""
from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codebook import Codebook
from .errors import (
    DanglingReference,
    EmptyDataset,
    GroundTruthCodeUnknown,
    ManifestParseError,
    UnsupportedPixelFormat,
)

MANIFEST_FIELDS = (
    "image_id",
    "segment_id",
    "order_in_segment",
    "relative_path",
    "latitude",
    "longitude",
    "captured_at",
)
GT_PREFIX = "gt_"
SEGMENTS_FILENAME = "segments.csv"
AUGMENT_MARKER = "__aug_"

NATIVE_WIDTH = 1600
NATIVE_HEIGHT = 1200


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    segment_id: str
    order_in_segment: int
    path: Path
    latitude: float
    longitude: float
    captured_at: datetime | None = None
    # 0 means the file was absent at load time and dimensions are unknown.
    width: int = 0
    height: int = 0


@dataclass(frozen=True)
class SegmentRecord:
    segment_id: str
    image_ids: tuple[str, ...]
    ground_truth: Mapping[str, str]
    aadt: float | None = None
    operating_speed: float | None = None


@dataclass(frozen=True)
class SplitFractions:
    """Train/validation/test shares over non-unseen images; normalised on use."""

    train: float = 0.634
    validation: float = 0.121
    test: float = 0.245

    def normalised(self) -> tuple[float, float, float]:
        total = self.train + self.validation + self.test
        if total <= 0:
            raise ValueError("split fractions must sum to a positive value")
        return (self.train / total, self.validation / total, self.test / total)


@dataclass(frozen=True)
class DatasetSplit:
    train_original: frozenset[str]
    train_augmented: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    unseen: frozenset[str]
    # Images carrying no ground truth at all; kept so the five sets plus this
    # one always partition the input.
    excluded: frozenset[str] = frozenset()
    excluded_attributes: tuple[str, ...] = ()
    augmented_cells: tuple[tuple[str, str], ...] = ()
    provenance_log: tuple[tuple[str, str], ...] = ()

    def assignments(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name in ("train_original", "train_augmented", "validation", "test", "unseen", "excluded"):
            for image_id in getattr(self, name):
                out[image_id] = name
        return out


class NoiseKind(Enum):
    Gaussian = "gaussian"
    SaltPepper = "salt_pepper"
    Speckle = "speckle"
    Periodic = "periodic"
    Quantisation = "quantisation"


@dataclass(frozen=True)
class NoiseParams:
    """Magnitudes for each noise family, on the 0..255 intensity scale."""

    gaussian_sigma: float = 10.0
    salt_pepper_amount: float = 0.02
    speckle_sigma: float = 0.1
    periodic_amplitude: float = 10.0
    periodic_cycles: float = 8.0
    quantisation_levels: int = 16


def _parse_float(text: str, what: str, row: int, low: float, high: float) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestParseError(f"row {row}: {what} {text!r} is not a number") from None
    if not low <= value <= high:
        raise ManifestParseError(f"row {row}: {what} {value} outside [{low}, {high}]")
    return value


def _parse_timestamp(text: str, row: int) -> datetime | None:
    if not text:
        return None
    try:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ManifestParseError(f"row {row}: captured_at {text!r} is not ISO 8601") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def _image_dimensions(path: Path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as handle:
        return handle.width, handle.height


def _first_code(cell: str) -> str:
    # Ground-truth cells may list several codes separated by ';' with the
    # governing (highest-risk) one first; the first token is authoritative.
    return cell.split(";")[0].strip()


def load_dataset(
    manifest: str | Path,
    image_root: str | Path,
    codebook: Codebook,
    *,
    allow_missing_images: bool = False,
) -> tuple[list[ImageRecord], list[SegmentRecord]]:
    """Read a manifest CSV plus optional sibling segments.csv.

    Raises ManifestParseError for malformed rows, DanglingReference for
    missing image files (unless allowed) or unknown segment ids in
    segments.csv, and GroundTruthCodeUnknown for codes outside the codebook.
    """
    manifest = Path(manifest)
    image_root = Path(image_root)
    with manifest.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames
        if header is None:
            raise ManifestParseError(f"{manifest}: missing header row")
        missing = [name for name in MANIFEST_FIELDS if name not in header]
        if missing:
            raise ManifestParseError(f"{manifest}: missing columns {missing}")
        gt_columns = [name for name in header if name.startswith(GT_PREFIX)]
        unknown = [
            name for name in header
            if name not in MANIFEST_FIELDS and not name.startswith(GT_PREFIX)
        ]
        if unknown:
            raise ManifestParseError(f"{manifest}: unrecognised columns {unknown}")
        for name in gt_columns:
            attr_id = name[len(GT_PREFIX):]
            if attr_id not in codebook.ids():
                raise ManifestParseError(
                    f"{manifest}: column {name} names unknown attribute {attr_id!r}"
                )
        rows = list(reader)

    images: list[ImageRecord] = []
    seen_ids: set[str] = set()
    seen_slots: set[tuple[str, int]] = set()
    gt_by_segment: dict[str, dict[str, str]] = {}
    order_by_segment: dict[str, list[tuple[int, str]]] = {}

    for index, row in enumerate(rows, start=2):
        image_id = (row["image_id"] or "").strip()
        segment_id = (row["segment_id"] or "").strip()
        if not image_id or not segment_id:
            raise ManifestParseError(f"row {index}: image_id and segment_id are required")
        if image_id in seen_ids:
            raise ManifestParseError(f"row {index}: duplicate image_id {image_id!r}")
        seen_ids.add(image_id)
        try:
            order = int(row["order_in_segment"])
        except (TypeError, ValueError):
            raise ManifestParseError(
                f"row {index}: order_in_segment {row['order_in_segment']!r} is not an integer"
            ) from None
        if not 1 <= order <= 4:
            raise ManifestParseError(f"row {index}: order_in_segment {order} outside 1..4")
        if (segment_id, order) in seen_slots:
            raise ManifestParseError(
                f"row {index}: segment {segment_id} already has an image at position {order}"
            )
        seen_slots.add((segment_id, order))

        latitude = _parse_float(row["latitude"], "latitude", index, -90.0, 90.0)
        longitude = _parse_float(row["longitude"], "longitude", index, -180.0, 180.0)
        captured_at = _parse_timestamp((row["captured_at"] or "").strip(), index)

        path = image_root / row["relative_path"]
        width = height = 0
        if path.is_file():
            width, height = _image_dimensions(path)
        elif not allow_missing_images:
            raise DanglingReference(f"row {index}: image file {path} does not exist")

        segment_gt = gt_by_segment.setdefault(segment_id, {})
        for name in gt_columns:
            attr_id = name[len(GT_PREFIX):]
            cell = (row.get(name) or "").strip()
            if not cell:
                continue
            attr = codebook[attr_id]
            for token in cell.split(";"):
                token = token.strip()
                if token and token not in attr.codes():
                    raise GroundTruthCodeUnknown(
                        f"row {index}: code {token!r} is not a class of {attr_id}"
                    )
            code = _first_code(cell)
            previous = segment_gt.get(attr_id)
            if previous is not None and previous != code:
                raise ManifestParseError(
                    f"row {index}: segment {segment_id} has conflicting ground truth "
                    f"for {attr_id} ({previous!r} vs {code!r})"
                )
            segment_gt[attr_id] = code

        order_by_segment.setdefault(segment_id, []).append((order, image_id))
        images.append(
            ImageRecord(
                image_id=image_id,
                segment_id=segment_id,
                order_in_segment=order,
                path=path,
                latitude=latitude,
                longitude=longitude,
                captured_at=captured_at,
                width=width,
                height=height,
            )
        )

    extras = _load_segment_extras(manifest.parent / SEGMENTS_FILENAME, set(order_by_segment))
    segments = [
        SegmentRecord(
            segment_id=segment_id,
            image_ids=tuple(image_id for _, image_id in sorted(slots)),
            ground_truth=dict(gt_by_segment[segment_id]),
            aadt=extras.get(segment_id, (None, None))[0],
            operating_speed=extras.get(segment_id, (None, None))[1],
        )
        for segment_id, slots in sorted(order_by_segment.items())
    ]
    return images, segments


def _load_segment_extras(
    path: Path, known_segments: set[str]
) -> dict[str, tuple[float | None, float | None]]:
    if not path.is_file():
        return {}
    extras: dict[str, tuple[float | None, float | None]] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        required = {"segment_id", "aadt", "operating_speed"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ManifestParseError(f"{path}: expected columns {sorted(required)}")
        for index, row in enumerate(reader, start=2):
            segment_id = (row["segment_id"] or "").strip()
            if segment_id not in known_segments:
                raise DanglingReference(
                    f"{path} row {index}: segment {segment_id!r} not in manifest"
                )
            aadt = float(row["aadt"]) if (row["aadt"] or "").strip() else None
            speed = float(row["operating_speed"]) if (row["operating_speed"] or "").strip() else None
            extras[segment_id] = (aadt, speed)
    return extras


def augmented_image_id(image_id: str, kind: NoiseKind) -> str:
    return f"{image_id}{AUGMENT_MARKER}{kind.value}"


def source_image_id(augmented_id: str) -> tuple[str, NoiseKind]:
    base, _, suffix = augmented_id.rpartition(AUGMENT_MARKER)
    if not base:
        raise ValueError(f"{augmented_id!r} is not an augmented image id")
    return base, NoiseKind(suffix)


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    counts = [int(x) for x in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_dataset(
    segments: Sequence[SegmentRecord],
    codebook: Codebook,
    seed: int,
    *,
    fractions: SplitFractions = SplitFractions(),
    noise_kinds: Sequence[NoiseKind] = tuple(NoiseKind),
) -> DatasetSplit:
    """Apply the four split rules, then stratify the remainder under `seed`.

    Rule order is fixed; unseen routing wins over augmentation marks when
    both touch the same image. Stratification walks attributes alphabetically
    and classes by code, so earlier attributes pin contested images.
    """
    if not segments:
        raise EmptyDataset("no segments to split")

    image_to_segment: dict[str, SegmentRecord] = {}
    for segment in segments:
        for image_id in segment.image_ids:
            image_to_segment[image_id] = segment

    all_images = sorted(image_to_segment)
    excluded = frozenset(
        image_id for image_id in all_images if not image_to_segment[image_id].ground_truth
    )
    log: list[tuple[str, str]] = [
        (image_id, "excluded: segment carries no ground truth") for image_id in sorted(excluded)
    ]

    counts: dict[str, dict[str, int]] = {}
    members: dict[tuple[str, str], list[str]] = {}
    for image_id in all_images:
        if image_id in excluded:
            continue
        for attr_id, code in image_to_segment[image_id].ground_truth.items():
            counts.setdefault(attr_id, {})
            counts[attr_id][code] = counts[attr_id].get(code, 0) + 1
            members.setdefault((attr_id, code), []).append(image_id)

    excluded_attributes: list[str] = []
    for attr_id in sorted(counts):
        observed = counts[attr_id]
        if codebook[attr_id].single_class or len(observed) <= 1:
            excluded_attributes.append(attr_id)

    augment_cells: list[tuple[str, str]] = []
    unseen_ids: set[str] = set()
    for attr_id in sorted(counts):
        if attr_id in excluded_attributes:
            continue
        observed = counts[attr_id]
        for code in sorted(observed):
            n = observed[code]
            if 5 <= n <= 11:
                augment_cells.append((attr_id, code))
            elif n <= 4:
                if len(observed) == 2:
                    augment_cells.append((attr_id, code))
                else:
                    for image_id in members[(attr_id, code)]:
                        if image_id not in unseen_ids:
                            unseen_ids.add(image_id)
                            log.append(
                                (image_id, f"rule 4: {attr_id}={code} has {n} samples")
                            )

    remaining = [i for i in all_images if i not in excluded and i not in unseen_ids]
    shares = fractions.normalised()
    assigned: dict[str, str] = {}
    for attr_id in sorted(counts):
        if attr_id in excluded_attributes:
            continue
        for code in sorted(counts[attr_id]):
            pool = [
                i for i in members[(attr_id, code)]
                if i not in assigned and i not in unseen_ids and i not in excluded
            ]
            if not pool:
                continue
            rng = random.Random(f"{seed}:{attr_id}:{code}")
            rng.shuffle(pool)
            n_train, n_val, _ = _largest_remainder(len(pool), shares)
            for position, image_id in enumerate(pool):
                if position < n_train:
                    assigned[image_id] = "train"
                elif position < n_train + n_val:
                    assigned[image_id] = "validation"
                else:
                    assigned[image_id] = "test"

    leftovers = [i for i in remaining if i not in assigned]
    if leftovers:
        rng = random.Random(f"{seed}:leftovers")
        rng.shuffle(leftovers)
        n_train, n_val, _ = _largest_remainder(len(leftovers), shares)
        for position, image_id in enumerate(leftovers):
            if position < n_train:
                assigned[image_id] = "train"
            elif position < n_train + n_val:
                assigned[image_id] = "validation"
            else:
                assigned[image_id] = "test"

    train = sorted(i for i, bucket in assigned.items() if bucket == "train")
    validation = frozenset(i for i, bucket in assigned.items() if bucket == "validation")
    test = frozenset(i for i, bucket in assigned.items() if bucket == "test")

    marked: dict[str, tuple[str, str, int]] = {}
    for attr_id, code in augment_cells:
        for image_id in members[(attr_id, code)]:
            if image_id in assigned and assigned[image_id] == "train":
                marked.setdefault(image_id, (attr_id, code, counts[attr_id][code]))
    augmented: list[str] = []
    for image_id in sorted(marked):
        attr_id, code, n = marked[image_id]
        rule = "rule 2" if n >= 5 else "rule 3"
        log.append((image_id, f"{rule}: {attr_id}={code} has {n} samples; copies added"))
        for kind in noise_kinds:
            augmented.append(augmented_image_id(image_id, kind))

    return DatasetSplit(
        train_original=frozenset(train),
        train_augmented=frozenset(augmented),
        validation=validation,
        test=test,
        unseen=frozenset(unseen_ids),
        excluded=excluded,
        excluded_attributes=tuple(excluded_attributes),
        augmented_cells=tuple(sorted(set(augment_cells))),
        provenance_log=tuple(sorted(log)),
    )


def write_split(
    split: DatasetSplit,
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    payload = {
        "train_original": sorted(split.train_original),
        "train_augmented": sorted(split.train_augmented),
        "validation": sorted(split.validation),
        "test": sorted(split.test),
        "unseen": sorted(split.unseen),
        "excluded": sorted(split.excluded),
        "excluded_attributes": list(split.excluded_attributes),
        "augmented_cells": [list(cell) for cell in split.augmented_cells],
        "provenance_log": [list(entry) for entry in split.provenance_log],
    }
    if run_manifest is not None:
        payload["run_manifest"] = dict(run_manifest)
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_split(path: str | Path) -> DatasetSplit:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetSplit(
        train_original=frozenset(payload["train_original"]),
        train_augmented=frozenset(payload["train_augmented"]),
        validation=frozenset(payload["validation"]),
        test=frozenset(payload["test"]),
        unseen=frozenset(payload["unseen"]),
        excluded=frozenset(payload.get("excluded", [])),
        excluded_attributes=tuple(payload.get("excluded_attributes", [])),
        augmented_cells=tuple(
            (attr, code) for attr, code in payload.get("augmented_cells", [])
        ),
        provenance_log=tuple(
            (image_id, note) for image_id, note in payload.get("provenance_log", [])
        ),
    )


def _require_pixels(image: np.ndarray) -> None:
    if not isinstance(image, np.ndarray) or image.dtype != np.uint8:
        raise UnsupportedPixelFormat("expected a uint8 array")
    if image.ndim == 2:
        ok = image.size > 0
    elif image.ndim == 3:
        ok = image.size > 0 and image.shape[2] in (1, 3, 4)
    else:
        ok = False
    if not ok:
        raise UnsupportedPixelFormat(f"unsupported shape {getattr(image, 'shape', None)}")


def augment_image(
    image: np.ndarray,
    kind: NoiseKind,
    seed: int,
    params: NoiseParams = NoiseParams(),
) -> np.ndarray:
    """Return a noised copy with identical shape and dtype, stable under seed."""
    _require_pixels(image)
    rng = np.random.default_rng(seed)
    pixels = image.astype(np.float64)

    if kind is NoiseKind.Gaussian:
        pixels = pixels + rng.normal(0.0, params.gaussian_sigma, size=pixels.shape)
    elif kind is NoiseKind.SaltPepper:
        flips = rng.random(pixels.shape[:2])
        half = params.salt_pepper_amount / 2.0
        salt = flips < half
        pepper = flips >= 1.0 - half
        if pixels.ndim == 3:
            salt = salt[..., None]
            pepper = pepper[..., None]
        pixels = np.where(salt, 255.0, np.where(pepper, 0.0, pixels))
    elif kind is NoiseKind.Speckle:
        pixels = pixels * (1.0 + rng.normal(0.0, params.speckle_sigma, size=pixels.shape))
    elif kind is NoiseKind.Periodic:
        rows = np.arange(pixels.shape[0], dtype=np.float64)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = params.periodic_amplitude * np.sin(
            2.0 * np.pi * params.periodic_cycles * rows / max(pixels.shape[0], 1) + phase
        )
        shape = (-1,) + (1,) * (pixels.ndim - 1)
        pixels = pixels + wave.reshape(shape)
    elif kind is NoiseKind.Quantisation:
        levels = max(int(params.quantisation_levels), 2)
        step = 255.0 / (levels - 1)
        pixels = np.round(pixels / step) * step
    else:
        raise UnsupportedPixelFormat(f"unknown noise kind {kind!r}")

    return np.clip(np.round(pixels), 0, 255).astype(np.uint8)
