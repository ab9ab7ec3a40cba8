"""Segment aggregation and reference star-rating estimation.

Aggregation promotes each attribute to the highest-risk class predicted on
any image of the segment. The star model here is a deliberately simple,
configuration-driven substitute for the proprietary rating equation: a
weighted sum of per-class risk factors scaled by an operating-speed band,
thresholded onto 1..5 stars. Swap the configuration file to change it.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .codebook import Codebook
from .dataset import SegmentRecord
from .errors import (
    InvalidConfiguration,
    LengthMismatch,
    MissingAttribute,
    SegmentImageMismatch,
)
from .vlm.parsing import ParsedPredictions

log = logging.getLogger("roadcoder.assessment")

STAR_LEVELS = (1, 2, 3, 4, 5)
HIGH_RISK_BELOW = 3


class RoadUser(Enum):
    VehicleOccupant = "VehicleOccupant"
    Motorcyclist = "Motorcyclist"
    Pedestrian = "Pedestrian"
    Bicyclist = "Bicyclist"


@dataclass(frozen=True)
class RoadPrediction:
    segment_id: str
    aggregated: Mapping[str, str]
    contributing: Mapping[str, str]
    n_images: int
    # Attributes invalid in every image; surfaced in run reports.
    unresolved: tuple[str, ...] = ()


@dataclass(frozen=True)
class StarRatingInput:
    road: RoadPrediction
    aadt: float
    operating_speed: float
    road_user: RoadUser

    def __post_init__(self) -> None:
        if self.aadt < 0:
            raise InvalidConfiguration("aadt must be >= 0")
        if self.operating_speed <= 0:
            raise InvalidConfiguration("operating_speed must be > 0")


@dataclass(frozen=True)
class StarRating:
    stars: int
    score: float
    model_version: str
    # Attributes whose safest class was imputed because every image left
    # them unresolved; never silent, always logged.
    substitutions: tuple[str, ...] = ()


@dataclass(frozen=True)
class SpeedBand:
    max_kmh: float
    multiplier: float


@dataclass(frozen=True)
class ScoringConfig:
    road_user: RoadUser
    weights: Mapping[str, float]
    risk_factors: Mapping[str, Mapping[str, float]]
    speed_bands: tuple[SpeedBand, ...]
    star_thresholds: tuple[float, float, float, float]
    version: str

    def speed_multiplier(self, operating_speed: float) -> float:
        for band in self.speed_bands:
            if operating_speed <= band.max_kmh:
                return band.multiplier
        # Speeds beyond the last band saturate at its multiplier.
        return self.speed_bands[-1].multiplier


_CONFIG_KEYS = {"road_user", "weights", "risk_factors", "speed_bands", "star_thresholds"}


def parse_scoring_config(raw: Mapping, source: str = "<config>") -> ScoringConfig:
    if not isinstance(raw, Mapping):
        raise InvalidConfiguration(f"{source}: expected a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InvalidConfiguration(f"{source}: unknown keys {sorted(unknown)}")
    missing = _CONFIG_KEYS - set(raw)
    if missing:
        raise InvalidConfiguration(f"{source}: missing keys {sorted(missing)}")

    try:
        road_user = RoadUser(raw["road_user"])
    except ValueError:
        raise InvalidConfiguration(
            f"{source}: road_user {raw['road_user']!r} not one of "
            f"{[u.value for u in RoadUser]}"
        ) from None

    weights = raw["weights"]
    factors = raw["risk_factors"]
    if not isinstance(weights, Mapping) or not weights:
        raise InvalidConfiguration(f"{source}: weights must be a non-empty object")
    if set(weights) != set(factors):
        raise InvalidConfiguration(
            f"{source}: weights and risk_factors must cover the same attributes"
        )
    for attr_id, weight in weights.items():
        if not isinstance(weight, (int, float)) or weight < 0:
            raise InvalidConfiguration(f"{source}: weight for {attr_id} must be >= 0")
    for attr_id, table in factors.items():
        if not isinstance(table, Mapping) or not table:
            raise InvalidConfiguration(
                f"{source}: risk_factors for {attr_id} must be a non-empty object"
            )
        for code, factor in table.items():
            if not isinstance(factor, (int, float)) or factor < 0:
                raise InvalidConfiguration(
                    f"{source}: risk factor for {attr_id} code {code} must be >= 0"
                )

    bands_raw = raw["speed_bands"]
    if not isinstance(bands_raw, Sequence) or not bands_raw:
        raise InvalidConfiguration(f"{source}: speed_bands must be a non-empty list")
    bands = []
    for entry in bands_raw:
        if not isinstance(entry, Mapping) or set(entry) != {"max_kmh", "multiplier"}:
            raise InvalidConfiguration(
                f"{source}: each speed band needs exactly max_kmh and multiplier"
            )
        if entry["multiplier"] <= 0:
            raise InvalidConfiguration(f"{source}: speed multipliers must be > 0")
        bands.append(SpeedBand(float(entry["max_kmh"]), float(entry["multiplier"])))
    caps = [band.max_kmh for band in bands]
    if caps != sorted(caps) or len(set(caps)) != len(caps):
        raise InvalidConfiguration(f"{source}: speed band caps must strictly increase")

    thresholds = raw["star_thresholds"]
    if (
        not isinstance(thresholds, Sequence)
        or len(thresholds) != 4
        or not all(isinstance(t, (int, float)) for t in thresholds)
    ):
        raise InvalidConfiguration(f"{source}: star_thresholds must be four numbers")
    t5, t4, t3, t2 = (float(t) for t in thresholds)
    if not t5 < t4 < t3 < t2:
        raise InvalidConfiguration(f"{source}: star_thresholds must strictly increase")

    digest = hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode("utf-8")
    ).hexdigest()[:8]
    return ScoringConfig(
        road_user=road_user,
        weights=dict(weights),
        risk_factors={attr: dict(table) for attr, table in factors.items()},
        speed_bands=tuple(bands),
        star_thresholds=(t5, t4, t3, t2),
        version=f"ref-{digest}",
    )


def load_scoring_config(path: str | Path) -> ScoringConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfiguration(f"{path}: not valid JSON ({exc})") from exc
    return parse_scoring_config(raw, source=str(path))


def default_scoring_config_path() -> Path:
    return Path(__file__).parent / "data" / "scoring_default.json"


def aggregate_segment(
    image_predictions: Sequence[ParsedPredictions],
    segment: SegmentRecord,
    codebook: Codebook,
) -> RoadPrediction:
    """Promote per-image predictions to one segment-level coding.

    The class with the highest risk rank among valid image-level predictions
    wins each attribute; the witness is the earliest image (by position in
    the segment) that predicted the winning class. Attributes invalid in
    every image are left out of `aggregated` and reported as unresolved.
    """
    if not image_predictions:
        raise SegmentImageMismatch(f"{segment.segment_id}: no image predictions")
    position = {image_id: i for i, image_id in enumerate(segment.image_ids)}
    seen: set[str] = set()
    for prediction in image_predictions:
        if prediction.image_id not in position:
            raise SegmentImageMismatch(
                f"image {prediction.image_id} is not part of segment {segment.segment_id}"
            )
        if prediction.image_id in seen:
            raise SegmentImageMismatch(
                f"image {prediction.image_id} appears twice for segment {segment.segment_id}"
            )
        seen.add(prediction.image_id)

    ordered = sorted(image_predictions, key=lambda p: position[p.image_id])
    aggregated: dict[str, str] = {}
    contributing: dict[str, str] = {}
    unresolved: list[str] = []
    for attr in codebook:
        best_rank = -1
        for prediction in ordered:
            code = prediction.predictions.get(attr.id)
            if code is None:
                continue
            rank = attr.risk_rank(code)
            if rank > best_rank:
                best_rank = rank
                aggregated[attr.id] = code
                contributing[attr.id] = prediction.image_id
        if best_rank < 0:
            unresolved.append(attr.id)
    return RoadPrediction(
        segment_id=segment.segment_id,
        aggregated=aggregated,
        contributing=contributing,
        n_images=len(segment.image_ids),
        unresolved=tuple(unresolved),
    )


def estimate_star_rating(
    rating_input: StarRatingInput,
    model: ScoringConfig,
    codebook: Codebook | None = None,
) -> StarRating:
    """Score a segment and map the score onto 1..5 stars.

    Attributes the configuration demands but aggregation left unresolved are
    imputed with their safest class when a codebook is supplied; each
    imputation is logged and recorded on the result. Without a codebook the
    gap raises MissingAttribute.
    """
    if rating_input.road_user is not model.road_user:
        raise InvalidConfiguration(
            f"configuration rates {model.road_user.value}, input is for "
            f"{rating_input.road_user.value}"
        )
    multiplier = model.speed_multiplier(rating_input.operating_speed)
    score = 0.0
    substitutions: list[str] = []
    for attr_id in sorted(model.weights):
        code = rating_input.road.aggregated.get(attr_id)
        if code is None:
            if codebook is None or attr_id not in codebook.ids():
                raise MissingAttribute(
                    f"segment {rating_input.road.segment_id}: scoring needs "
                    f"attribute {attr_id} but aggregation did not resolve it"
                )
            code = codebook[attr_id].safest_class().code
            substitutions.append(attr_id)
            log.info(
                "segment %s: substituted safest class %s for unresolved %s",
                rating_input.road.segment_id, code, attr_id,
            )
        table = model.risk_factors[attr_id]
        if code not in table:
            raise InvalidConfiguration(
                f"no risk factor for attribute {attr_id} class {code}"
            )
        score += model.weights[attr_id] * table[code] * multiplier

    t5, t4, t3, t2 = model.star_thresholds
    if score <= t5:
        stars = 5
    elif score <= t4:
        stars = 4
    elif score <= t3:
        stars = 3
    elif score <= t2:
        stars = 2
    else:
        stars = 1
    return StarRating(
        stars=stars,
        score=score,
        model_version=model.version,
        substitutions=tuple(substitutions),
    )


@dataclass(frozen=True)
class StarConfusion:
    """5x5 matrix indexed [truth-1][predicted-1], plus the high-risk 2x2.

    `high_risk` is indexed [truth_is_high][predicted_is_high] where high
    means fewer than 3 stars.
    """

    matrix: tuple[tuple[int, ...], ...]
    high_risk: tuple[tuple[int, int], tuple[int, int]]


def star_rating_confusion(
    predicted: Sequence[StarRating], truth: Sequence[int]
) -> StarConfusion:
    if len(predicted) != len(truth):
        raise LengthMismatch(
            f"{len(predicted)} predictions vs {len(truth)} truths"
        )
    matrix = [[0] * 5 for _ in range(5)]
    binary = [[0, 0], [0, 0]]
    for rating, actual in zip(predicted, truth):
        if actual not in STAR_LEVELS:
            raise ValueError(f"truth stars {actual} outside 1..5")
        matrix[actual - 1][rating.stars - 1] += 1
        binary[int(actual < HIGH_RISK_BELOW)][int(rating.stars < HIGH_RISK_BELOW)] += 1
    return StarConfusion(
        matrix=tuple(tuple(row) for row in matrix),
        high_risk=(tuple(binary[0]), tuple(binary[1])),
    )
