"""Crowdsourced imagery lookup and panorama normalization.

Candidates come from a provider (live HTTP or a recorded replay file), get
filtered by great-circle distance and capture recency, and panoramas are
flattened to the survey camera format: a rectilinear view 1600 pixels wide
by 1200 tall. Equirectangular input uses the convention that column zero is
azimuth 0 and azimuth grows to the right.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    AuthError,
    DegenerateFov,
    NotEquirectangular,
    QuotaExceeded,
    TransportError,
)

EARTH_RADIUS_M = 6_371_008.8
OUT_WIDTH = 1600
OUT_HEIGHT = 1200
DEFAULT_FOV_DEG = 90.0


@dataclass(frozen=True)
class ImageryQuery:
    latitude: float
    longitude: float
    buffer_m: float = 50.0
    max_age_days: int = 365
    api_token_env: str = "MAPILLARY_TOKEN"
    # Recency is judged against this instant; None means "now".
    reference_date: datetime | None = None

    def __post_init__(self) -> None:
        if not -90 <= self.latitude <= 90:
            raise ValueError(f"latitude {self.latitude} out of range")
        if not -180 <= self.longitude <= 180:
            raise ValueError(f"longitude {self.longitude} out of range")
        if self.buffer_m <= 0:
            raise ValueError("buffer_m must be > 0")
        if self.max_age_days <= 0:
            raise ValueError("max_age_days must be > 0")


@dataclass(frozen=True)
class CandidateImage:
    provider_id: str
    latitude: float
    longitude: float
    captured_at: datetime
    is_panorama: bool
    distance_m: float


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on the mean-radius sphere."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


class ImageProvider(Protocol):
    def fetch(self, query: ImageryQuery) -> list[dict]:
        """Raw candidate records near the query point."""


def _parse_captured(value) -> datetime:
    # Providers send either epoch milliseconds or an ISO timestamp.
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value / 1000, tz=timezone.utc)
    stamp = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def _record_to_candidate(record: dict, query: ImageryQuery) -> CandidateImage:
    lon, lat = record["geometry"]["coordinates"]
    return CandidateImage(
        provider_id=str(record["id"]),
        latitude=float(lat),
        longitude=float(lon),
        captured_at=_parse_captured(record["captured_at"]),
        is_panorama=bool(record.get("is_pano", False)),
        distance_m=haversine_m(query.latitude, query.longitude, lat, lon),
    )


def query_images(query: ImageryQuery, provider: ImageProvider) -> list[CandidateImage]:
    """Candidates within the distance buffer and the recency window.

    Both filters apply independently; survivors come back sorted by
    distance, nearest first, with provider id breaking ties.
    """
    reference = query.reference_date or datetime.now(timezone.utc)
    if reference.tzinfo is None:
        reference = reference.replace(tzinfo=timezone.utc)
    oldest = reference - timedelta(days=query.max_age_days)
    kept = []
    for record in provider.fetch(query):
        candidate = _record_to_candidate(record, query)
        if candidate.distance_m > query.buffer_m:
            continue
        if candidate.captured_at < oldest:
            continue
        kept.append(candidate)
    kept.sort(key=lambda c: (c.distance_m, c.provider_id))
    return kept


class ReplayProvider:
    """Replays recorded responses from a JSONL file, keyed by query point.

    Each line holds {"request": {"latitude", "longitude"}, "response":
    [records]}. Lookup matches coordinates to six decimal places, which is
    roughly a tenth of a meter.
    """

    def __init__(self, path: str | Path) -> None:
        self._responses: dict[tuple[float, float], list[dict]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                key = (
                    round(float(entry["request"]["latitude"]), 6),
                    round(float(entry["request"]["longitude"]), 6),
                )
                self._responses[key] = entry["response"]

    def fetch(self, query: ImageryQuery) -> list[dict]:
        key = (round(query.latitude, 6), round(query.longitude, 6))
        if key not in self._responses:
            raise TransportError(
                f"no recorded response for ({key[0]}, {key[1]})", transient=False
            )
        return self._responses[key]


class MapillaryProvider:
    """Live lookups against the provider's graph endpoint."""

    def __init__(self, endpoint: str = "https://graph.mapillary.com") -> None:
        self.endpoint = endpoint.rstrip("/")

    def fetch(self, query: ImageryQuery) -> list[dict]:
        import requests

        token = os.environ.get(query.api_token_env, "")
        if not token:
            raise AuthError(f"environment variable {query.api_token_env} is not set")
        # Over-fetch with a generous bounding box; the caller applies the
        # precise great-circle filter.
        dlat = math.degrees(2 * query.buffer_m / EARTH_RADIUS_M)
        dlon = dlat / max(math.cos(math.radians(query.latitude)), 1e-6)
        bbox = (
            query.longitude - dlon,
            query.latitude - dlat,
            query.longitude + dlon,
            query.latitude + dlat,
        )
        try:
            response = requests.get(
                f"{self.endpoint}/images",
                params={
                    "access_token": token,
                    "bbox": ",".join(f"{v:.7f}" for v in bbox),
                    "fields": "id,geometry,captured_at,is_pano",
                },
                timeout=60,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"provider rejected the token (HTTP {response.status_code})")
        if response.status_code == 429:
            raise QuotaExceeded("provider quota exhausted (HTTP 429)")
        if response.status_code >= 400:
            raise TransportError(
                f"provider returned HTTP {response.status_code}",
                transient=response.status_code >= 500,
            )
        return response.json().get("data", [])


def record_replay(path: str | Path, query: ImageryQuery, records: Sequence[dict]) -> None:
    """Append one request/response pair to a replay file."""
    entry = {
        "request": {"latitude": query.latitude, "longitude": query.longitude},
        "response": list(records),
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def reproject_panorama(
    pano: np.ndarray,
    heading_deg: float,
    fov_deg: float = DEFAULT_FOV_DEG,
    *,
    out_width: int = OUT_WIDTH,
    out_height: int = OUT_HEIGHT,
) -> np.ndarray:
    """Rectilinear view of an equirectangular panorama at pitch zero.

    The virtual camera points at `heading_deg` azimuth with a horizontal
    field of view of `fov_deg`; sampling is bilinear with horizontal wrap.
    """
    if pano.ndim not in (2, 3):
        raise NotEquirectangular(f"expected 2- or 3-axis buffer, got shape {pano.shape}")
    height, width = pano.shape[:2]
    if width != 2 * height or height == 0:
        raise NotEquirectangular(
            f"width {width} is not twice height {height}; not an equirectangular image"
        )
    if not 0 < fov_deg < 180:
        raise DegenerateFov(f"fov {fov_deg} outside (0, 180)")

    focal = (out_width / 2) / math.tan(math.radians(fov_deg) / 2)
    xs = (np.arange(out_width) - (out_width - 1) / 2) / focal
    ys = (np.arange(out_height) - (out_height - 1) / 2) / focal
    dx, dy = np.meshgrid(xs, ys)

    theta0 = math.radians(heading_deg)
    east = math.sin(theta0) + dx * math.cos(theta0)
    north = math.cos(theta0) - dx * math.sin(theta0)
    azimuth = np.arctan2(east, north)
    # The horizontal norm of (east, north) is sqrt(1 + dx^2) regardless of
    # heading, so elevation only depends on the pixel grid.
    elevation = np.arctan2(-dy, np.sqrt(1 + dx * dx))
    px = (np.degrees(azimuth) % 360.0) / 360.0 * width - 0.5
    py = (90.0 - np.degrees(elevation)) / 180.0 * height - 0.5

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    x1 = (x0 + 1) % width
    x0 = x0 % width
    y0c = np.clip(y0, 0, height - 1)
    y1c = np.clip(y0 + 1, 0, height - 1)

    source = pano.astype(np.float64)
    if source.ndim == 2:
        source = source[:, :, np.newaxis]
    fx = fx[:, :, np.newaxis]
    fy = fy[:, :, np.newaxis]
    top = source[y0c, x0] * (1 - fx) + source[y0c, x1] * fx
    bottom = source[y1c, x0] * (1 - fx) + source[y1c, x1] * fx
    blended = top * (1 - fy) + bottom * fy

    if pano.ndim == 2:
        blended = blended[:, :, 0]
    if np.issubdtype(pano.dtype, np.integer):
        return np.clip(np.round(blended), 0, 255).astype(pano.dtype)
    return blended.astype(pano.dtype)


def binocular_pair(
    pano: np.ndarray,
    heading_deg: float,
    fov_deg: float = DEFAULT_FOV_DEG,
    *,
    stereo_offset_deg: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two forward views: one at the heading, one offset to its side."""
    first = reproject_panorama(pano, heading_deg, fov_deg)
    if stereo_offset_deg == 0.0:
        return first, first.copy()
    second = reproject_panorama(pano, heading_deg + stereo_offset_deg, fov_deg)
    return first, second


def output_image_path(
    root: str | Path, segment_id: str, provider_id: str, heading_deg: float
) -> Path:
    heading = round(heading_deg % 360.0)
    return Path(root) / segment_id / f"{provider_id}_{heading}.png"
