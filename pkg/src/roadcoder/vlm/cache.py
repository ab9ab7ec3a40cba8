"""Content-addressed response cache.

One JSON file per request digest. Writes go through a temp file and an
atomic rename, so concurrent readers never observe a torn entry and the
last writer for a key wins with a complete record.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

from .parsing import ParsedPredictions, _from_payload, _to_payload


def cache_key(
    model: str,
    system_text: str,
    user_text: str,
    image_bytes: bytes,
    decoding: Mapping[str, object] | None = None,
) -> str:
    """Digest of everything that determines a backend answer."""
    digest = hashlib.sha256()
    for part in (
        model.encode("utf-8"),
        system_text.encode("utf-8"),
        user_text.encode("utf-8"),
        image_bytes,
        json.dumps(dict(decoding or {}), sort_keys=True).encode("utf-8"),
    ):
        digest.update(len(part).to_bytes(8, "big"))
        digest.update(part)
    return digest.hexdigest()


class ResponseCache:
    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> ParsedPredictions | None:
        path = self._path(key)
        if not path.is_file():
            return None
        payload = json.loads(path.read_text(encoding="utf-8"))
        return _from_payload(payload["parsed"])

    def put(self, key: str, parsed: ParsedPredictions) -> None:
        payload = {"raw_response": parsed.raw_response, "parsed": _to_payload(parsed)}
        path = self._path(key)
        scratch = path.with_suffix(f".tmp.{os.getpid()}")
        scratch.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
        os.replace(scratch, path)

    def __contains__(self, key: str) -> bool:
        return self._path(key).is_file()

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))
