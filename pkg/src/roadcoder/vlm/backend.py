"""Backend adapters: request shaping per provider, plus an offline mock.

Each adapter turns (system instruction, user prompt) into one HTTP call and
returns the model's raw text. Decoding parameters are pinned to the least
random settings the API offers and exposed for cache keying.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Protocol

from ..codebook import Codebook
from ..errors import AuthError, InvalidConfiguration, RateLimited, TransportError
from ..prompting import SystemInstruction, UserPrompt


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    endpoint: str = ""
    credentials_env: str = ""
    request_timeout: float = 60.0
    max_retries: int = 3
    rate_limit: float = 60.0  # requests per minute

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise InvalidConfiguration("max_retries must be >= 0")
        if self.rate_limit <= 0:
            raise InvalidConfiguration("rate_limit must be > 0")
        if self.request_timeout <= 0:
            raise InvalidConfiguration("request_timeout must be > 0")


class Backend(Protocol):
    decoding_params: Mapping[str, object]

    def send(
        self, system: SystemInstruction, user: UserPrompt, descriptor: BackendDescriptor
    ) -> str: ...


def _sniff_mime(image_bytes: bytes) -> str:
    return "image/png" if image_bytes.startswith(b"\x89PNG") else "image/jpeg"


def _credentials(descriptor: BackendDescriptor) -> str:
    token = os.environ.get(descriptor.credentials_env, "")
    if not token:
        raise AuthError(
            f"backend {descriptor.name}: environment variable "
            f"{descriptor.credentials_env or '<unset>'} holds no credentials"
        )
    return token


def _raise_for_status(status: int, body: str, backend: str) -> None:
    if status in (401, 403):
        raise AuthError(f"{backend}: credentials rejected (HTTP {status})")
    if status == 429:
        raise RateLimited(f"{backend}: throttled (HTTP 429)")
    if status >= 500:
        raise TransportError(f"{backend}: server error (HTTP {status})")
    if status >= 400:
        raise TransportError(
            f"{backend}: request rejected (HTTP {status}): {body[:200]}", transient=False
        )


def _post_json(url: str, payload: dict, headers: dict, timeout: float, backend: str) -> dict:
    import requests

    try:
        reply = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"{backend}: {exc}") from exc
    _raise_for_status(reply.status_code, reply.text, backend)
    try:
        return reply.json()
    except ValueError as exc:
        raise TransportError(f"{backend}: non-JSON reply body") from exc


class GeminiBackend:
    decoding_params: Mapping[str, object] = MappingProxyType(
        {"temperature": 0.0, "top_k": 1, "candidate_count": 1}
    )

    def send(
        self, system: SystemInstruction, user: UserPrompt, descriptor: BackendDescriptor
    ) -> str:
        token = _credentials(descriptor)
        url = (
            f"{descriptor.endpoint.rstrip('/')}/v1beta/models/"
            f"{descriptor.name}:generateContent"
        )
        payload = {
            "systemInstruction": {"parts": [{"text": system.rendered}]},
            "contents": [
                {
                    "role": "user",
                    "parts": [
                        {"text": user.rendered_text},
                        {
                            "inlineData": {
                                "mimeType": _sniff_mime(user.image_ref),
                                "data": base64.b64encode(user.image_ref).decode("ascii"),
                            }
                        },
                    ],
                }
            ],
            "generationConfig": {
                "temperature": 0.0,
                "topK": 1,
                "candidateCount": 1,
            },
        }
        body = _post_json(
            url,
            payload,
            {"x-goog-api-key": token},
            descriptor.request_timeout,
            descriptor.name,
        )
        try:
            parts = body["candidates"][0]["content"]["parts"]
            return "".join(part.get("text", "") for part in parts)
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(
                f"{descriptor.name}: reply missing candidate text", transient=False
            ) from exc


class OpenAIBackend:
    decoding_params: Mapping[str, object] = MappingProxyType({"temperature": 0.0, "seed": 0})

    def send(
        self, system: SystemInstruction, user: UserPrompt, descriptor: BackendDescriptor
    ) -> str:
        token = _credentials(descriptor)
        url = f"{descriptor.endpoint.rstrip('/')}/v1/chat/completions"
        image_url = (
            f"data:{_sniff_mime(user.image_ref)};base64,"
            + base64.b64encode(user.image_ref).decode("ascii")
        )
        payload = {
            "model": descriptor.name,
            "temperature": 0.0,
            "seed": 0,
            "messages": [
                {"role": "system", "content": system.rendered},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": user.rendered_text},
                        {"type": "image_url", "image_url": {"url": image_url}},
                    ],
                },
            ],
        }
        body = _post_json(
            url,
            payload,
            {"Authorization": f"Bearer {token}"},
            descriptor.request_timeout,
            descriptor.name,
        )
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(
                f"{descriptor.name}: reply missing message content", transient=False
            ) from exc


def safest_class_response(codebook: Codebook) -> str:
    """Fixture fallback: every attribute answered with its rank-0 code."""
    return json.dumps(
        {attr.id: attr.safest_class().code for attr in codebook}, sort_keys=True
    )


class MockBackend:
    """Offline backend answering from a fixture table keyed by image id.

    Images absent from the table get the safest-class answer when a codebook
    was supplied, otherwise an empty object. Raw text flows through the same
    parse path as live replies, so fixtures may be malformed on purpose.
    """

    decoding_params: Mapping[str, object] = MappingProxyType({"mock": True})

    def __init__(
        self,
        fixtures: Mapping[str, str | Mapping[str, str]] | None = None,
        codebook: Codebook | None = None,
    ) -> None:
        self.fixtures = {
            image_id: body if isinstance(body, str) else json.dumps(body, sort_keys=True)
            for image_id, body in (fixtures or {}).items()
        }
        self.codebook = codebook
        self.calls = 0

    def send(
        self, system: SystemInstruction, user: UserPrompt, descriptor: BackendDescriptor
    ) -> str:
        self.calls += 1
        if user.image_id in self.fixtures:
            return self.fixtures[user.image_id]
        if self.codebook is not None:
            return safest_class_response(self.codebook)
        return "{}"


def make_backend(
    descriptor: BackendDescriptor,
    *,
    fixtures: Mapping[str, str | Mapping[str, str]] | None = None,
    codebook: Codebook | None = None,
) -> Backend:
    name = descriptor.name.lower()
    if name == "mock" or name.startswith("mock-"):
        return MockBackend(fixtures, codebook)
    if name.startswith("gemini"):
        return GeminiBackend()
    if name.startswith(("gpt", "openai", "o1", "o3", "o4")):
        return OpenAIBackend()
    raise InvalidConfiguration(f"no backend adapter for model {descriptor.name!r}")
