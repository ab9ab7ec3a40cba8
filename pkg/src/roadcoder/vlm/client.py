"""Request orchestration: caching, rate limiting, retries, and budgets.

`VlmClient.classify_image` is safe to call from multiple worker threads. A
shared token bucket gates admission to the backend, the budget counter
reserves before dispatch so a run never exceeds its request allowance, and
the cache confines all backend nondeterminism to first contact.
"""
from __future__ import annotations

import threading
import time
from typing import Callable

from ..codebook import Codebook
from ..errors import (
    BudgetExceeded,
    RateLimited,
    RateLimitedExhausted,
    ResponseUnparseable,
    TransportError,
)
from ..prompting import SystemInstruction, UserPrompt
from .backend import Backend, BackendDescriptor
from .cache import ResponseCache, cache_key
from .parsing import ParsedPredictions, parse_response


class TokenBucket:
    """Admits `rate_per_minute` requests, refilled continuously."""

    def __init__(
        self,
        rate_per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate_per_minute <= 0:
            raise ValueError("rate must be positive")
        self.rate_per_second = rate_per_minute / 60.0
        self.capacity = max(rate_per_minute / 60.0, 1.0)
        self.tokens = self.capacity
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(
                    self.capacity, self.tokens + (now - self.updated) * self.rate_per_second
                )
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate_per_second
            self.sleep(wait)


class RequestBudget:
    """Hard cap on backend requests; reservation happens before dispatch."""

    def __init__(self, limit: int) -> None:
        if limit < 0:
            raise ValueError("budget must be >= 0")
        self.limit = limit
        self.used = 0
        self.lock = threading.Lock()

    def reserve(self) -> None:
        with self.lock:
            if self.used >= self.limit:
                raise BudgetExceeded(
                    f"request budget of {self.limit} exhausted"
                )
            self.used += 1


class VlmClient:
    def __init__(
        self,
        descriptor: BackendDescriptor,
        backend: Backend,
        cache: ResponseCache,
        codebook: Codebook,
        *,
        budget: RequestBudget | None = None,
        limiter: TokenBucket | None = None,
        salvage_labels: bool = True,
        backoff_base: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.descriptor = descriptor
        self.backend = backend
        self.cache = cache
        self.codebook = codebook
        self.budget = budget
        self.limiter = limiter or TokenBucket(descriptor.rate_limit)
        self.salvage_labels = salvage_labels
        self.backoff_base = backoff_base
        self.sleep = sleep

    def classify_image(
        self, system: SystemInstruction, user: UserPrompt
    ) -> ParsedPredictions:
        key = cache_key(
            self.descriptor.name,
            system.rendered,
            user.rendered_text,
            user.image_ref,
            self.backend.decoding_params,
        )
        cached = self.cache.get(key)
        if cached is not None:
            return cached

        if self.budget is not None:
            self.budget.reserve()
        raw = self._send_with_retries(system, user)
        predictions, invalid = parse_response(
            raw, self.codebook, salvage_labels=self.salvage_labels
        )
        if not predictions:
            raise ResponseUnparseable(
                f"{user.image_id}: no attribute could be recovered from the reply"
            )
        parsed = ParsedPredictions(
            image_id=user.image_id,
            model=self.descriptor.name,
            predictions=predictions,
            invalid_attributes=tuple(invalid),
            raw_response=raw,
            prompt_digest=key,
        )
        # Write then read back: concurrent duplicates converge on one record.
        self.cache.put(key, parsed)
        stored = self.cache.get(key)
        assert stored is not None
        return stored

    def _send_with_retries(self, system: SystemInstruction, user: UserPrompt) -> str:
        attempts = self.descriptor.max_retries + 1
        last: TransportError | None = None
        for attempt in range(attempts):
            self.limiter.acquire()
            try:
                return self.backend.send(system, user, self.descriptor)
            except TransportError as exc:
                last = exc
                if not exc.transient:
                    raise
                if attempt + 1 < attempts:
                    self.sleep(self.backoff_base * (2**attempt))
        assert last is not None
        if isinstance(last, RateLimited):
            raise RateLimitedExhausted(
                f"{self.descriptor.name}: still throttled after {attempts} attempts"
            ) from last
        raise last
