"""Vision-language backend dispatch, response parsing, and caching."""
from .backend import (
    BackendDescriptor,
    GeminiBackend,
    MockBackend,
    OpenAIBackend,
    make_backend,
)
from .cache import ResponseCache, cache_key
from .client import RequestBudget, TokenBucket, VlmClient
from .parsing import (
    InvalidAttribute,
    InvalidReason,
    ParsedPredictions,
    parse_response,
    read_predictions_jsonl,
    write_predictions_jsonl,
)

__all__ = [
    "BackendDescriptor",
    "GeminiBackend",
    "InvalidAttribute",
    "InvalidReason",
    "MockBackend",
    "OpenAIBackend",
    "ParsedPredictions",
    "RequestBudget",
    "ResponseCache",
    "TokenBucket",
    "VlmClient",
    "cache_key",
    "make_backend",
    "parse_response",
    "read_predictions_jsonl",
    "write_predictions_jsonl",
]
