"""Shared fixtures."""
from __future__ import annotations

import pytest

from roadcoder.codebook import Codebook, default_codebook_path, load_codebook


@pytest.fixture(scope="session")
def full_codebook() -> Codebook:
    """The shipped 52-attribute codebook, loaded once per test session."""
    return load_codebook(default_codebook_path())
