"""Shared fixtures and analytic oracles."""

import math
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import norm

from src.privicl.core.backend import CompletionRequest, MockBackend
from src.privicl.core.storage import write_jsonl


def gaussian_delta(epsilon: float, sigma: float, sensitivity: float = 1.0) -> float:
    """Exact delta(epsilon) of the Gaussian mechanism."""
    a = sensitivity / (2 * sigma)
    b = epsilon * sigma / sensitivity
    return float(norm.cdf(a - b) - math.exp(epsilon) * norm.cdf(-a - b))


def gaussian_epsilon(sigma: float, delta: float, sensitivity: float = 1.0) -> float:
    """Exact epsilon(delta) of the Gaussian mechanism."""
    return brentq(lambda e: gaussian_delta(e, sigma, sensitivity) - delta, 0.0, 100.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240517)


@pytest.fixture
def write_records(tmp_path: Path) -> Callable[[str, list[dict[str, Any]]], Path]:
    """Write JSON-lines records under tmp_path and return the file path."""

    def write(name: str, records: list[dict[str, Any]]) -> Path:
        path = tmp_path / name
        write_jsonl(path, records)
        return path

    return write


@pytest.fixture
def sentiment_exemplars() -> list[dict[str, Any]]:
    return [
        {"input": f"review number {i} was {'great' if i % 2 else 'awful'}",
         "answer": "Positive" if i % 2 else "Negative"}
        for i in range(40)
    ]


@pytest.fixture
def positive_backend() -> MockBackend:
    """Mock whose every completion is 'Positive'."""

    def responder(request: CompletionRequest) -> str:
        return "Positive"

    return MockBackend(seed=1, responder=responder)
