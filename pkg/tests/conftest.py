"""Session-scoped benchmark fixtures shared by the acceptance suite.

Preparing a benchmark case (synthesize, train, equalize, decompose with
escalation) dominates runtime, so the two case sets are built once per
session: a hard operating point for the paired pruner comparison and a
gentle one (ample capacity, easy classes) for criterion-insensitivity.
"""

import time

import pytest

from ldrf.benchmark import BenchmarkSettings, prepare_case


@pytest.fixture(scope="session")
def hard_cases():
    """Ten seeded cases at the default (hard) benchmark operating point."""
    settings = BenchmarkSettings()
    t0 = time.monotonic()
    cases = [prepare_case(seed, settings) for seed in range(settings.seeds)]
    prep = time.monotonic() - t0
    return {"settings": settings, "cases": cases, "prep_seconds": prep}


@pytest.fixture(scope="session")
def gentle_cases():
    """Ten seeded cases on easy data where layer capacity is ample."""
    settings = BenchmarkSettings(classes=4, separation=1.5, noise=0.8,
                                 jitter=2, train_epochs=20)
    cases = [prepare_case(seed, settings) for seed in range(settings.seeds)]
    return {"settings": settings, "cases": cases}
