"""
Shared pytest configuration
"""

import numpy as np
import pytest

from services.logging import setup_logging

# Structured logs go to stderr before any service logger is first used
setup_logging(level="WARNING", fmt="console")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
