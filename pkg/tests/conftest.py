import math

import numpy as np
import pytest


def binom_sigma(n: int, p: float) -> float:
    return math.sqrt(n * p * (1 - p))


def assert_rate_close(hits: int, trials: int, expected: float, n_sigma: float = 4.0):
    """Assert an empirical rate within n_sigma binomial standard errors."""
    sigma = max(binom_sigma(trials, expected), 1e-9)
    assert abs(hits - trials * expected) <= n_sigma * sigma, (
        f"rate {hits}/{trials} = {hits / trials:.5f} vs expected {expected:.5f} "
        f"(+-{n_sigma} sigma = {n_sigma * sigma / trials:.5f})"
    )


@pytest.fixture(scope="session")
def param_grid():
    from traceforge.channel import ChannelParams

    return [
        ChannelParams(q, qi)
        for q in (0.0, 0.2, 0.5, 0.8)
        for qi in (0.0, 0.2, 0.5, 0.8)
    ]
