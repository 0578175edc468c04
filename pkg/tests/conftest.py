import numpy as np
import pytest

from prefact.model import HypothesisSet


def random_hypotheses(rng, N=3, T=4, D=5, A=3, O=4, scale=1.0):
    """Random HypothesisSet with logscale and log-sigma in a moderate range."""
    return HypothesisSet(
        median=scale * rng.standard_normal((N, T, D)),
        logscale=0.3 * rng.standard_normal((N, T, D)),
        action_logits=scale * rng.standard_normal((N, T, A)),
        object_logits=scale * rng.standard_normal((N, T, O)),
        action_log_sigma=0.3 * rng.standard_normal((N, T)),
        object_log_sigma=0.3 * rng.standard_normal((N, T)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
