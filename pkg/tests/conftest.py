import sys

import numpy as np
import pytest

from chanfuse.chansel import MultichannelUtterance
from chanfuse.featkit import FeatureMatrix
from chanfuse.gmm import EmConfig, GmmModel, gmm_train
from chanfuse.scenegen import reference_model, sample_gmm


def random_model(rng, M, D, var=(0.3, 2.0)):
    return GmmModel(rng.dirichlet(np.ones(M)), rng.normal(size=(M, D)), rng.uniform(*var, size=(M, D)))


def random_utterance(rng, T, D, C):
    return MultichannelUtterance(tuple(FeatureMatrix(rng.normal(size=(T, D))) for _ in range(C)))


@pytest.fixture(scope="session")
def small_ref():
    """Generator model for clean frames, D=8."""
    return reference_model(seed=11, M=4, D=8)


@pytest.fixture(scope="session")
def small_clean_gmm(small_ref):
    """GMM trained on normalized clean samples from ``small_ref``."""
    from chanfuse.featkit import normalize

    rng = np.random.default_rng(12)
    utts = [normalize(FeatureMatrix(sample_gmm(small_ref, 300, rng, 0.8))) for _ in range(8)]
    return gmm_train(utts, 8, EmConfig(seed=1))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
