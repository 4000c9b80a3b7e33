import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tenrec.core import multi_mode_product
from tenrec.evaluate import mask_random


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_low_rank(dims, ranks, seed):
    """Random tensor with exact multilinear rank ``ranks``."""
    gen = np.random.default_rng(seed)
    core = gen.standard_normal(tuple(ranks))
    factors = [np.linalg.qr(gen.standard_normal((d, r)))[0] for d, r in zip(dims, ranks)]
    return multi_mode_product(core, factors), factors, core


def recovery_instance(seed=0, dims=(30, 30, 30), ranks=(3, 3, 3), rate=0.5):
    """The synthetic completion benchmark: exact low-rank truth plus a mask."""
    truth, factors, core = make_low_rank(dims, ranks, seed)
    mask = mask_random(dims, rate, seed=seed)
    return truth, mask
