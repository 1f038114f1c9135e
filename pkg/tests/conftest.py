import numpy as np
import pytest

from secir.numeric import DEFAULT_CONFIG
from secir.session import run_pair
from secir.sharing import split


@pytest.fixture
def cfg():
    return DEFAULT_CONFIG


def split_values(secret, seed, cfg=DEFAULT_CONFIG):
    """Both parties' share values of a secret."""
    s1, s2 = split(secret, seed, cfg)
    return s1.values, s2.values


def run_both(fn, inputs1=(), inputs2=(), **kw):
    """Run the same party procedure on both sides of a local channel."""
    kw.setdefault("timeout", 60.0)
    return run_pair(lambda s: fn(s, *inputs1), lambda s: fn(s, *inputs2), **kw)


def reconstruct_values(v1, v2):
    return np.asarray(v1) + np.asarray(v2)
