import numpy as np
import pytest

from sigmanet.core import SamplingMask, seeded_rng
from sigmanet.datasim import PhantomSpec, coil_profiles


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_mask(rng, pe, acl=2, r=2.0):
    flags = rng.random(pe) < 1 / r
    start = pe // 2 - acl // 2
    flags[start:start + acl] = True
    return SamplingMask(flags, acl, r)


def unit_sens(height, width, coils, maps=1):
    """Unit-RSS Gaussian coil maps of shape (maps, Q, H, W); extra map sets are zero."""
    profiles = coil_profiles(PhantomSpec(height=height, width=width, coil_count=coils))[None]
    if maps == 2:
        profiles = np.concatenate([profiles, np.zeros_like(profiles)])
    return profiles


def directional_fd(fn, x, v, eps=1e-6):
    """Central difference of a real scalar fn along direction v."""
    return (fn(x + eps * v) - fn(x - eps * v)) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


@pytest.fixture
def rng():
    return seeded_rng(1234)
