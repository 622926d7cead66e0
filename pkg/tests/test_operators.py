import numpy as np
import pytest

from conftest import random_complex, random_mask, unit_sens
from sigmanet.core import SamplingMask, ShapeMismatch
from sigmanet.operators import ForwardOperator, adjoint, fft1c, fft2c, forward, ifft1c, ifft2c, inner, rss


def test_centered_fft_is_unitary(rng):
    x = random_complex(rng, (3, 16, 12))
    k = fft2c(x)
    assert np.allclose(ifft2c(k), x, atol=1e-12)
    assert np.isclose(np.linalg.norm(k), np.linalg.norm(x), rtol=1e-12)


def test_centered_fft_puts_dc_in_the_middle():
    k = fft2c(np.ones((8, 8)))
    assert np.isclose(abs(k[4, 4]), 8.0)
    assert np.isclose(np.abs(k).sum(), 8.0)


def test_fft1c_matches_fft2c_per_axis(rng):
    x = random_complex(rng, (8, 10))
    assert np.allclose(fft1c(fft1c(x, axis=0), axis=1), fft2c(x), atol=1e-12)
    assert np.allclose(ifft1c(fft1c(x, axis=1), axis=1), x, atol=1e-12)


def test_odd_dimensions_rejected():
    with pytest.raises(ShapeMismatch):
        fft2c(np.zeros((7, 8)))


def test_rss_single_channel_is_magnitude(rng):
    x = random_complex(rng, (1, 6, 6))
    assert np.array_equal(rss(x), np.sqrt(np.abs(x[0]) ** 2))


def _random_operator(rng, kind, size, coils, maps):
    mask = random_mask(rng, size)
    if kind == "SN":
        return ForwardOperator("SN", mask, random_complex(rng, (maps, coils, size, size)))
    return ForwardOperator("PCN", mask, coils=coils, shape=(size, size))


def test_dot_product_test_random_instances(rng):
    sizes = [8, 12, 16, 20, 24, 28, 32]
    for trial in range(100):
        kind = "SN" if trial % 2 == 0 else "PCN"
        size = sizes[trial % len(sizes)]
        coils = (1, 2, 4)[trial % 3]
        maps = 1 + (trial // 2) % 2
        op = _random_operator(rng, kind, size, coils, maps)
        x = random_complex(rng, (op.channels, size, size))
        y = random_complex(rng, (op.coils, size, size))
        lhs = inner(forward(op, x), y)
        rhs = inner(x, adjoint(op, y))
        scale = np.linalg.norm(forward(op, x)) * np.linalg.norm(y)
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_full_mask_unit_sens_normal_is_identity(rng):
    op = ForwardOperator("SN", SamplingMask.full(16), unit_sens(16, 16, 4))
    x = random_complex(rng, (1, 16, 16))
    assert np.allclose(op.normal(x), x, atol=1e-12)


def test_pcn_full_mask_round_trip(rng):
    op = ForwardOperator("PCN", SamplingMask.full(8), coils=3, shape=(8, 8))
    x = random_complex(rng, (3, 8, 8))
    assert np.allclose(op.adjoint(op.forward(x)), x, atol=1e-12)


def test_masked_lines_are_zero(rng):
    op = _random_operator(rng, "PCN", 16, 2, 1)
    k = op.forward(random_complex(rng, (2, 16, 16)))
    assert np.all(k[:, ~op.mask.pe_line_flags, :] == 0)


def test_shape_errors(rng):
    op = ForwardOperator("SN", SamplingMask.full(8), unit_sens(8, 8, 2))
    with pytest.raises(ShapeMismatch):
        op.forward(np.zeros((2, 8, 8)))
    with pytest.raises(ShapeMismatch):
        op.adjoint(np.zeros((3, 8, 8)))
    with pytest.raises(ShapeMismatch):
        ForwardOperator("SN", SamplingMask.full(6), unit_sens(8, 8, 2))
    with pytest.raises(ShapeMismatch):
        ForwardOperator("SN", SamplingMask.full(8))


@pytest.mark.parametrize("kind", ["SN", "PCN"])
def test_forward_is_linear(rng, kind):
    op = _random_operator(rng, kind, 16, 3, 2)
    x = random_complex(rng, (op.channels, 16, 16))
    z = random_complex(rng, (op.channels, 16, 16))
    a, b = 0.7 - 1.3j, 2.1 + 0.4j
    assert np.allclose(op.forward(a * x + b * z), a * op.forward(x) + b * op.forward(z), atol=1e-10)


def test_masking_is_idempotent(rng):
    op = _random_operator(rng, "PCN", 16, 2, 1)
    k = random_complex(rng, (2, 16, 16))
    once = op.apply_mask(k)
    assert np.array_equal(op.apply_mask(once), once)
    assert np.allclose(op.forward(op.adjoint(once)), once, atol=1e-12)


def test_rss_ignores_per_channel_phase(rng):
    x = random_complex(rng, (4, 8, 8))
    phases = np.exp(1j * rng.uniform(-np.pi, np.pi, size=(4, 1, 1)))
    assert np.allclose(rss(phases * x), rss(x), atol=1e-12)
