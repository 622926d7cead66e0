import numpy as np
import pytest

from conftest import directional_fd, random_complex, rel_err
from sigmanet.core import BadMagic, HeaderMismatch, InvalidPlan, ShapeMismatch, StaleTape, TruncatedFile, seeded_rng
from sigmanet.net import (DenoiserParams, NetPlan, conv2d, denoise_backward, denoise_forward, forward_planes,
                          init_params)


def test_plan_validation_and_widths():
    with pytest.raises(InvalidPlan):
        NetPlan(2, 2, 16, 0)
    plan = NetPlan.for_channels(2, layers=3, features=8)
    assert plan.widths() == [4, 8, 8, 4]


def test_init_params_shapes(rng):
    params = init_params(NetPlan.for_channels(1, 3, 8), rng)
    assert [k.shape for k in params.kernels] == [(3, 3, 2, 8), (3, 3, 8, 8), (3, 3, 8, 2)]
    assert all(np.all(b == 0) for b in params.biases)
    limit = np.sqrt(6.0 / (9 * 8 + 9 * 2))
    assert np.abs(params.kernels[-1]).max() <= 0.1 * limit


def test_init_params_rejects_non_plan(rng):
    with pytest.raises(InvalidPlan):
        init_params((2, 2), rng)


def test_conv2d_matches_direct_sum(rng):
    planes = rng.standard_normal((2, 5, 6))
    kernel = rng.standard_normal((3, 3, 2, 3))
    bias = rng.standard_normal(3)
    out = conv2d(planes, kernel, bias)
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                expected = bias[o] + sum(kernel[dy, dx, c, o] * padded[c, i + dy, j + dx]
                                         for dy in range(3) for dx in range(3) for c in range(2))
                assert out[o, i, j] == pytest.approx(expected, abs=1e-12)


def test_zero_params_give_zero_output(rng):
    params = DenoiserParams.zeros(NetPlan.for_channels(2, 3, 4))
    out, _ = denoise_forward(params, random_complex(rng, (2, 8, 8)))
    assert np.all(out == 0)


def test_channel_mismatch(rng):
    params = DenoiserParams.zeros(NetPlan.for_channels(2, 2, 4))
    with pytest.raises(ShapeMismatch):
        denoise_forward(params, random_complex(rng, (3, 8, 8)))


def test_input_gradient_matches_finite_differences(rng):
    params = init_params(NetPlan.for_channels(2, 3, 6), rng)
    params.kernels[-1] *= 10
    x = random_complex(rng, (2, 8, 8))
    c = random_complex(rng, (2, 8, 8))
    v = random_complex(rng, (2, 8, 8))
    _, tape = denoise_forward(params, x)
    _, grad_x = denoise_backward(tape, c)
    fd = directional_fd(lambda z: np.vdot(c, denoise_forward(params, z)[0]).real, x, v)
    assert rel_err(fd, np.vdot(grad_x, v).real) <= 1e-4


@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("channels", [1, 2, 4])
def test_parameter_gradient_matches_finite_differences(rng, layers, channels):
    params = init_params(NetPlan.for_channels(channels, layers, 5), rng)
    x = random_complex(rng, (channels, 8, 8))
    c = random_complex(rng, (channels, 8, 8))
    _, tape = denoise_forward(params, x)
    grads, _ = denoise_backward(tape, c)
    directions = [rng.standard_normal(a.shape) for a in params.arrays()]
    analytic = sum(np.sum(g * d) for g, d in zip(grads, directions))

    def loss(t):
        shifted = DenoiserParams(params.plan, [k + t * d for k, d in zip(params.kernels, directions[0::2])],
                                 [b + t * d for b, d in zip(params.biases, directions[1::2])])
        return np.vdot(c, denoise_forward(shifted, x)[0]).real

    assert rel_err(directional_fd(loss, 0.0, 1.0), analytic) <= 1e-4


def test_tape_goes_stale_after_touch(rng):
    params = init_params(NetPlan.for_channels(1, 2, 4), rng)
    _, tape = denoise_forward(params, random_complex(rng, (1, 8, 8)))
    params.touch()
    with pytest.raises(StaleTape):
        denoise_backward(tape, np.zeros((1, 8, 8), dtype=complex))


def test_params_bytes_round_trip(rng):
    params = init_params(NetPlan(1, 1, 4, 3), rng)
    blob = params.to_bytes()
    again = DenoiserParams.from_bytes(blob)
    assert again.to_bytes() == blob
    assert again.plan == params.plan
    out_a, _ = forward_planes(params, np.ones((1, 6, 6)))
    out_b, _ = forward_planes(again, np.ones((1, 6, 6)))
    assert np.array_equal(out_a, out_b)


def test_params_bytes_errors(rng):
    blob = init_params(NetPlan(1, 1, 4, 2), rng).to_bytes()
    with pytest.raises(BadMagic):
        DenoiserParams.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedFile):
        DenoiserParams.from_bytes(blob[:-8])
    with pytest.raises(HeaderMismatch):
        DenoiserParams.from_bytes(blob + b"\0")
    params, used = DenoiserParams.from_bytes(blob + b"\0", exact=False)
    assert used == len(blob)


def test_translation_equivariance_away_from_borders(rng):
    params = init_params(NetPlan.for_channels(2, 3, 6), rng)
    params.biases[0] += 0.1
    x = random_complex(rng, (2, 24, 24))
    shift = (2, 3)
    moved, _ = denoise_forward(params, np.roll(x, shift, axis=(1, 2)))
    expected = np.roll(denoise_forward(params, x)[0], shift, axis=(1, 2))
    reach = params.plan.layers
    rows = slice(shift[0] + reach, 24 - reach)
    cols = slice(shift[1] + reach, 24 - reach)
    assert np.allclose(moved[:, rows, cols], expected[:, rows, cols], atol=1e-12)


def test_fresh_networks_shrink_their_input():
    ratios = []
    for seed in range(100):
        rng = seeded_rng(seed, 3)
        params = init_params(NetPlan.for_channels(2, 3, 16), rng)
        x = random_complex(rng, (2, 16, 16))
        ratios.append(np.linalg.norm(denoise_forward(params, x)[0]) / np.linalg.norm(x))
    assert max(ratios) < 1.0


def test_single_layer_network_backward_is_its_adjoint(rng):
    params = init_params(NetPlan.for_channels(3, 1, 4), rng)
    x = random_complex(rng, (3, 10, 10))
    c = random_complex(rng, (3, 10, 10))
    out, tape = denoise_forward(params, x)
    _, grad_x = denoise_backward(tape, c)
    assert np.vdot(c, out).real == pytest.approx(np.vdot(grad_x, x).real, rel=1e-12, abs=1e-10)
