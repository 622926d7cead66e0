from dataclasses import replace

import numpy as np
import pytest

from conftest import directional_fd, random_complex, rel_err, unit_sens
from sigmanet.core import (EmptyMask, InvalidParams, KSpaceVolume, NonFiniteLoss, PatchTooLarge, RunConfig,
                           SamplingMask, ShapeMismatch, seeded_rng)
from sigmanet.datasim import PhantomSpec, build_examples, make_mask, make_phantom_volume, undersample
from sigmanet.learn import (TRAIN_LOG_COLUMNS, LossConfig, OptimizerState, _box, _box_adjoint, _hinge, base_loss,
                            data_misfit, fe_patch, finetune, finetune_slices, fit_window, ssim, stl_apply, stl_plan,
                            stl_train, train)
from sigmanet.net import DenoiserParams
from sigmanet.operators import ForwardOperator, ifft2c, rss
from sigmanet.unrolled import UnrolledModel

SMALL = RunConfig(steps=2, layers=2, features=4, epochs=2, lr=1e-3)


def _dataset(seed=7, variant="SN"):
    spec = PhantomSpec(height=16, width=16, coil_count=2)
    volume = make_phantom_volume(spec, 2, seeded_rng(seed, 1))
    return volume, build_examples(volume, variant, 2.0, 4, seeded_rng(seed, 2), estimate=False)


def _smooth_pair(rng, size=16):
    a = rng.random((size, size)) + 1.0
    b = a + 0.2 * rng.standard_normal((size, size))
    return a, b


def test_ssim_of_identical_images_is_one(rng):
    a, _ = _smooth_pair(rng)
    score, grad = ssim(a, a, None, 2.0)
    assert score == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(grad)) < 1e-10


def test_ssim_is_symmetric_and_penalizes_shift(rng):
    a, b = _smooth_pair(rng)
    assert ssim(a, b, None, 2.0)[0] == pytest.approx(ssim(b, a, None, 2.0)[0], abs=1e-12)
    assert ssim(a, a + 0.5, None, 2.0)[0] < 1.0


def test_ssim_gradient_matches_finite_differences(rng):
    a, b = _smooth_pair(rng)
    mask = np.zeros(a.shape, dtype=bool)
    mask[4:12, 2:14] = True
    v = rng.standard_normal(a.shape)
    _, grad = ssim(a, b, mask, 2.0)
    numeric = directional_fd(lambda x: ssim(x, b, mask, 2.0)[0], a, v)
    assert rel_err(numeric, np.sum(grad * v)) <= 1e-5


def test_ssim_rejects_bad_inputs(rng):
    a, b = _smooth_pair(rng)
    with pytest.raises(EmptyMask):
        ssim(a, b, np.zeros(a.shape, dtype=bool), 2.0)
    corners = np.zeros(a.shape, dtype=bool)
    corners[0, 0] = True
    with pytest.raises(EmptyMask):
        ssim(a, b, corners, 2.0)
    with pytest.raises(ShapeMismatch):
        ssim(a, b[:8], None, 2.0)
    with pytest.raises(InvalidParams):
        ssim(a, b, None, 0.0)


def test_box_means_and_their_adjoint(rng):
    img = rng.standard_normal((12, 10))
    means = _box(img, 5)
    assert means.shape == (8, 6)
    assert means[3, 2] == pytest.approx(img[3:8, 2:7].mean(), abs=1e-12)
    g = rng.standard_normal(means.shape)
    assert np.sum(means * g) == pytest.approx(np.sum(img * _box_adjoint(g, img.shape, 5)), abs=1e-10)


def test_fit_window_keeps_odd_sides():
    assert fit_window(7, (64, 64)) == 7
    assert fit_window(7, (4, 4)) == 3
    assert fit_window(7, (5, 12)) == 5


def test_base_loss_of_reference_is_minus_one(rng):
    x_ref, _ = _smooth_pair(rng)
    value, _ = base_loss(x_ref[None].astype(complex), x_ref, None, LossConfig(), 2.0)
    assert value == pytest.approx(-1.0, abs=1e-10)


def test_base_loss_gradient_matches_finite_differences(rng):
    x_ref, _ = _smooth_pair(rng)
    x = random_complex(rng, (2, 16, 16)) + 1.0
    v = random_complex(rng, x.shape)
    mask = np.ones(x_ref.shape, dtype=bool)
    mask[:3] = False
    cfg = LossConfig(lambda_l1=0.05)
    _, grad = base_loss(x, x_ref, mask, cfg, 2.0)
    numeric = directional_fd(lambda z: base_loss(z, x_ref, mask, cfg, 2.0)[0], x, v)
    assert rel_err(numeric, np.vdot(grad, v).real) <= 1e-4


def test_learning_rate_schedule():
    opt = OptimizerState("RMSProp", 1.0, [])
    assert [opt.lr_at(e) for e in (1, 15, 16, 30, 31, 46)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.125]
    assert OptimizerState("ADAM", 1.0, [], decay_every=0).lr_at(100) == 1.0


def test_rmsprop_closed_form():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -3.0])
    opt = OptimizerState.for_params("RMSProp", 0.01, [p])
    expected = p.copy()
    for t in range(1, 4):
        opt.step([p], [g], 0.01)
        expected -= 0.01 * g / (np.abs(g) * np.sqrt(1 - 0.9 ** t) + 1e-8)
    assert np.allclose(p, expected, rtol=0, atol=1e-12)


def test_adam_constant_gradient_moves_lr_per_step():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -3.0])
    opt = OptimizerState.for_params("ADAM", 0.01, [p])
    for _ in range(3):
        opt.step([p], [g], 0.01)
    assert np.allclose(p, [1.0 - 0.03, -2.0 + 0.03], rtol=0, atol=1e-9)


def test_optimizer_rejects_mismatched_shapes():
    opt = OptimizerState.for_params("ADAM", 0.01, [np.zeros(3)])
    with pytest.raises(ShapeMismatch):
        opt.step([np.zeros(4)], [np.zeros(4)], 0.01)


def test_zero_learning_rate_leaves_parameters_unchanged():
    _, examples = _dataset()
    model = UnrolledModel.from_config(SMALL, 2, seeded_rng(3))
    before = [p.copy() for p in model.parameters()]
    train(model, examples, replace(SMALL, lr=0.0))
    for a, b in zip(before, model.parameters()):
        assert np.array_equal(a, b)


def test_training_is_deterministic_and_logged(tmp_path):
    _, examples = _dataset()
    runs = []
    for _ in range(2):
        model = UnrolledModel.from_config(SMALL, 2, seeded_rng(3))
        runs.append(train(model, examples, SMALL, log_path=tmp_path / "log.csv"))
    (m1, log1), (m2, log2) = runs
    assert list(log1.columns) == TRAIN_LOG_COLUMNS
    assert len(log1) == SMALL.epochs * len(examples)
    assert log1.equals(log2)
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(a, b)
    assert (tmp_path / "log.csv").exists()


def test_training_with_patches_and_pcn():
    _, examples = _dataset(variant="PCN")
    cfg = replace(SMALL, variant="PCN", patch_fe=8, ssim_window=3)
    model = UnrolledModel.from_config(cfg, 2, seeded_rng(3))
    _, log = train(model, examples, cfg)
    assert np.all(np.isfinite(log.loss))


def test_non_finite_loss_is_reported():
    _, examples = _dataset()
    broken = [replace(examples[0], x_ref=np.full(examples[0].x_ref.shape, np.nan))]
    model = UnrolledModel.from_config(SMALL, 2, seeded_rng(3))
    with pytest.raises(NonFiniteLoss):
        train(model, broken, SMALL)


def test_full_width_patch_is_identity(rng):
    y = random_complex(rng, (2, 8, 16))
    x_ref = rng.random((8, 16))
    y_p, sens_p, ref_p, m_p = fe_patch(y, None, x_ref, None, 16)
    assert np.allclose(y_p, y)
    assert sens_p is None and m_p is None and np.array_equal(ref_p, x_ref)
    with pytest.raises(PatchTooLarge):
        fe_patch(y, None, x_ref, None, 18)
    with pytest.raises(InvalidParams):
        fe_patch(y, None, x_ref, None, 7)


def test_patch_commutes_with_forward_operator(rng):
    mask = make_mask(16, 2, 4, rng)
    sens = unit_sens(16, 16, 3)
    x = random_complex(rng, (1, 16, 16))
    y = ForwardOperator("SN", mask, sens).forward(x)
    y_p, sens_p, _, _ = fe_patch(y, sens, np.zeros((16, 16)), None, 8, start=5)
    band = slice(5, 13)
    assert np.allclose(y_p, ForwardOperator("SN", mask, sens_p).forward(x[..., band]), atol=1e-12)


def test_patched_full_kspace_matches_cropped_reference(rng):
    coil_images = random_complex(rng, (2, 8, 16))
    y = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(coil_images, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))
    y_p, _, ref_p, _ = fe_patch(y, None, rss(coil_images), None, 8, rng=rng)
    assert np.allclose(rss(ifft2c(y_p)), ref_p, atol=1e-12)


def test_hinge_modes():
    literal = LossConfig(finetune_mode="literal", beta=0.1)
    value, slope = _hinge(0.6, literal)
    assert value == pytest.approx(0.5 * 0.25) and slope == pytest.approx(0.5)
    dissimilar = LossConfig(beta=0.1)
    value, slope = _hinge(0.6, dissimilar)
    assert value == pytest.approx(0.5 * 0.09) and slope == pytest.approx(-0.3)
    assert _hinge(0.95, dissimilar) == (0.0, -0.0)


def test_finetune_slices_are_central():
    volume = KSpaceVolume(np.zeros((7, 1, 4, 4)), SamplingMask.full(4))
    assert finetune_slices(volume, 3) == [2, 3, 4]
    assert finetune_slices(volume, 10) == list(range(7))


def test_data_misfit_of_zero_model_on_full_data(rng):
    sens = unit_sens(8, 8, 2)
    mask = SamplingMask.full(8)
    y = ForwardOperator("SN", mask, sens).forward(random_complex(rng, (1, 8, 8)))
    model = UnrolledModel.from_config(RunConfig(steps=2, layers=2, features=4), 2, rng, zero=True)
    assert data_misfit(model, y, mask, sens) < 1e-20


def test_finetune_returns_adapted_copy():
    phantoms, _ = _dataset()
    measured = undersample(phantoms.kspace, make_mask(16, 2, 4, seeded_rng(5)))
    model = UnrolledModel.from_config(SMALL, 2, seeded_rng(3))
    before = [p.copy() for p in model.parameters()]
    cfg = replace(SMALL, finetune_epochs=2, finetune_lr=1e-3, finetune_slices=1, ssim_window=3)
    tuned = finetune(model, measured, cfg, sens=phantoms.sens)
    assert tuned is not model
    for a, b in zip(before, model.parameters()):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(before, tuned.parameters()))


def test_finetune_steps_once_per_slice_at_a_constant_rate(monkeypatch):
    phantoms, _ = _dataset()
    measured = undersample(phantoms.kspace, make_mask(16, 2, 4, seeded_rng(5)))
    rates = []
    step = OptimizerState.step

    def counting(self, params, grads, lr):
        rates.append((self.kind, lr))
        return step(self, params, grads, lr)

    monkeypatch.setattr(OptimizerState, "step", counting)
    cfg = replace(SMALL, finetune_epochs=3, finetune_lr=5e-5, finetune_slices=2, ssim_window=3)
    finetune(UnrolledModel.from_config(SMALL, 2, seeded_rng(3)), measured, cfg, sens=phantoms.sens)
    assert rates == [("ADAM", 5e-5)] * 6


def test_stl_with_zero_weights_outputs_zero(rng):
    out = stl_apply(DenoiserParams.zeros(stl_plan(4)), rng.random((16, 16)))
    assert out.shape == (16, 16) and np.all(out == 0)


def test_stl_training_raises_ssim(rng):
    source = rng.random((16, 16)) + 0.5
    target = 0.8 * source + 0.1
    cfg = RunConfig(stl_features=8, stl_epochs=1, stl_lr=1e-5)
    params = stl_train([(source, target)], cfg)
    start = stl_train([(source, target)], replace(cfg, stl_lr=0.0))
    data_range = float(target.max())
    after = ssim(stl_apply(params, source), target, None, data_range)[0]
    before = ssim(stl_apply(start, source), target, None, data_range)[0]
    assert after > before


def test_stl_rejects_mismatched_pairs(rng):
    with pytest.raises(ShapeMismatch):
        stl_train([(np.ones((8, 8)), np.ones((8, 6)))], RunConfig())
