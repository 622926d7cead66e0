import numpy as np
import pytest

from sigmanet.core import (ConfigError, ForegroundMask, InvalidParams, KSpaceVolume, MaskViolation, NonFiniteData,
                           RunConfig, SamplingMask, SensitivitySet, ShapeMismatch, SigmaNetError, check_image,
                           check_multichannel, load_run_config, parse_run_config, read_config_text, seeded_rng,
                           spawn_rngs, validate)


def test_check_image_rejects_small_and_nonfinite():
    with pytest.raises(ShapeMismatch):
        check_image(np.zeros((3, 8)))
    bad = np.zeros((4, 4))
    bad[1, 1] = np.nan
    with pytest.raises(NonFiniteData):
        check_image(bad)
    assert check_image(np.ones((4, 4))).dtype == np.complex128


def test_check_multichannel_channel_count():
    with pytest.raises(ShapeMismatch):
        check_multichannel(np.zeros((2, 8, 8)), channels=3)
    with pytest.raises(ShapeMismatch):
        check_multichannel(np.zeros((2, 8, 8)), shape=(8, 6))


def test_errors_share_a_base():
    assert issubclass(ShapeMismatch, SigmaNetError)
    assert issubclass(ShapeMismatch, ValueError)


def test_sampling_mask_requires_flagged_acl_block():
    flags = np.zeros(16, dtype=bool)
    flags[7:9] = True
    with pytest.raises(InvalidParams):
        SamplingMask(flags, 4, 4.0)
    with pytest.raises(InvalidParams):
        SamplingMask(np.zeros(16, dtype=bool), 0, 1.0)
    with pytest.raises(InvalidParams):
        SamplingMask(np.ones(16, dtype=bool), 2, 0.5)


def test_sampling_mask_true_r_and_grid():
    flags = np.zeros(16, dtype=bool)
    flags[6:10] = True
    mask = SamplingMask(flags, 4, 4.0)
    assert mask.true_r == 4.0
    assert mask.grid().shape == (16, 1)
    assert mask == SamplingMask(flags.copy(), 4, 4.0)
    assert SamplingMask.full(8).flagged == 8


def test_volume_rejects_data_on_unsampled_lines():
    flags = np.zeros(8, dtype=bool)
    flags[3:5] = True
    mask = SamplingMask(flags, 2, 4.0)
    data = np.zeros((1, 2, 8, 8), dtype=complex)
    data[0, 0, 4, 2] = 1.0
    KSpaceVolume(data, mask)
    data[0, 1, 0, 0] = 1.0
    with pytest.raises(MaskViolation):
        KSpaceVolume(data, mask)


def test_volume_rejects_nan_and_pe_mismatch():
    data = np.zeros((1, 2, 8, 8), dtype=complex)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteData):
        KSpaceVolume(data, SamplingMask.full(8))
    with pytest.raises(ShapeMismatch):
        KSpaceVolume(np.zeros((1, 2, 8, 8)), SamplingMask.full(6))


def test_sensitivity_energy_bound():
    maps = np.full((1, 2, 4, 4), 1 / np.sqrt(2), dtype=complex)
    SensitivitySet(maps)
    with pytest.raises(InvalidParams):
        SensitivitySet(maps * 1.01)
    with pytest.raises(ShapeMismatch):
        SensitivitySet(np.zeros((3, 2, 4, 4)))


def test_validate_cross_checks():
    volume = KSpaceVolume(np.zeros((1, 2, 8, 8)), SamplingMask.full(8))
    validate(volume, SensitivitySet(np.zeros((1, 2, 8, 8))), ForegroundMask(np.ones((8, 8))))
    with pytest.raises(ShapeMismatch):
        validate(volume, SensitivitySet(np.zeros((1, 3, 8, 8))), None)
    with pytest.raises(ShapeMismatch):
        validate(volume, None, ForegroundMask(np.ones((8, 6))))


def test_seeded_rng_is_reproducible_and_streams_differ():
    a = seeded_rng(7).standard_normal(5)
    b = seeded_rng(7).standard_normal(5)
    c = seeded_rng(7, stream=1).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    children = spawn_rngs(seeded_rng(7), 3)
    draws = [child.random() for child in children]
    assert len(set(draws)) == 3


def test_read_config_text_without_header_and_inline_comments():
    values = read_config_text("# run settings\nsteps = 3   # unrolled\nlr = 1e-3\n")
    assert values == {"steps": "3", "lr": "1e-3"}


def test_parse_run_config_types_and_errors():
    cfg = parse_run_config({"steps": "3", "lr": "1e-3", "share_weights": "yes", "dc_kind": "PM"})
    assert cfg.steps == 3 and cfg.lr == 1e-3 and cfg.share_weights is True and cfg.dc_kind == "PM"
    with pytest.raises(ConfigError):
        parse_run_config({"stepz": "3"})
    with pytest.raises(ConfigError):
        parse_run_config({"steps": "three"})
    with pytest.raises(ConfigError):
        parse_run_config({"beta": "1.5"})
    with pytest.raises(ConfigError):
        parse_run_config({"ssim_window": "6"})


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.steps, cfg.lr, cfg.epochs, cfg.lambda_l1) == (9, 1e-4, 50, 1e-3)
    assert (cfg.alpha, cfg.beta, cfg.finetune_epochs, cfg.finetune_lr, cfg.finetune_slices) == (1.0, 0.008, 30, 5e-5, 4)
    assert (cfg.stl_features, cfg.stl_epochs, cfg.stl_lr) == (32, 10, 5e-5)


def test_load_run_config_reads_run_section(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[run]\nvariant = PCN\nepochs = 5\n\n[phantom]\nheight = 32\n", encoding="utf-8")
    cfg = load_run_config(str(path), {"seed": "9"})
    assert cfg.variant == "PCN" and cfg.epochs == 5 and cfg.seed == 9


def test_missing_named_section_reads_as_empty():
    text = "[run]\nsteps = 3\n"
    assert read_config_text(text, "phantom") == {}
    assert read_config_text("steps = 3\n", "run") == {"steps": "3"}


def test_run_config_rejects_unusable_solver_and_patch_settings():
    with pytest.raises(ConfigError, match="cg_max_iter"):
        RunConfig(cg_max_iter=0)
    with pytest.raises(ConfigError, match="patch_fe"):
        RunConfig(patch_fe=4)
    with pytest.raises(ConfigError, match="patch_fe"):
        RunConfig(patch_fe=11, ssim_window=7)
    with pytest.raises(ConfigError, match="patch_fe"):
        parse_run_config({"patch_fe": "6", "ssim_window": "7"})
    assert RunConfig(patch_fe=8).patch_fe == 8
    assert RunConfig(patch_fe=4, ssim_window=3).patch_fe == 4
