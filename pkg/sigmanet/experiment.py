"""Desk-scale end-to-end experiment: train the model zoo on phantoms, finetune, ensemble, score."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RunConfig, seeded_rng
from .datasim import (PhantomSpec, build_examples, estimate_slice_sensitivities, foreground_mask, make_mask,
                      make_phantom_volume, replace_volume_background, undersample)
from .evalens import EnsembleInputs, ensemble, metrics_report
from .learn import data_misfit, finetune, finetune_slices, stl_apply, stl_train, train
from .operators import ifft2c, rss
from .unrolled import UnrolledModel, reconstruct_volume, zero_filled

logger = logging.getLogger(__name__)

# Model zoo: name -> (variant, DC kind)
ZOO = {
    "GD-SN": ("SN", "GD"),
    "PM-SN": ("SN", "PM"),
    "VS-SN": ("SN", "VS"),
    "PM-PCN": ("PCN", "PM"),
}
SN_FAMILY = ("GD-SN", "PM-SN", "VS-SN")
FINETUNED = "GD-SN-FT"
ZERO_FILLED = "zero-filled"
SIGMA_NET = "sigma-net"
STL_SUFFIX = "-STL"

STREAM_TRAIN_DATA = 21
STREAM_TEST_DATA = 22
STREAM_TEST_MASK = 23
STREAM_EXAMPLES = 24
STREAM_INIT = 25
STREAM_HELD_OUT_DATA = 26
STREAM_HELD_OUT_MASK = 27


@dataclass(frozen=True)
class DeskSetup:
    size: int = 64
    coils: int = 4
    train_slices: int = 8
    test_slices: int = 2
    held_out_slices: int = 4
    r: float = 4.0
    acl: int = 12
    noise_sigma: float = 0.0
    threshold_frac: float = 0.1
    # Corner square for the background level; must stay clear of the object columns
    noise_patch: int = 8
    seed: int = 0
    # Desk runs take 30 epochs; lr is raised from the full-scale 1e-4 to get there
    run: RunConfig = field(default_factory=lambda: RunConfig(steps=3, layers=3, epochs=30, lr=1e-3))
    models: tuple = tuple(ZOO)


@dataclass
class DeskResult:
    report: object
    images: dict
    reference: np.ndarray
    masks: np.ndarray
    models: dict
    logs: dict
    stl: object
    misfit_before: float
    misfit_after: float


def _phantom_spec(setup):
    return PhantomSpec(height=setup.size, width=setup.size, coil_count=setup.coils, noise_sigma=setup.noise_sigma)


def _measure(setup, slices, data_stream, mask_stream):
    """Simulates a held-out volume and undersamples it with one mask."""
    volume = make_phantom_volume(_phantom_spec(setup), slices, seeded_rng(setup.seed, data_stream))
    mask = make_mask(setup.size, setup.r, setup.acl, seeded_rng(setup.seed, mask_stream))
    return volume, undersample(volume.kspace, mask)


def _volume_misfit(model, volume, sens, indices):
    return sum(data_misfit(model, volume.data[s], volume.mask, sens[s]) for s in indices)


def stl_pairs(volume, acl, n_maps=1):
    """
    (sensitivity-combined magnitude, RSS magnitude) pairs of a fully sampled
    phantom volume, with maps estimated from each slice's calibration block.
    """
    # R = 1 flags every line, so the mask draw cannot vary
    sn = build_examples(volume, "SN", 1.0, acl, seeded_rng(0), n_maps=n_maps)
    return [(example.x_ref, rss(ifft2c(k))) for example, k in zip(sn, volume.kspace.data)]


def check_finetuning(model, setup, cfg, progress=False):
    """
    Finetunes model on a separate held-out volume and measures the summed
    data misfit ||A x - y||^2 over the finetuned slices before and after.

    Returns:
        tuple: (finetuned model, misfit before, misfit after).
    """
    _, measured = _measure(setup, setup.held_out_slices, STREAM_HELD_OUT_DATA, STREAM_HELD_OUT_MASK)
    sens = estimate_slice_sensitivities(measured, cfg.n_maps)
    indices = finetune_slices(measured, cfg.finetune_slices)
    before = _volume_misfit(model, measured, sens, indices)
    tuned = finetune(model, measured, cfg, sens=sens, progress=progress)
    after = _volume_misfit(tuned, measured, sens, indices)
    logger.info("held-out finetuning over %d slices: data misfit %.6g -> %.6g", len(indices), before, after)
    return tuned, before, after


def run_desk_experiment(setup=None, progress=False):
    """
    Trains each model of the zoo on simulated slices, finetunes GD-SN, trains
    the style-transfer layer, builds the ensemble and scores every
    reconstruction against the fully sampled RSS truth.

    Model outputs get their background replaced by the scaled noise level of
    the undersampled RSS before they are ensembled and scored; foreground masks
    come from the zero-filled images, which are scored as measured.

    Returns:
        DeskResult: metrics table (evalens report), test images by name,
        foreground masks, trained models, training logs, STL weights and the
        held-out finetuning data misfit before and after.
    """
    setup = setup or DeskSetup()
    spec = _phantom_spec(setup)
    train_volume = make_phantom_volume(spec, setup.train_slices, seeded_rng(setup.seed, STREAM_TRAIN_DATA))
    test_volume, measured = _measure(setup, setup.test_slices, STREAM_TEST_DATA, STREAM_TEST_MASK)
    reference = rss(test_volume.coil_images.transpose(1, 0, 2, 3))
    test_sens = estimate_slice_sensitivities(measured, setup.run.n_maps)

    baseline = np.stack([zero_filled("PCN", y, measured.mask) for y in measured.data])
    masks = np.stack([foreground_mask(image, setup.threshold_frac).pixels for image in baseline])

    def finish(volume):
        return replace_volume_background(volume, measured, setup.threshold_frac, setup.noise_patch, masks)

    raw = {}
    models = {}
    logs = {}
    for name in setup.models:
        variant, kind = ZOO[name]
        cfg = replace(setup.run, variant=variant, dc_kind=kind, seed=setup.seed)
        examples = build_examples(train_volume, variant, setup.r, setup.acl,
                                  seeded_rng(setup.seed, STREAM_EXAMPLES), n_maps=cfg.n_maps,
                                  threshold_frac=setup.threshold_frac)
        model = UnrolledModel.from_config(cfg, setup.coils, seeded_rng(setup.seed, STREAM_INIT))
        model, log = train(model, examples, cfg, progress=progress)
        logger.info("%s trained: epoch loss %.6f -> %.6f", name,
                    log[log.epoch == 1].loss.mean(), log[log.epoch == cfg.epochs].loss.mean())
        models[name] = model
        logs[name] = log
        raw[name] = reconstruct_volume(model, measured, test_sens if variant == "SN" else None)

    misfit_before = misfit_after = float("nan")
    if "GD-SN" in models:
        cfg = replace(setup.run, variant="SN", dc_kind="GD", seed=setup.seed)
        _, misfit_before, misfit_after = check_finetuning(models["GD-SN"], setup, cfg, progress)
        tuned = finetune(models["GD-SN"], measured, cfg, sens=test_sens, progress=progress)
        models[FINETUNED] = tuned
        raw[FINETUNED] = reconstruct_volume(tuned, measured, test_sens)

    stl = None
    sn_rows = [n for n in SN_FAMILY + (FINETUNED,) if n in raw]
    if sn_rows:
        stl = stl_train(stl_pairs(train_volume, setup.acl, setup.run.n_maps), replace(setup.run, seed=setup.seed),
                        progress=progress)
        for name in sn_rows:
            raw[name + STL_SUFFIX] = np.stack([stl_apply(stl, image) for image in raw[name]])

    images = {ZERO_FILLED: baseline}
    images.update((name, finish(volume)) for name, volume in raw.items())

    if all(n in images for n in SN_FAMILY + ("PM-PCN", FINETUNED)):
        slices = []
        for s in range(setup.test_slices):
            slices.append(ensemble(EnsembleInputs.from_reconstructions(
                [images[n][s] for n in SN_FAMILY], images["PM-PCN"][s], images[FINETUNED][s], masks[s])))
        images[SIGMA_NET] = np.stack(slices)

    report = metrics_report({name: (volume, reference) for name, volume in images.items()}, setup.run.ssim_window)
    return DeskResult(report, images, reference, masks, models, logs, stl, misfit_before, misfit_after)
