"""Losses, optimizers, supervised training, per-volume finetuning and the style-transfer layer."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from .core import (FINETUNE_MODES, OPTIMIZERS, EmptyMask, ForegroundMask, InvalidParams, NonFiniteLoss,
                   PatchTooLarge, ShapeMismatch, seeded_rng)
from .net import NetPlan, backward_planes, forward_planes, init_params
from .operators import fft1c, ifft1c, rss
from .unrolled import final_image, recon_backward, reconstruct

logger = logging.getLogger(__name__)

K1 = 0.01
K2 = 0.03
DEFAULT_PATCH_FE = 96
RMSPROP_DECAY = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
EPS = 1e-8

# RNG streams derived from RunConfig.seed
STREAM_TRAIN = 11
STREAM_STL = 12

TRAIN_LOG_COLUMNS = ["epoch", "example", "loss", "ssim", "l1", "lr"]


@dataclass(frozen=True)
class LossConfig:
    lambda_l1: float = 1e-3
    window: int = 7
    alpha: float = 1.0
    beta: float = 0.008
    finetune_mode: str = "dissimilarity-hinge"

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.alpha <= 0 or self.beta <= 0:
            raise InvalidParams("loss weights must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidParams(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise InvalidParams(f"finetune_mode must be one of {FINETUNE_MODES}, got {self.finetune_mode!r}")

    @classmethod
    def from_run(cls, cfg):
        return cls(cfg.lambda_l1, cfg.ssim_window, cfg.alpha, cfg.beta, cfg.finetune_mode)


def _box(img, window):
    """Means of every window x window block that fits inside the image."""
    half = window // 2
    means = ndimage.uniform_filter(img, size=window, mode="constant")
    return means[half:img.shape[0] - half, half:img.shape[1] - half]


def _box_adjoint(grad, shape, window):
    """Spreads each window value evenly back over its window x window pixels."""
    half = window // 2
    centers = np.zeros(shape)
    centers[half:shape[0] - half, half:shape[1] - half] = grad
    return ndimage.uniform_filter(centers, size=window, mode="constant")


def fit_window(window, shape):
    """Largest odd window side <= window that fits an image of the given shape."""
    side = min(window, *shape)
    return side if side % 2 else side - 1


def _mask_pixels(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    pixels = mask.pixels if isinstance(mask, ForegroundMask) else np.asarray(mask, dtype=bool)
    if pixels.shape != shape:
        raise ShapeMismatch(f"mask shape {pixels.shape} != image shape {shape}")
    return pixels


def ssim(a, b, mask, data_range, window=7):
    """
    Mean SSIM over the uniform windows whose center pixel is masked.

    Args:
        a (np.ndarray): real image, differentiated.
        b (np.ndarray): real reference image of the same shape.
        mask (ForegroundMask or np.ndarray or None): window centers to average; None = all.
        data_range (float): L in C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
        window (int): odd window side.

    Returns:
        tuple: (score, gradient of the score w.r.t. a).

    Raises:
        EmptyMask: if no window center is masked.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"SSIM inputs must be matching 2-D images, got {a.shape} and {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeMismatch(f"image {a.shape} is smaller than the {window}x{window} window")
    if not data_range > 0:
        raise InvalidParams(f"data_range must be > 0, got {data_range}")
    pixels = _mask_pixels(mask, a.shape)
    half = window // 2
    centers = pixels[half:a.shape[0] - half, half:a.shape[1] - half]
    count = int(centers.sum())
    if count == 0:
        raise EmptyMask("no SSIM window center lies inside the mask")

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    n = window ** 2
    cov_norm = n / (n - 1)
    mu_a = _box(a, window)
    mu_b = _box(b, window)
    var_a = cov_norm * (_box(a * a, window) - mu_a ** 2)
    var_b = cov_norm * (_box(b * b, window) - mu_b ** 2)
    cov = cov_norm * (_box(a * b, window) - mu_a * mu_b)
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a ** 2 + mu_b ** 2 + c1
    b2 = var_a + var_b + c2
    s_map = a1 * a2 / (b1 * b2)
    weights = centers / count
    score = float(np.sum(s_map * weights))

    # Derivatives w.r.t. the window moments mean(a), mean(a^2), mean(ab)
    d_mu = 2 * mu_b * (a2 - cov_norm * a1) / (b1 * b2) - s_map * 2 * mu_a * (1 / b1 - cov_norm / b2)
    d_aa = -s_map * cov_norm / b2
    d_ab = 2 * cov_norm * a1 / (b1 * b2)
    grad = (_box_adjoint(weights * d_mu, a.shape, window)
            + 2 * a * _box_adjoint(weights * d_aa, a.shape, window)
            + b * _box_adjoint(weights * d_ab, a.shape, window))
    return score, grad


def _rss_backward(x, grad_r):
    """Chains a gradient on rss(x) back to the complex channels of x."""
    r = rss(x)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, grad_r / safe, 0.0)[None] * x


def base_loss_terms(x_rec, x_ref, mask, cfg, data_range):
    """Returns (value, gradient, ssim score, l1 term) of the supervised loss."""
    pixels = _mask_pixels(mask, np.shape(x_ref))
    m = pixels.astype(np.float64)
    a = m * rss(x_rec)
    b = m * np.asarray(x_ref, dtype=np.float64)
    score, grad_s = ssim(a, b, pixels, data_range, cfg.window)
    diff = a - b
    l1 = float(np.mean(np.abs(diff)))
    value = -score + cfg.lambda_l1 * l1
    grad_r = m * (-grad_s + cfg.lambda_l1 * np.sign(diff) / diff.size)
    return value, _rss_backward(x_rec, grad_r), score, l1


def base_loss(x_rec, x_ref, mask, cfg, data_range):
    """
    -SSIM(m * rss(x_rec), m * x_ref) + lambda * mean|m * rss(x_rec) - m * x_ref|.

    Lower is better. Returns (value, gradient w.r.t. x_rec).
    """
    value, grad, _, _ = base_loss_terms(x_rec, x_ref, mask, cfg, data_range)
    return value, grad


@dataclass
class OptimizerState:
    """
    RMSProp or ADAM state over a fixed list of real parameter arrays.

    lr is multiplied by decay_factor every decay_every epochs; decay_every=0
    keeps it constant.
    """
    kind: str
    lr: float
    shapes: list
    decay_every: int = 15
    decay_factor: float = 0.5
    steps: int = 0
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise InvalidParams(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr < 0:
            raise InvalidParams(f"learning rate must be >= 0, got {self.lr}")
        self.first = [np.zeros(s) for s in self.shapes]
        self.second = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, kind, lr, params, decay_every=15, decay_factor=0.5):
        return cls(kind, lr, [p.shape for p in params], decay_every, decay_factor)

    def lr_at(self, epoch):
        """Learning rate of a 1-based epoch."""
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** ((epoch - 1) // self.decay_every)

    def step(self, params, grads, lr):
        """Updates params in place."""
        if len(params) != len(self.shapes) or len(grads) != len(params):
            raise ShapeMismatch(f"optimizer tracks {len(self.shapes)} arrays, got {len(params)} params "
                                f"and {len(grads)} gradients")
        self.steps += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.shapes[i] or np.shape(g) != self.shapes[i]:
                raise ShapeMismatch(f"parameter {i} has shape {p.shape}, expected {self.shapes[i]}")
            if self.kind == "RMSProp":
                rmsprop_update(p, g, self.second[i], lr)
            else:
                adam_update(p, g, self.first[i], self.second[i], lr, self.steps)


def rmsprop_update(param, grad, sq, lr, decay=RMSPROP_DECAY, eps=EPS):
    sq *= decay
    sq += (1 - decay) * grad ** 2
    param -= lr * grad / (np.sqrt(sq) + eps)


def adam_update(param, grad, m, v, lr, t, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=EPS):
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad ** 2
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def fe_patch(y, sens, x_ref, m, patch_fe=DEFAULT_PATCH_FE, rng=None, start=None):
    """
    Crops a band of patch_fe columns along the frequency-encoding direction.

    k-space is transformed to image space along FE only, cropped, and
    transformed back, so PE sampling is untouched. sens, x_ref and m are
    cropped to the same band; sens and m may be None.

    Args:
        y (np.ndarray): per-coil k-space (Q, PE, FE).
        sens (np.ndarray or None): maps (N_maps, Q, PE, FE).
        x_ref (np.ndarray): reference image (PE, FE).
        m (np.ndarray or None): foreground mask (PE, FE).
        patch_fe (int): even band width.
        rng (np.random.Generator, optional): draws the band start.
        start (int, optional): fixed band start instead of a random draw.

    Returns:
        tuple: (y, sens, x_ref, m) restricted to the band.
    """
    y = np.asarray(y, dtype=np.complex128)
    width = y.shape[-1]
    if patch_fe > width:
        raise PatchTooLarge(f"patch of {patch_fe} FE columns exceeds width {width}")
    if patch_fe < 4 or patch_fe % 2:
        raise InvalidParams(f"patch_fe must be even and >= 4, got {patch_fe}")
    if start is None:
        start = 0 if rng is None else int(rng.integers(0, width - patch_fe + 1))
    if not 0 <= start <= width - patch_fe:
        raise PatchTooLarge(f"band [{start}, {start + patch_fe}) leaves FE width {width}")
    band = slice(start, start + patch_fe)
    y_patch = fft1c(ifft1c(y, axis=-1)[..., band], axis=-1)
    sens_patch = None if sens is None else np.asarray(sens)[..., band]
    m_patch = None if m is None else np.asarray(m)[..., band]
    return y_patch, sens_patch, np.asarray(x_ref)[..., band], m_patch


def patch_example(example, patch_fe, rng):
    y, sens, x_ref, m = fe_patch(example.y, example.sens, example.x_ref, example.foreground, patch_fe, rng)
    return replace(example, y=y, sens=sens, x_ref=x_ref, foreground=m)


def train(model, dataset, cfg, log_path=None, progress=False):
    """
    Supervised training with batch size 1.

    Every epoch visits each example once in a seeded random order; the
    optimizer steps after each example. The model is updated in place.

    Args:
        model (UnrolledModel): model to train.
        dataset (list[TrainingExample]): supervised slices.
        cfg (RunConfig): optimizer, schedule, loss weights and patching.
        log_path (str, optional): CSV destination of the per-example log.
        progress (bool): show a tqdm bar over epochs.

    Returns:
        tuple: (model, pandas.DataFrame with columns epoch,example,loss,ssim,l1,lr).

    Raises:
        NonFiniteLoss: if a loss value is NaN or Inf.
    """
    if not dataset:
        raise InvalidParams("training needs at least one example")
    loss_cfg = LossConfig.from_run(cfg)
    rng = seeded_rng(cfg.seed, STREAM_TRAIN)
    optimizer = OptimizerState.for_params(cfg.optimizer, cfg.lr, model.parameters(),
                                          cfg.lr_decay_every, cfg.lr_decay_factor)
    rows = []
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress):
        lr = optimizer.lr_at(epoch)
        for index in rng.permutation(len(dataset)):
            example = dataset[index]
            if 0 < cfg.patch_fe < example.y.shape[-1]:
                example = patch_example(example, cfg.patch_fe, rng)
            x_t, tape = reconstruct(model, example.y, example.mask, example.sens)
            value, grad, score, l1 = base_loss_terms(x_t, example.x_ref, example.foreground, loss_cfg,
                                                     example.data_range)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, example {index}")
            grads = recon_backward(model, tape, grad)
            optimizer.step(model.parameters(), grads, lr)
            model.touch()
            rows.append((epoch, int(index), value, score, l1, lr))
        epoch_loss = np.mean([r[2] for r in rows[-len(dataset):]])
        logger.info("epoch %d/%d: mean loss %.6f, lr %.3g", epoch, cfg.epochs, epoch_loss, lr)
    log = pd.DataFrame(rows, columns=TRAIN_LOG_COLUMNS)
    if log_path:
        log.to_csv(log_path, index=False)
        logger.info("training log written to %s", log_path)
    return model, log


def data_misfit(model, y, mask, sens=None):
    """||A x(theta) - y||^2 of the model's reconstruction."""
    x_t, _ = reconstruct(model, y, mask, sens)
    residual = model.operator(mask, y, sens).forward(x_t) - y
    return float(np.vdot(residual, residual).real)


def finetune_slices(volume, count):
    """Indices of the central `count` slices of a volume."""
    count = min(count, volume.n_slices)
    start = (volume.n_slices - count) // 2
    return list(range(start, start + count))


def _hinge(score, cfg):
    """Hinge term and its derivative w.r.t. the SSIM score."""
    if cfg.finetune_mode == "literal":
        h = max(score - cfg.beta, 0.0)
        return 0.5 * cfg.alpha * h ** 2, cfg.alpha * h
    h = max(1.0 - score - cfg.beta, 0.0)
    return 0.5 * cfg.alpha * h ** 2, -cfg.alpha * h


def finetune(model, volume, cfg, sens=None, log_path=None, progress=False):
    """
    Semi-supervised adaptation to one k-space volume.

    The priors are the model's own reconstructions before adaptation. Every
    epoch visits the selected slices in order and takes one ADAM step per
    slice on 1/2 ||A x - y||^2 plus the SSIM hinge against that slice's prior,
    at a constant rate.

    Args:
        model (UnrolledModel): trained model; left untouched.
        volume (KSpaceVolume): undersampled k-space of the volume.
        cfg (RunConfig): finetune_epochs, finetune_lr, finetune_slices, alpha, beta, finetune_mode.
        sens (SensitivitySet or list, optional): one set for the volume or one per slice (SN only).
        log_path (str, optional): CSV destination of the per-epoch log.
        progress (bool): show a tqdm bar over epochs.

    Returns:
        UnrolledModel: adapted copy.

    Raises:
        NonFiniteLoss: if the objective becomes NaN or Inf.
    """
    loss_cfg = LossConfig.from_run(cfg)
    indices = finetune_slices(volume, cfg.finetune_slices)
    slices = [(volume.data[s], sens[s] if isinstance(sens, list) else sens) for s in indices]
    priors = [final_image(reconstruct(model, y, volume.mask, s)[0]) for y, s in slices]
    data_range = max(float(p.max()) for p in priors)
    if not data_range > 0:
        raise NonFiniteLoss("prior reconstructions are all zero")

    tuned = model.copy()
    optimizer = OptimizerState.for_params("ADAM", cfg.finetune_lr, tuned.parameters(), decay_every=0)
    rows = []
    for epoch in tqdm(range(1, cfg.finetune_epochs + 1), desc="finetune", disable=not progress):
        data_total = hinge_total = 0.0
        for (y, s), prior in zip(slices, priors):
            x_t, tape = reconstruct(tuned, y, volume.mask, s)
            op = tuned.operator(volume.mask, y, s)
            residual = op.forward(x_t) - y
            data_term = 0.5 * float(np.vdot(residual, residual).real)
            score, grad_s = ssim(rss(x_t), prior, None, data_range, loss_cfg.window)
            hinge_term, d_hinge = _hinge(score, loss_cfg)
            if not np.isfinite(data_term + hinge_term):
                raise NonFiniteLoss(f"finetuning loss became {data_term + hinge_term} at epoch {epoch}")
            grad = op.adjoint(residual) + _rss_backward(x_t, d_hinge * grad_s)
            optimizer.step(tuned.parameters(), recon_backward(tuned, tape, grad), cfg.finetune_lr)
            tuned.touch()
            data_total += data_term
            hinge_total += hinge_term
        rows.append((epoch, data_total + hinge_total, data_total, hinge_total, cfg.finetune_lr))
        logger.info("finetune epoch %d/%d: loss %.6f (data %.6f, hinge %.6f)",
                    epoch, cfg.finetune_epochs, data_total + hinge_total, data_total, hinge_total)
    if log_path:
        pd.DataFrame(rows, columns=["epoch", "loss", "data", "hinge", "lr"]).to_csv(log_path, index=False)
        logger.info("finetuning log written to %s", log_path)
    return tuned


def stl_plan(features=32, layers=3):
    return NetPlan(1, 1, features, layers)


def stl_apply(params, image):
    """Runs the style-transfer layer on one real magnitude image."""
    out, _ = forward_planes(params, np.asarray(image, dtype=np.float64)[None])
    return out[0]


def stl_train(pairs, cfg, params=None, progress=False):
    """
    Trains the style-transfer layer to map sensitivity-combined magnitudes
    to RSS magnitudes by maximizing SSIM.

    Args:
        pairs (list): (input image, target image) real arrays of equal shape.
        cfg (RunConfig): stl_features, stl_epochs, stl_lr, ssim_window, seed.
        params (DenoiserParams, optional): starting weights; Glorot init otherwise.

    Returns:
        DenoiserParams: trained weights (1 plane in, 1 plane out).
    """
    if not pairs:
        raise InvalidParams("STL training needs at least one image pair")
    for source, target in pairs:
        if np.shape(source) != np.shape(target):
            raise ShapeMismatch(f"STL pair shapes differ: {np.shape(source)} vs {np.shape(target)}")
    if params is None:
        params = init_params(stl_plan(cfg.stl_features), seeded_rng(cfg.seed, STREAM_STL))
    data_range = max(float(np.max(t)) for _, t in pairs)
    optimizer = OptimizerState.for_params("RMSProp", cfg.stl_lr, params.arrays(), decay_every=0)
    for epoch in tqdm(range(1, cfg.stl_epochs + 1), desc="stl", disable=not progress):
        scores = []
        for source, target in pairs:
            out, tape = forward_planes(params, np.asarray(source, dtype=np.float64)[None])
            score, grad_s = ssim(out[0], target, None, data_range, cfg.ssim_window)
            if not np.isfinite(score):
                raise NonFiniteLoss(f"STL SSIM became {score} at epoch {epoch}")
            grads, _ = backward_planes(tape, -grad_s[None])
            optimizer.step(params.arrays(), grads, cfg.stl_lr)
            params.touch()
            scores.append(score)
        logger.info("stl epoch %d/%d: mean SSIM %.6f", epoch, cfg.stl_epochs, np.mean(scores))
    return params
