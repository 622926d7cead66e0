"""T-step unrolled reconstruction: x^{t+1/2} = x^t - f_t(x^t), x^{t+1} = g(x^{t+1/2}, y)."""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (VARIANTS, BadMagic, HeaderMismatch, InvalidParams, SensitivitySet, ShapeMismatch, StaleTape,
                   TruncatedFile, DC_KINDS)
from .dc import DcConfig, dc_backward, dc_forward
from .net import DenoiserParams, NetPlan, denoise_backward, denoise_forward, init_params
from .operators import ForwardOperator, rss

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SGNM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIIIIIddd")
FLAG_SHARED = 1
FLAG_TRAINABLE_DC = 2
# Lower bound kept on trainable DC scalars after each update
MIN_DC_WEIGHT = 1e-6


class UnrolledModel:
    """
    Per-step denoiser blocks plus DC configuration.

    Args:
        variant (str): "SN" or "PCN".
        blocks (list): DenoiserParams, one per step or a single shared block.
        dc (DcConfig): data-consistency layer.
        steps (int): number of unrolled steps T.
        dc_weights (np.ndarray, optional): per-step eta (GD) or lambda (PM/VS).
        trainable_dc (bool): whether dc_weights are trained.
    """

    def __init__(self, variant, blocks, dc, steps, dc_weights=None, trainable_dc=False):
        if variant not in VARIANTS:
            raise InvalidParams(f"variant must be one of {VARIANTS}, got {variant!r}")
        if steps < 1:
            raise InvalidParams(f"steps must be >= 1, got {steps}")
        if len(blocks) not in (1, steps):
            raise InvalidParams(f"{len(blocks)} denoiser blocks for {steps} steps")
        if len({b.plan for b in blocks}) != 1:
            raise InvalidParams("all denoiser blocks must share one channel plan")
        self.variant = variant
        self.blocks = list(blocks)
        self.dc = dc
        self.steps = steps
        self.shared = len(blocks) == 1 and steps > 1
        weights = np.full(steps, dc.weight) if dc_weights is None else np.asarray(dc_weights, dtype=np.float64)
        if weights.shape != (steps,) or np.any(weights <= 0):
            raise InvalidParams(f"dc_weights must be {steps} positive values")
        self.dc_weights = weights.copy()
        self.trainable_dc = trainable_dc
        self.dc_generation = 0

    @classmethod
    def from_config(cls, cfg, coils, rng, zero=False):
        """Initializes a model for cfg; SN channels = n_maps, PCN channels = coil count."""
        channels = cfg.n_maps if cfg.variant == "SN" else coils
        plan = NetPlan.for_channels(channels, cfg.layers, cfg.features)
        count = 1 if cfg.share_weights else cfg.steps
        if zero:
            blocks = [DenoiserParams.zeros(plan) for _ in range(count)]
        else:
            blocks = [init_params(plan, rng) for _ in range(count)]
        dc = DcConfig(cfg.dc_kind, cfg.dc_eta, cfg.dc_lambda, cfg.cg_max_iter, cfg.cg_tol)
        return cls(cfg.variant, blocks, dc, cfg.steps, trainable_dc=cfg.trainable_dc)

    @property
    def plan(self):
        return self.blocks[0].plan

    @property
    def channels(self):
        return self.plan.in_planes // 2

    def block(self, t):
        return self.blocks[0] if self.shared else self.blocks[t]

    def parameters(self):
        arrays = [a for b in self.blocks for a in b.arrays()]
        if self.trainable_dc:
            arrays.append(self.dc_weights)
        return arrays

    def touch(self):
        for b in self.blocks:
            b.touch()
        self.dc_generation += 1
        if self.trainable_dc:
            np.maximum(self.dc_weights, MIN_DC_WEIGHT, out=self.dc_weights)

    def generation(self):
        return (self.dc_generation,) + tuple(b.generation for b in self.blocks)

    def copy(self):
        return UnrolledModel(self.variant, [b.copy() for b in self.blocks], self.dc, self.steps,
                             self.dc_weights.copy(), self.trainable_dc)

    def operator(self, mask, y, sens=None):
        """Binds the forward operator for one example."""
        if self.variant == "SN":
            if sens is None:
                raise ShapeMismatch("SN reconstruction requires sensitivity maps")
            op = ForwardOperator("SN", mask, sens)
        else:
            op = ForwardOperator.for_data("PCN", mask, y)
        if op.channels != self.channels:
            raise ShapeMismatch(f"model has {self.channels} channels, operator provides {op.channels}")
        return op


@dataclass
class ReconTape:
    model: UnrolledModel
    generation: tuple
    x0: np.ndarray
    steps: list


def reconstruct(model, y, mask, sens=None):
    """
    Runs the unrolled scheme from the zero-filled x^0 = A^H y.

    Args:
        model (UnrolledModel): trained or initial model.
        y (np.ndarray): masked k-space (Q, H, W).
        mask (SamplingMask): sampling pattern of y.
        sens (SensitivitySet or np.ndarray, optional): required for SN.

    Returns:
        tuple: (x^T of shape (C, H, W), ReconTape).
    """
    op = model.operator(mask, y, sens)
    x = op.adjoint(y)
    x0 = x
    records = []
    for t in range(model.steps):
        f, net_tape = denoise_forward(model.block(t), x)
        x_half = x - f
        x, ctx = dc_forward(x_half, y, op, model.dc, model.dc_weights[t])
        records.append((net_tape, ctx))
    return x, ReconTape(model, model.generation(), x0, records)


def recon_backward(model, tape, grad_xt):
    """
    Chains denoise_backward and dc_backward over all steps.

    Returns:
        list: gradients aligned with model.parameters().
    """
    if tape.model is not model or tape.generation != model.generation():
        raise StaleTape("reconstruction tape does not match the current model parameters")
    block_grads = [[np.zeros_like(a) for a in b.arrays()] for b in model.blocks]
    grad_w = np.zeros(model.steps)
    grad = np.asarray(grad_xt, dtype=np.complex128)
    for t in reversed(range(model.steps)):
        net_tape, ctx = tape.steps[t]
        grad_half, grad_w[t] = dc_backward(grad, ctx)
        param_grads, grad_x = denoise_backward(net_tape, grad_half)
        target = block_grads[0 if model.shared else t]
        for acc, g in zip(target, param_grads):
            acc -= g
        grad = grad_half - grad_x
    flat = [g for grads in block_grads for g in grads]
    if model.trainable_dc:
        flat.append(grad_w)
    return flat


def final_image(x_t):
    """RSS combination of the channels of x^T."""
    return rss(x_t)


def reconstruct_volume(model, volume, sens=None, threads=1):
    """
    Reconstructs every slice of a KSpaceVolume into RSS magnitudes (S, H, W).

    sens may be a single SensitivitySet for the whole volume or one per slice.
    """
    def sens_for(s):
        if sens is None or isinstance(sens, (SensitivitySet, np.ndarray)):
            return sens
        return sens[s]

    def run(s):
        x_t, _ = reconstruct(model, volume.data[s], volume.mask, sens_for(s))
        return final_image(x_t)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(run, range(volume.n_slices)))
    else:
        images = [run(s) for s in range(volume.n_slices)]
    return np.stack(images)


def model_to_bytes(model):
    flags = (FLAG_SHARED if model.shared else 0) | (FLAG_TRAINABLE_DC if model.trainable_dc else 0)
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, VARIANTS.index(model.variant),
                                DC_KINDS.index(model.dc.kind), model.steps, len(model.blocks), flags,
                                model.dc.cg_max_iter, model.dc.eta, model.dc.lam, model.dc.cg_tol)
    weights = np.ascontiguousarray(model.dc_weights, dtype="<f8").tobytes()
    return header + weights + b"".join(b.to_bytes() for b in model.blocks)


def model_from_bytes(blob):
    if len(blob) < _MODEL_HEADER.size:
        raise TruncatedFile(f"model header needs {_MODEL_HEADER.size} bytes, got {len(blob)}")
    (magic, version, variant, kind, steps, n_blocks, flags,
     cg_max_iter, eta, lam, cg_tol) = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise BadMagic(f"expected {MODEL_MAGIC!r}, got {magic!r}")
    if version != MODEL_VERSION or variant >= len(VARIANTS) or kind >= len(DC_KINDS):
        raise HeaderMismatch(f"unsupported model header (version {version}, variant {variant}, dc {kind})")
    offset = _MODEL_HEADER.size
    if len(blob) < offset + 8 * steps:
        raise TruncatedFile("model file ends inside the DC weights")
    weights = np.frombuffer(blob, dtype="<f8", count=steps, offset=offset).astype(np.float64)
    offset += 8 * steps
    blocks = []
    for _ in range(n_blocks):
        block, used = DenoiserParams.from_bytes(blob[offset:], exact=False)
        blocks.append(block)
        offset += used
    if offset != len(blob):
        raise HeaderMismatch(f"{len(blob) - offset} trailing bytes after model blocks")
    dc = DcConfig(DC_KINDS[kind], eta, lam, cg_max_iter, cg_tol)
    return UnrolledModel(VARIANTS[variant], blocks, dc, steps, weights, bool(flags & FLAG_TRAINABLE_DC))


def save_model(model, path):
    with open(path, "wb") as file:
        file.write(model_to_bytes(model))
    logger.info("model checkpoint written to %s", path)


def load_model(path):
    with open(path, "rb") as file:
        return model_from_bytes(file.read())


def zero_filled(variant, y, mask, sens=None):
    """RSS of the zero-filled adjoint A^H y, the unrolled scheme's x^0."""
    if variant == "SN":
        op = ForwardOperator("SN", mask, sens)
    else:
        op = ForwardOperator.for_data("PCN", mask, y)
    return rss(op.adjoint(y))
