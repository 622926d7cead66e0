"""Small residual-style convolutional denoiser with a hand-written reverse pass.

Complex channels are carried as real feature planes: C complex channels
become 2C planes ordered [Re x_0 .. Re x_{C-1}, Im x_0 .. Im x_{C-1}].
Every layer is a 3x3 zero-padded cross-correlation; all but the last are
followed by a ReLU.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .core import BadMagic, HeaderMismatch, InvalidPlan, NonFiniteData, ShapeMismatch, StaleTape, TruncatedFile

PARAMS_MAGIC = b"SGNP"
PARAMS_VERSION = 1
_PLAN_HEADER = struct.Struct("<4sIIIII")
KERNEL = 3


@dataclass(frozen=True)
class NetPlan:
    in_planes: int
    out_planes: int
    hidden: int = 16
    layers: int = 3

    def __post_init__(self):
        if self.layers < 1:
            raise InvalidPlan(f"a plan needs at least one layer, got {self.layers}")
        if self.in_planes < 1 or self.out_planes < 1 or self.hidden < 1:
            raise InvalidPlan(f"plan widths must be positive: {self}")

    @classmethod
    def for_channels(cls, channels, layers=3, features=16):
        """Plan for C complex channels in and out."""
        return cls(2 * channels, 2 * channels, features, layers)

    def widths(self):
        return [self.in_planes] + [self.hidden] * (self.layers - 1) + [self.out_planes]


class DenoiserParams:
    """
    Kernels of shape (3, 3, C_in, C_out) and biases of shape (C_out,) per layer.

    generation counts in-place updates; tapes recorded before an update are stale.
    """

    def __init__(self, plan, kernels, biases):
        self.plan = plan
        self.kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.generation = 0
        widths = plan.widths()
        if len(self.kernels) != plan.layers or len(self.biases) != plan.layers:
            raise InvalidPlan(f"expected {plan.layers} layers, got {len(self.kernels)} kernels")
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            if k.shape != (KERNEL, KERNEL, widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise InvalidPlan(f"layer {i} has kernel {k.shape} and bias {b.shape}, plan says "
                                  f"{widths[i]} -> {widths[i + 1]}")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
                raise NonFiniteData(f"layer {i} parameters contain NaN or Inf")

    def arrays(self):
        """Parameter arrays in a fixed order: kernel, bias per layer."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def touch(self):
        self.generation += 1

    def copy(self):
        return DenoiserParams(self.plan, [k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, plan):
        widths = plan.widths()
        kernels = [np.zeros((KERNEL, KERNEL, widths[i], widths[i + 1])) for i in range(plan.layers)]
        biases = [np.zeros(widths[i + 1]) for i in range(plan.layers)]
        return cls(plan, kernels, biases)

    def to_bytes(self):
        p = self.plan
        header = _PLAN_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, p.in_planes, p.out_planes, p.hidden, p.layers)
        return header + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())

    @classmethod
    def from_bytes(cls, blob, exact=True):
        """
        Decodes a parameter block. With exact=False trailing bytes are allowed
        and the number of consumed bytes is returned alongside.
        """
        if len(blob) < _PLAN_HEADER.size:
            raise TruncatedFile(f"parameter header needs {_PLAN_HEADER.size} bytes, got {len(blob)}")
        magic, version, in_planes, out_planes, hidden, layers = _PLAN_HEADER.unpack_from(blob)
        if magic != PARAMS_MAGIC:
            raise BadMagic(f"expected {PARAMS_MAGIC!r}, got {magic!r}")
        if version != PARAMS_VERSION:
            raise HeaderMismatch(f"unsupported parameter version {version}")
        plan = NetPlan(in_planes, out_planes, hidden, layers)
        widths = plan.widths()
        shapes = []
        for i in range(layers):
            shapes.append((KERNEL, KERNEL, widths[i], widths[i + 1]))
            shapes.append((widths[i + 1],))
        needed = _PLAN_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
        if len(blob) < needed:
            raise TruncatedFile(f"parameter block needs {needed} bytes, got {len(blob)}")
        if exact and len(blob) != needed:
            raise HeaderMismatch(f"{len(blob) - needed} trailing bytes after parameter block")
        offset = _PLAN_HEADER.size
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
            offset += 8 * count
        params = cls(plan, arrays[0::2], arrays[1::2])
        return params if exact else (params, offset)


def init_params(plan, rng):
    """
    Glorot-uniform kernels, zero biases, final layer scaled by 0.1 so the
    initial denoiser output is small.
    """
    if not isinstance(plan, NetPlan):
        raise InvalidPlan(f"expected a NetPlan, got {type(plan).__name__}")
    widths = plan.widths()
    kernels, biases = [], []
    for i in range(plan.layers):
        fan_in = KERNEL * KERNEL * widths[i]
        fan_out = KERNEL * KERNEL * widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        kernels.append(rng.uniform(-limit, limit, size=(KERNEL, KERNEL, widths[i], widths[i + 1])))
        biases.append(np.zeros(widths[i + 1]))
    kernels[-1] *= 0.1
    return DenoiserParams(plan, kernels, biases)


def conv2d(planes, kernel, bias):
    """3x3 zero-padded cross-correlation of (C_in, H, W) planes."""
    _, height, width = planes.shape
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias[:, None, None], (bias.size, height, width)).copy()
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            out += np.tensordot(kernel[dy, dx], padded[:, dy:dy + height, dx:dx + width], axes=([0], [0]))
    return out


def conv2d_backward(planes, kernel, grad_out):
    """Gradients of conv2d w.r.t. kernel, bias and input planes."""
    _, height, width = planes.shape
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)))
    grad_kernel = np.empty_like(kernel)
    grad_padded = np.zeros_like(padded)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            window = padded[:, dy:dy + height, dx:dx + width]
            grad_kernel[dy, dx] = np.tensordot(window, grad_out, axes=([1, 2], [1, 2]))
            grad_padded[:, dy:dy + height, dx:dx + width] += np.tensordot(kernel[dy, dx], grad_out, axes=([1], [0]))
    return grad_kernel, grad_out.sum(axis=(1, 2)), grad_padded[:, 1:-1, 1:-1]


@dataclass
class NetTape:
    params: DenoiserParams
    generation: int
    inputs: list
    active: list


def forward_planes(params, planes):
    """Runs the network on real planes (C_in, H, W); returns (planes out, tape)."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3 or planes.shape[0] != params.plan.in_planes:
        raise ShapeMismatch(f"network expects {params.plan.in_planes} input planes, got shape {planes.shape}")
    inputs, active = [], []
    h = planes
    last = params.plan.layers - 1
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        inputs.append(h)
        h = conv2d(h, k, b)
        if i < last:
            on = h > 0
            active.append(on)
            h = h * on
    return h, NetTape(params, params.generation, inputs, active)


def backward_planes(tape, grad_out):
    """Reverse pass of forward_planes; returns (parameter gradients, input-plane gradient)."""
    params = tape.params
    if tape.generation != params.generation:
        raise StaleTape(f"tape recorded at generation {tape.generation}, parameters are at {params.generation}")
    grad = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * (2 * params.plan.layers)
    for i in reversed(range(params.plan.layers)):
        if i < params.plan.layers - 1:
            grad = grad * tape.active[i]
        gk, gb, grad = conv2d_backward(tape.inputs[i], params.kernels[i], grad)
        grads[2 * i], grads[2 * i + 1] = gk, gb
    return grads, grad


def to_planes(x):
    return np.concatenate([x.real, x.imag])


def from_planes(planes):
    half = planes.shape[0] // 2
    return planes[:half] + 1j * planes[half:]


def denoise_forward(params, x):
    """
    Evaluates f_theta on a complex (C, H, W) image.

    Returns:
        tuple: (complex output of the same shape, tape for denoise_backward).
    """
    x = np.asarray(x)
    if x.ndim != 3 or 2 * x.shape[0] != params.plan.in_planes or params.plan.out_planes != params.plan.in_planes:
        raise ShapeMismatch(f"denoiser plan {params.plan.in_planes}->{params.plan.out_planes} planes "
                            f"does not fit input of shape {x.shape}")
    out, tape = forward_planes(params, to_planes(x))
    return from_planes(out), tape


def denoise_backward(tape, grad_out):
    """Returns (parameter gradients aligned with params.arrays(), complex input gradient)."""
    grads, grad_planes = backward_planes(tape, to_planes(np.asarray(grad_out)))
    return grads, from_planes(grad_planes)
