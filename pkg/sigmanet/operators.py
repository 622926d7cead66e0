"""Centered Fourier transforms and the SN / PCN forward operators."""
import numpy as np

from .core import SensitivitySet, ShapeMismatch, check_multichannel

AXES = (-2, -1)


def _require_even(shape):
    if any(n % 2 for n in shape):
        raise ShapeMismatch(f"centered transforms need even dimensions, got {tuple(shape)}")


def fft2c(img):
    """Centered orthonormal 2-D DFT over the last two axes."""
    img = np.asarray(img)
    _require_even(img.shape[-2:])
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img, axes=AXES), norm="ortho"), axes=AXES)


def ifft2c(kspace):
    """Exact inverse of fft2c."""
    kspace = np.asarray(kspace)
    _require_even(kspace.shape[-2:])
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace, axes=AXES), norm="ortho"), axes=AXES)


def fft1c(data, axis=-1):
    """Centered orthonormal 1-D DFT along one axis."""
    data = np.asarray(data)
    _require_even((data.shape[axis],))
    return np.fft.fftshift(np.fft.fft(np.fft.ifftshift(data, axes=axis), axis=axis, norm="ortho"), axes=axis)


def ifft1c(data, axis=-1):
    data = np.asarray(data)
    _require_even((data.shape[axis],))
    return np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(data, axes=axis), axis=axis, norm="ortho"), axes=axis)


def rss(x):
    """Root-sum-of-squares over the channel axis of a (C, H, W) image."""
    x = np.asarray(x)
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=0))


def inner(a, b):
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return np.vdot(a, b)


class ForwardOperator:
    """
    Masked multi-coil Fourier operator A.

    SN:  (A x)_q = M F (sum_m s_{m,q} x_m)
    PCN: (A x)_q = M F x_q

    Args:
        kind (str): "SN" or "PCN".
        mask (SamplingMask): PE line pattern.
        sens (SensitivitySet or np.ndarray, optional): maps (N_maps, Q, H, W);
            required for SN, ignored for PCN.
        coils (int, optional): coil count for PCN.
        shape (tuple, optional): image shape for PCN.
    """

    def __init__(self, kind, mask, sens=None, coils=None, shape=None):
        if kind not in ("SN", "PCN"):
            raise ValueError(f"unknown operator kind {kind!r}")
        self.kind = kind
        self.mask = mask
        self._grid = mask.grid()
        if kind == "SN":
            if sens is None:
                raise ShapeMismatch("SN operator requires sensitivity maps")
            maps = sens.maps if isinstance(sens, SensitivitySet) else np.asarray(sens, dtype=np.complex128)
            if maps.ndim != 4:
                raise ShapeMismatch(f"sensitivity maps must have shape (N_maps, Q, H, W), got {maps.shape}")
            self.sens = maps
            self.channels = maps.shape[0]
            self.coils = maps.shape[1]
            self.shape = tuple(maps.shape[2:])
        else:
            if coils is None or shape is None:
                raise ShapeMismatch("PCN operator requires coil count and image shape")
            self.sens = None
            self.channels = coils
            self.coils = coils
            self.shape = tuple(shape)
        if self.shape[0] != mask.pe_lines:
            raise ShapeMismatch(f"mask covers {mask.pe_lines} PE lines, image has {self.shape[0]}")
        _require_even(self.shape)

    @classmethod
    def for_data(cls, kind, mask, y, sens=None):
        """Builds the operator matching measured k-space y of shape (Q, H, W)."""
        y = np.asarray(y)
        return cls(kind, mask, sens=sens, coils=y.shape[0], shape=y.shape[1:])

    def coil_project(self, x):
        """Image channels -> per-coil images."""
        if self.kind == "SN":
            return np.einsum("mqhw,mhw->qhw", self.sens, x)
        return x

    def coil_combine(self, coil_images):
        """Adjoint of coil_project."""
        if self.kind == "SN":
            return np.einsum("mqhw,qhw->mhw", self.sens.conj(), coil_images)
        return coil_images

    def apply_mask(self, kspace):
        return kspace * self._grid

    def forward(self, x):
        x = check_multichannel(x, self.channels, self.shape, name="operator input")
        return self.apply_mask(fft2c(self.coil_project(x)))

    def adjoint(self, kspace):
        kspace = check_multichannel(kspace, self.coils, self.shape, name="k-space")
        return self.coil_combine(ifft2c(self.apply_mask(kspace)))

    def normal(self, x):
        """A^H A x."""
        return self.adjoint(self.forward(x))


def forward(op, x):
    return op.forward(x)


def adjoint(op, kspace):
    return op.adjoint(kspace)
