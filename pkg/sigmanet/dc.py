"""Data-consistency layers (GD, PM, VS), conjugate gradient and their gradients."""
import logging
from dataclasses import dataclass

import numpy as np

from .core import DC_KINDS, InvalidParams, NonFiniteIterate
from .operators import fft2c, ifft2c

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DcConfig:
    kind: str = "GD"
    eta: float = 1.0
    lam: float = 0.1
    cg_max_iter: int = 10
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in DC_KINDS:
            raise InvalidParams(f"DC kind must be one of {DC_KINDS}, got {self.kind!r}")
        if self.eta <= 0 or self.lam <= 0 or self.cg_tol <= 0:
            raise InvalidParams("eta, lambda and cg_tol must be > 0")
        if self.cg_max_iter < 1:
            raise InvalidParams(f"cg_max_iter must be >= 1, got {self.cg_max_iter}")

    @property
    def weight(self):
        """Default scalar of this kind: eta for GD, lambda for PM and VS."""
        return self.eta if self.kind == "GD" else self.lam


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float


def cg_solve(apply_m, b, x0=None, max_iter=10, tol=1e-6):
    """
    Conjugate gradient for a self-adjoint positive definite M.

    Args:
        apply_m (callable): x -> M x.
        b (np.ndarray): right-hand side.
        x0 (np.ndarray, optional): warm start, zeros by default.
        max_iter (int): iteration cap.
        tol (float): stop once ||M x - b|| / ||b|| <= tol.

    Returns:
        CgResult: solution, iterations used and final relative residual.

    Raises:
        NonFiniteIterate: if an iterate stops being finite.
    """
    b = np.asarray(b, dtype=np.complex128)
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return CgResult(np.zeros_like(b), 0, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.complex128)
    r = b - apply_m(x)
    p = r.copy()
    rs = np.vdot(r, r).real
    residual = np.sqrt(rs) / b_norm
    iterations = 0
    while residual > tol and iterations < max_iter:
        mp = apply_m(p)
        curvature = np.vdot(p, mp).real
        if not np.isfinite(curvature):
            raise NonFiniteIterate(f"CG curvature became {curvature} at iteration {iterations}")
        if curvature <= 0:
            break
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * mp
        rs_new = np.vdot(r, r).real
        iterations += 1
        residual = np.sqrt(rs_new) / b_norm
        if not np.isfinite(residual):
            raise NonFiniteIterate(f"CG residual became {residual} at iteration {iterations}")
        p = r + (rs_new / rs) * p
        rs = rs_new
    if residual > tol:
        logger.debug("CG stopped after %d iterations at residual %.3e", iterations, residual)
    return CgResult(x, iterations, float(residual))


def _weight(cfg, weight):
    return cfg.weight if weight is None else float(weight)


def dc_gd(x_half, y, op, cfg, weight=None):
    """Gradient step x - eta A^H (A x - y)."""
    eta = _weight(cfg, weight)
    return x_half - eta * op.adjoint(op.forward(x_half) - y)


def _prox_system(op, lam):
    return lambda x: op.normal(x) + lam * x


def dc_pm(x_half, y, op, cfg, weight=None):
    """Proximal mapping: solves (A^H A + lam I) x = A^H y + lam x_half by CG from x_half."""
    lam = _weight(cfg, weight)
    b = op.adjoint(y) + lam * x_half
    result = cg_solve(_prox_system(op, lam), b, x0=x_half, max_iter=cfg.cg_max_iter, tol=cfg.cg_tol)
    return result.x


def dc_vs(x_half, y, op, cfg, weight=None):
    """
    Variable splitting in closed form: sampled k-space of the coil projection
    is averaged with the measurement, (lam k + y) / (1 + lam); unsampled
    locations are kept.
    """
    lam = _weight(cfg, weight)
    kspace = fft2c(op.coil_project(x_half))
    sampled = op.mask.grid()
    kspace = kspace + sampled * ((lam * kspace + y) / (1 + lam) - kspace)
    return op.coil_combine(ifft2c(kspace))


DC_LAYERS = {"GD": dc_gd, "PM": dc_pm, "VS": dc_vs}


@dataclass
class DcContext:
    """Saved forward state of one DC application."""
    kind: str
    op: object
    cfg: DcConfig
    x_half: np.ndarray
    y: np.ndarray
    weight: float
    out: np.ndarray


def dc_forward(x_half, y, op, cfg, weight=None):
    """Applies the configured DC layer and returns (output, context)."""
    weight = _weight(cfg, weight)
    out = DC_LAYERS[cfg.kind](x_half, y, op, cfg, weight)
    return out, DcContext(cfg.kind, op, cfg, x_half, y, weight, out)


def dc_backward(grad_out, ctx):
    """
    Reverse-mode pass through a DC layer.

    Returns:
        tuple: (gradient w.r.t. x_half, gradient w.r.t. the DC scalar).
    """
    op, w = ctx.op, ctx.weight
    if ctx.kind == "GD":
        grad_in = grad_out - w * op.normal(grad_out)
        residual = op.adjoint(op.forward(ctx.x_half) - ctx.y)
        grad_w = -np.vdot(grad_out, residual).real
    elif ctx.kind == "VS":
        grad_in = dc_vs(grad_out, np.zeros_like(ctx.y), op, ctx.cfg, w)
        kspace = fft2c(op.coil_project(ctx.x_half))
        direction = op.coil_combine(ifft2c(op.mask.grid() * (kspace - ctx.y))) / (1 + w) ** 2
        grad_w = np.vdot(grad_out, direction).real
    else:
        # Implicit differentiation of the prox solution
        solved = cg_solve(_prox_system(op, w), grad_out, max_iter=ctx.cfg.cg_max_iter, tol=ctx.cfg.cg_tol).x
        grad_in = w * solved
        grad_w = np.vdot(solved, ctx.x_half - ctx.out).real
    return grad_in, float(grad_w)
