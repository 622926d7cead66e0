"""Shared domain types, validation, seeded RNG and config parsing."""
import configparser
import logging
from dataclasses import dataclass, fields

import numpy as np

logger = logging.getLogger(__name__)

VARIANTS = ("SN", "PCN")
DC_KINDS = ("GD", "PM", "VS")
OPTIMIZERS = ("RMSProp", "ADAM")
FINETUNE_MODES = ("literal", "dissimilarity-hinge")

# Section name assumed for config files without a header
DEFAULT_SECTION = "sigmanet"


class SigmaNetError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeMismatch(SigmaNetError, ValueError):
    pass


class NonFiniteData(SigmaNetError, ValueError):
    pass


class MaskViolation(SigmaNetError, ValueError):
    pass


class InvalidParams(SigmaNetError, ValueError):
    pass


class InvalidSpec(SigmaNetError, ValueError):
    pass


class TooFewLines(SigmaNetError, ValueError):
    pass


class NonFiniteIterate(SigmaNetError, ArithmeticError):
    pass


class StaleTape(SigmaNetError, RuntimeError):
    pass


class InvalidPlan(SigmaNetError, ValueError):
    pass


class EmptyMask(SigmaNetError, ValueError):
    pass


class PatchTooLarge(SigmaNetError, ValueError):
    pass


class NonFiniteLoss(SigmaNetError, ArithmeticError):
    pass


class ZeroReference(SigmaNetError, ValueError):
    pass


class BadMagic(SigmaNetError, ValueError):
    pass


class TruncatedFile(SigmaNetError, ValueError):
    pass


class HeaderMismatch(SigmaNetError, ValueError):
    pass


class ConfigError(SigmaNetError, ValueError):
    pass


def check_image(img, name="image"):
    """
    Checks a single complex image (rows = PE, cols = FE).

    Returns:
        np.ndarray: the image as complex128.
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 4 or arr.shape[1] < 4:
        raise ShapeMismatch(f"{name} must be at least 4x4, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"{name} contains NaN or Inf")
    return arr.astype(np.complex128, copy=False)


def check_multichannel(x, channels=None, shape=None, name="image"):
    """
    Checks a multi-channel complex image of shape (C, H, W).

    Args:
        x: array-like of shape (C, H, W).
        channels (int, optional): required channel count.
        shape (tuple, optional): required (H, W).
        name (str): used in error messages.

    Returns:
        np.ndarray: the image as complex128.
    """
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ShapeMismatch(f"{name} must have shape (C, H, W) with C >= 1, got {arr.shape}")
    if arr.shape[1] < 4 or arr.shape[2] < 4:
        raise ShapeMismatch(f"{name} channels must be at least 4x4, got {arr.shape[1:]}")
    if channels is not None and arr.shape[0] != channels:
        raise ShapeMismatch(f"{name} has {arr.shape[0]} channels, expected {channels}")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ShapeMismatch(f"{name} has image shape {arr.shape[1:]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"{name} contains NaN or Inf")
    return arr.astype(np.complex128, copy=False)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Cartesian undersampling pattern over phase-encode lines."""
    pe_line_flags: np.ndarray
    acl_count: int
    nominal_r: float

    def __post_init__(self):
        flags = np.asarray(self.pe_line_flags, dtype=bool)
        object.__setattr__(self, "pe_line_flags", flags)
        if flags.ndim != 1 or flags.size < 1:
            raise ShapeMismatch(f"pe_line_flags must be 1-D, got shape {flags.shape}")
        if not 0 <= self.acl_count <= flags.size:
            raise InvalidParams(f"acl_count {self.acl_count} outside [0, {flags.size}]")
        if self.nominal_r < 1:
            raise InvalidParams(f"nominal_r must be >= 1, got {self.nominal_r}")
        if not flags.any():
            raise InvalidParams("sampling mask flags no lines")
        start, stop = acl_bounds(flags.size, self.acl_count)
        if not flags[start:stop].all():
            raise InvalidParams(f"central ACL block [{start}, {stop}) is not fully flagged")

    @classmethod
    def full(cls, pe_lines):
        return cls(np.ones(pe_lines, dtype=bool), pe_lines, 1.0)

    @property
    def pe_lines(self):
        return self.pe_line_flags.size

    @property
    def flagged(self):
        return int(self.pe_line_flags.sum())

    @property
    def true_r(self):
        return self.pe_lines / self.flagged

    def grid(self):
        """Mask broadcastable against (..., PE, FE) arrays."""
        return self.pe_line_flags.astype(np.float64)[:, None]

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (np.array_equal(self.pe_line_flags, other.pe_line_flags)
                and self.acl_count == other.acl_count
                and self.nominal_r == other.nominal_r)


def acl_bounds(pe_lines, acl_count):
    """Index range [start, stop) of the centered calibration block."""
    start = pe_lines // 2 - acl_count // 2
    return start, start + acl_count


@dataclass(frozen=True, eq=False)
class KSpaceVolume:
    """Per-slice, per-coil k-space of shape (S, Q, PE, FE) plus its mask."""
    data: np.ndarray
    mask: SamplingMask

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatch(f"k-space volume must have shape (S, Q, PE, FE), got {data.shape}")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))
        check_volume(self)

    @property
    def n_slices(self):
        return self.data.shape[0]

    @property
    def coil_count(self):
        return self.data.shape[1]

    @property
    def image_shape(self):
        return self.data.shape[2:]

    @property
    def slices(self):
        return [self.data[s] for s in range(self.n_slices)]


def check_volume(volume):
    data = volume.data
    if data.shape[2] != volume.mask.pe_lines:
        raise ShapeMismatch(f"mask covers {volume.mask.pe_lines} PE lines, k-space has {data.shape[2]}")
    if data.shape[2] < 4 or data.shape[3] < 4:
        raise ShapeMismatch(f"k-space slices must be at least 4x4, got {data.shape[2:]}")
    if not np.all(np.isfinite(data)):
        raise NonFiniteData("k-space volume contains NaN or Inf")
    unsampled = ~volume.mask.pe_line_flags
    if np.any(data[:, :, unsampled, :] != 0):
        raise MaskViolation("k-space has nonzero samples on unsampled PE lines")


@dataclass(frozen=True, eq=False)
class SensitivitySet:
    """Coil sensitivity maps of shape (N_maps, Q, H, W), N_maps in {1, 2}."""
    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 4 or maps.shape[0] not in (1, 2) or maps.shape[1] < 1:
            raise ShapeMismatch(f"sensitivity maps must have shape (1|2, Q, H, W), got {maps.shape}")
        maps = maps.astype(np.complex128, copy=False)
        object.__setattr__(self, "maps", maps)
        if not np.all(np.isfinite(maps)):
            raise NonFiniteData("sensitivity maps contain NaN or Inf")
        energy = sensitivity_energy(maps)
        if energy.max() > 1 + 1e-6:
            raise InvalidParams(f"sensitivity energy {energy.max():.6g} exceeds 1 + 1e-6")

    @property
    def n_maps(self):
        return self.maps.shape[0]

    @property
    def coil_count(self):
        return self.maps.shape[1]

    @property
    def image_shape(self):
        return self.maps.shape[2:]


def sensitivity_energy(maps):
    """Per-pixel sum over maps and coils of |s|^2."""
    return np.sum(np.abs(maps) ** 2, axis=(0, 1))


@dataclass(frozen=True, eq=False)
class ForegroundMask:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=bool)
        if pixels.ndim != 2:
            raise ShapeMismatch(f"foreground mask must be 2-D, got shape {pixels.shape}")
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """One supervised slice: undersampled k-space, operator inputs and reference."""
    y: np.ndarray
    mask: SamplingMask
    sens: np.ndarray
    x_ref: np.ndarray
    foreground: np.ndarray
    data_range: float


def validate(volume, sens, mask):
    """
    Checks cross-type consistency of a volume, its sensitivities and a
    foreground mask. Raises on the first violated invariant.

    Args:
        volume (KSpaceVolume): the measured k-space.
        sens (SensitivitySet or None): sensitivity maps, if any.
        mask (ForegroundMask or None): foreground mask, if any.
    """
    check_volume(volume)
    shape = tuple(volume.image_shape)
    if sens is not None:
        if sens.coil_count != volume.coil_count:
            raise ShapeMismatch(f"sensitivities have {sens.coil_count} coils, volume has {volume.coil_count}")
        if tuple(sens.image_shape) != shape:
            raise ShapeMismatch(f"sensitivity shape {tuple(sens.image_shape)} != image shape {shape}")
        if not np.all(np.isfinite(sens.maps)):
            raise NonFiniteData("sensitivity maps contain NaN or Inf")
    if mask is not None:
        if tuple(mask.shape) != shape:
            raise ShapeMismatch(f"foreground mask shape {tuple(mask.shape)} != image shape {shape}")
        if sens is not None and np.any(sensitivity_energy(sens.maps)[mask.pixels] > 1 + 1e-6):
            raise InvalidParams("sensitivity energy exceeds 1 + 1e-6 inside the foreground")


def seeded_rng(seed, stream=0):
    """
    Returns a numpy Generator on the Philox 4x64-10 counter-based bit
    generator, keyed from (seed, stream) through SeedSequence. Streams with
    the same seed but different stream index are independent.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(stream),))))


def spawn_rngs(rng, count):
    """Independent child generators, one per slice."""
    return rng.spawn(count)


@dataclass
class RunConfig:
    variant: str = "SN"
    dc_kind: str = "GD"
    steps: int = 9
    layers: int = 3
    features: int = 16
    share_weights: bool = False
    trainable_dc: bool = False
    dc_eta: float = 1.0
    dc_lambda: float = 0.1
    cg_max_iter: int = 10
    cg_tol: float = 1e-6
    optimizer: str = "RMSProp"
    lr: float = 1e-4
    lr_decay_every: int = 15
    lr_decay_factor: float = 0.5
    epochs: int = 50
    lambda_l1: float = 1e-3
    alpha: float = 1.0
    beta: float = 0.008
    # LSGAN weighting, parsed for completeness; adversarial finetuning is not built
    gamma: float = 0.1
    finetune_mode: str = "dissimilarity-hinge"
    finetune_epochs: int = 30
    finetune_lr: float = 5e-5
    finetune_slices: int = 4
    stl_features: int = 32
    stl_epochs: int = 10
    stl_lr: float = 5e-5
    patch_fe: int = 0
    ssim_window: int = 7
    n_maps: int = 1
    seed: int = 0

    def __post_init__(self):
        self.check()

    def check(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dc_kind not in DC_KINDS:
            raise ConfigError(f"dc_kind must be one of {DC_KINDS}, got {self.dc_kind!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune_mode must be one of {FINETUNE_MODES}, got {self.finetune_mode!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.layers < 1 or self.features < 1:
            raise ConfigError("layers and features must be >= 1")
        if self.dc_eta <= 0 or self.dc_lambda <= 0 or self.cg_tol <= 0:
            raise ConfigError("dc_eta, dc_lambda and cg_tol must be > 0")
        if self.cg_max_iter < 1:
            raise ConfigError(f"cg_max_iter must be >= 1, got {self.cg_max_iter}")
        if self.lambda_l1 <= 0 or self.alpha <= 0:
            raise ConfigError("lambda_l1 and alpha must be > 0")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.lr < 0 or self.finetune_lr < 0 or self.stl_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.n_maps not in (1, 2):
            raise ConfigError(f"n_maps must be 1 or 2, got {self.n_maps}")
        if self.patch_fe < 0:
            raise ConfigError(f"patch_fe must be >= 0, got {self.patch_fe}")
        # 0 trains on full slices; a band must be even and hold one SSIM window
        if self.patch_fe and (self.patch_fe % 2 or self.patch_fe < max(4, self.ssim_window)):
            raise ConfigError(f"patch_fe must be 0 or an even width >= max(4, ssim_window={self.ssim_window}), "
                              f"got {self.patch_fe}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def read_config_text(text, section=None):
    """
    Parses `key = value` lines into a dict of strings. Text without a
    section header is read as a single implicit section.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    stripped = text.lstrip()
    if not stripped.startswith("["):
        text = f"[{DEFAULT_SECTION}]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    if section is not None:
        if parser.has_section(section):
            return dict(parser[section])
        # A headerless file is one implicit section; other named sections do not apply
        if parser.sections() != [DEFAULT_SECTION]:
            return {}
    merged = {}
    for name in parser.sections():
        merged.update(parser[name])
    return merged


def read_config_file(path, section=None):
    with open(path, "r", encoding="utf-8") as file:
        return read_config_text(file.read(), section)


def _convert(key, raw, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "yes", "true", "on"):
                return True
            if lowered in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError as e:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind.__name__}") from e


def parse_run_config(values):
    """
    Builds a RunConfig from parsed `key = value` strings.

    Raises:
        ConfigError: on unknown keys, unparsable values or range violations.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(types[key], types[key])
        kwargs[key] = _convert(key, raw, kind)
    return RunConfig(**kwargs)


def load_run_config(path=None, overrides=None):
    """Reads a RunConfig from a file (or defaults) with optional string overrides."""
    values = read_config_file(path, "run") if path else {}
    values.update(overrides or {})
    config = parse_run_config(values)
    logger.debug("run config loaded: %s", config)
    return config
