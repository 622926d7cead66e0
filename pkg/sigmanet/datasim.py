"""Synthetic multi-coil phantoms, undersampling masks and calibration."""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import (ConfigError, ForegroundMask, InvalidParams, InvalidSpec, KSpaceVolume, SamplingMask,
                   SensitivitySet, TooFewLines, TrainingExample, acl_bounds, spawn_rngs)
from .operators import ForwardOperator, fft2c, ifft2c, rss

logger = logging.getLogger(__name__)

# Side length of the corner patch used for the background noise level
NOISE_PATCH = 100
MIN_ACS_LINES = 8


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates [-1, 1]^2 (cy, cx = center; ay, ax = semi-axes)."""
    amplitude: complex
    cy: float
    cx: float
    ay: float
    ax: float
    angle: float = 0.0  # degrees

    def extent(self):
        theta = math.radians(self.angle)
        ey = math.hypot(self.ax * math.sin(theta), self.ay * math.cos(theta))
        ex = math.hypot(self.ax * math.cos(theta), self.ay * math.sin(theta))
        return ey, ex

    def contains(self, yy, xx):
        theta = math.radians(self.angle)
        dy, dx = yy - self.cy, xx - self.cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (u / self.ax) ** 2 + (v / self.ay) ** 2 <= 1.0


def _shepp_logan(scale=0.8):
    # Modified amplitudes keep every region strictly positive
    rows = [
        (1.0, 0.0, 0.0, 0.92, 0.69, 0.0),
        (-0.6, -0.0184, 0.0, 0.874, 0.6624, 0.0),
        (-0.15, 0.0, 0.22, 0.31, 0.11, -18.0),
        (-0.15, 0.0, -0.22, 0.41, 0.16, 18.0),
        (0.1, 0.35, 0.0, 0.25, 0.21, 0.0),
        (0.1, 0.1, 0.0, 0.046, 0.046, 0.0),
        (0.1, -0.1, 0.0, 0.046, 0.046, 0.0),
        (0.1, -0.605, -0.08, 0.023, 0.046, 0.0),
        (0.1, -0.606, 0.0, 0.023, 0.023, 0.0),
        (0.1, -0.605, 0.06, 0.046, 0.023, 0.0),
    ]
    return tuple(Ellipse(a, cy * scale, cx * scale, ay * scale, ax * scale, ang) for a, cy, cx, ay, ax, ang in rows)


PRESETS = {
    "modified-shepp-logan": _shepp_logan(),
    "disk": (Ellipse(1.0, 0.0, 0.0, 0.6, 0.6, 0.0),),
}


@dataclass(frozen=True)
class PhantomSpec:
    """
    Synthetic acquisition: ellipse object, Gaussian coil profiles on a ring of
    radius 1 (single coil: centered), k-space noise of complex std noise_sigma.
    """
    height: int = 64
    width: int = 64
    ellipses: tuple = PRESETS["modified-shepp-logan"]
    coil_count: int = 4
    coil_width: float = 1.0
    coil_phase: float = 0.5
    noise_sigma: float = 0.0
    slice_jitter: float = 0.1

    def check(self):
        if self.height < 4 or self.width < 4 or self.height % 2 or self.width % 2:
            raise InvalidSpec(f"phantom size must be even and >= 4, got {self.height}x{self.width}")
        if self.coil_count < 1:
            raise InvalidSpec(f"coil_count must be >= 1, got {self.coil_count}")
        if self.noise_sigma < 0:
            raise InvalidSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.coil_width > 0:
            raise InvalidSpec(f"coil_width must be > 0, got {self.coil_width}")
        if not self.ellipses:
            raise InvalidSpec("phantom needs at least one ellipse")
        for e in self.ellipses:
            if e.ay <= 0 or e.ax <= 0:
                raise InvalidSpec(f"ellipse axes must be positive: {e}")
            ey, ex = e.extent()
            if abs(e.cy) + ey > 1 + 1e-9 or abs(e.cx) + ex > 1 + 1e-9:
                raise InvalidSpec(f"ellipse leaves the unit square: {e}")


PHANTOM_KEYS = {
    "height": int,
    "width": int,
    "coils": int,
    "coil_width": float,
    "coil_phase": float,
    "noise_sigma": float,
    "slice_jitter": float,
    "phantom": str,
}


def parse_phantom_spec(values):
    """
    Builds a PhantomSpec from `key = value` strings.

    `ellipse_<name> = amplitude, cy, cx, ay, ax, angle_deg` entries replace the
    named preset's ellipses.

    Raises:
        ConfigError: on unknown keys or unparsable values.
        InvalidSpec: if the resulting spec is out of range.
    """
    kwargs = {}
    ellipses = []
    preset = "modified-shepp-logan"
    for key, raw in values.items():
        if key.startswith("ellipse_"):
            try:
                numbers = [float(v) for v in raw.split(",")]
            except ValueError as e:
                raise ConfigError(f"cannot parse {key} = {raw!r} as numbers") from e
            if len(numbers) != 6:
                raise ConfigError(f"{key} needs 6 values (amplitude, cy, cx, ay, ax, angle), got {len(numbers)}")
            ellipses.append(Ellipse(*numbers))
            continue
        if key not in PHANTOM_KEYS:
            raise ConfigError(f"unknown phantom key: {key}")
        if key == "phantom":
            preset = raw.strip()
            if preset not in PRESETS:
                raise ConfigError(f"phantom must be one of {sorted(PRESETS)}, got {preset!r}")
            continue
        try:
            value = PHANTOM_KEYS[key](raw.strip())
        except ValueError as e:
            raise ConfigError(f"cannot parse {key} = {raw!r}") from e
        kwargs["coil_count" if key == "coils" else key] = value
    spec = PhantomSpec(ellipses=tuple(ellipses) or PRESETS[preset], **kwargs)
    spec.check()
    return spec


@dataclass(frozen=True, eq=False)
class Phantom:
    coil_images: np.ndarray
    sens: SensitivitySet
    kspace: KSpaceVolume
    obj: np.ndarray


@dataclass(frozen=True, eq=False)
class PhantomVolume:
    coil_images: np.ndarray  # (S, Q, H, W)
    sens: SensitivitySet
    kspace: KSpaceVolume
    objects: np.ndarray  # (S, H, W)


def grid_coords(height, width):
    """Pixel-center coordinates normalized to [-1, 1]."""
    yy = (2 * (np.arange(height) + 0.5) / height - 1)[:, None]
    xx = (2 * (np.arange(width) + 0.5) / width - 1)[None, :]
    return np.broadcast_arrays(yy, xx)


def render_object(spec):
    yy, xx = grid_coords(spec.height, spec.width)
    obj = np.zeros((spec.height, spec.width), dtype=np.complex128)
    for e in spec.ellipses:
        obj[e.contains(yy, xx)] += e.amplitude
    return obj


def object_support(spec):
    """Union of all ellipse memberships."""
    yy, xx = grid_coords(spec.height, spec.width)
    support = np.zeros((spec.height, spec.width), dtype=bool)
    for e in spec.ellipses:
        support |= e.contains(yy, xx)
    return support


def coil_profiles(spec):
    """Gaussian coil sensitivities, normalized to unit RSS at every pixel."""
    yy, xx = grid_coords(spec.height, spec.width)
    profiles = []
    for q in range(spec.coil_count):
        if spec.coil_count == 1:
            cy = cx = 0.0
            theta = 0.0
        else:
            theta = 2 * math.pi * q / spec.coil_count + math.pi / 4
            cy, cx = math.sin(theta), math.cos(theta)
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        magnitude = np.exp(-dist2 / (2 * spec.coil_width ** 2))
        phase = spec.coil_phase * (math.cos(theta) * xx + math.sin(theta) * yy)
        profiles.append(magnitude * np.exp(1j * phase))
    profiles = np.stack(profiles)
    return profiles / rss(profiles)


def make_phantom(spec, rng):
    """
    Renders one fully sampled multi-coil slice.

    Returns:
        Phantom: per-coil images, unit-RSS sensitivities, noisy k-space and object.
    """
    spec.check()
    obj = render_object(spec)
    sens = coil_profiles(spec)
    coil_images = sens * obj
    kspace = fft2c(coil_images)
    if spec.noise_sigma > 0:
        shape = kspace.shape
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        kspace = kspace + noise * (spec.noise_sigma / math.sqrt(2))
    volume = KSpaceVolume(kspace[None], SamplingMask.full(spec.height))
    return Phantom(coil_images, SensitivitySet(sens[None]), volume, obj)


def jitter_spec(spec, rng):
    """Perturbs ellipse amplitudes and shrinks axes by up to slice_jitter."""
    if spec.slice_jitter <= 0:
        return spec
    ellipses = []
    for e in spec.ellipses:
        gain = 1 + spec.slice_jitter * rng.uniform(-1, 1)
        shrink = 1 - spec.slice_jitter * rng.uniform(0, 1, size=2)
        ellipses.append(replace(e, amplitude=e.amplitude * gain, ay=e.ay * shrink[0], ax=e.ax * shrink[1]))
    return replace(spec, ellipses=tuple(ellipses))


def make_phantom_volume(spec, n_slices, rng):
    """Stacks n_slices jittered phantoms; each slice draws from its own substream."""
    if n_slices < 1:
        raise InvalidParams(f"n_slices must be >= 1, got {n_slices}")
    slices = []
    for child in spawn_rngs(rng, n_slices):
        slices.append(make_phantom(jitter_spec(spec, child), child))
    kspace = np.concatenate([p.kspace.data for p in slices])
    return PhantomVolume(
        coil_images=np.stack([p.coil_images for p in slices]),
        sens=slices[0].sens,
        kspace=KSpaceVolume(kspace, SamplingMask.full(spec.height)),
        objects=np.stack([p.obj for p in slices]),
    )


def make_mask(pe_lines, r, acl_count, rng):
    """
    Draws a PE-line mask with a centered block of acl_count calibration lines
    and uniformly random remaining lines, round(pe_lines / r) flagged in total.
    """
    if pe_lines < 1 or r < 1:
        raise InvalidParams(f"need pe_lines >= 1 and R >= 1, got {pe_lines}, {r}")
    if not 0 <= acl_count <= pe_lines:
        raise InvalidParams(f"acl_count {acl_count} outside [0, {pe_lines}]")
    target = int(math.floor(pe_lines / r + 0.5))
    if target < acl_count:
        raise InvalidParams(f"flagged target {target} is smaller than acl_count {acl_count}")
    if target < 1:
        raise InvalidParams(f"R={r} leaves no lines out of {pe_lines}")
    flags = np.zeros(pe_lines, dtype=bool)
    start, stop = acl_bounds(pe_lines, acl_count)
    flags[start:stop] = True
    candidates = np.flatnonzero(~flags)
    extra = rng.choice(candidates, size=target - acl_count, replace=False)
    flags[extra] = True
    return SamplingMask(flags, acl_count, float(r))


def undersample(volume, mask):
    """Zeroes unsampled PE lines of a volume (or a raw (..., PE, FE) array)."""
    data = volume.data if isinstance(volume, KSpaceVolume) else np.asarray(volume)
    if data.ndim == 3:
        data = data[None]
    return KSpaceVolume(data * mask.grid(), mask)


def extract_acs(kspace, mask):
    """Central calibration block (Q, acl_count, FE) of one slice."""
    start, stop = acl_bounds(mask.pe_lines, mask.acl_count)
    return np.asarray(kspace)[:, start:stop, :]


def acs_window(lines):
    """Hann taper over the calibration lines, symmetric about the k-space center."""
    offsets = np.arange(lines) - lines // 2
    return 0.5 * (1 + np.cos(np.pi * offsets / (lines // 2 + 1)))


def estimate_sensitivities(acs, height, n_maps=1):
    """
    Low-resolution sensitivity estimate from calibration lines.

    The calibration block is zero-filled to the full grid, Hann-tapered along
    PE, transformed per coil and divided by its RSS (+ 1e-8 of the peak).
    With n_maps=2 the second map set is zero.

    Args:
        acs (np.ndarray): calibration k-space (Q, L, FE).
        height (int): full PE size.
        n_maps (int): 1 or 2.

    Returns:
        SensitivitySet: maps of shape (n_maps, Q, height, FE).
    """
    acs = np.asarray(acs, dtype=np.complex128)
    if acs.ndim != 3:
        raise InvalidParams(f"calibration data must be (Q, L, FE), got {acs.shape}")
    if n_maps not in (1, 2):
        raise InvalidParams(f"n_maps must be 1 or 2, got {n_maps}")
    coils, lines, width = acs.shape
    if lines < MIN_ACS_LINES:
        raise TooFewLines(f"{lines} calibration lines, need at least {MIN_ACS_LINES}")
    if lines > height:
        raise InvalidParams(f"{lines} calibration lines exceed PE size {height}")
    full = np.zeros((coils, height, width), dtype=np.complex128)
    start, stop = acl_bounds(height, lines)
    full[:, start:stop, :] = acs * acs_window(lines)[None, :, None]
    low_res = ifft2c(full)
    combined = rss(low_res)
    peak = combined.max()
    if peak == 0:
        maps = np.zeros_like(low_res)
    else:
        maps = low_res / (combined + 1e-8 * peak)
    maps = maps[None]
    if n_maps == 2:
        maps = np.concatenate([maps, np.zeros_like(maps)])
    return SensitivitySet(maps)


def estimate_volume_sensitivities(volume, n_maps=1):
    """Estimates one SensitivitySet for a KSpaceVolume from its central slice."""
    centre = volume.data[volume.n_slices // 2]
    return estimate_sensitivities(extract_acs(centre, volume.mask), volume.mask.pe_lines, n_maps)


def estimate_slice_sensitivities(volume, n_maps=1):
    """One SensitivitySet per slice, each from that slice's own calibration lines."""
    height = volume.mask.pe_lines
    return [estimate_sensitivities(extract_acs(k, volume.mask), height, n_maps) for k in volume.data]


def foreground_mask(rss_image, threshold_frac):
    """Threshold at threshold_frac of the peak followed by a 3x3 closing."""
    if not 0 < threshold_frac < 1:
        raise InvalidParams(f"threshold_frac must lie in (0, 1), got {threshold_frac}")
    image = np.asarray(rss_image, dtype=np.float64)
    peak = image.max() if image.size else 0.0
    if peak <= 0:
        return ForegroundMask(np.zeros(image.shape, dtype=bool))
    pixels = image >= threshold_frac * peak
    structure = np.ones((3, 3), dtype=bool)
    closed = ndimage.binary_dilation(pixels, structure=structure)
    closed = ndimage.binary_erosion(closed, structure=structure, border_value=1)
    return ForegroundMask(closed | pixels)


def background_replace(rss_under, fg, true_r, patch=NOISE_PATCH, keep=None):
    """
    Replaces the background by the corner-patch noise level times true_r.

    The level is the mean of the undersampled RSS over the background pixels
    of the top-left patch (all background pixels if the patch has none).
    Foreground pixels come from keep (a reconstruction) when given, else
    from rss_under.
    """
    image = np.asarray(rss_under, dtype=np.float64)
    pixels = fg.pixels if isinstance(fg, ForegroundMask) else np.asarray(fg, dtype=bool)
    if pixels.shape != image.shape:
        raise InvalidParams(f"mask shape {pixels.shape} != image shape {image.shape}")
    kept = image if keep is None else np.asarray(keep, dtype=np.float64)
    if kept.shape != image.shape:
        raise InvalidParams(f"kept image shape {kept.shape} != image shape {image.shape}")
    background = ~pixels
    if not background.any():
        return kept.copy()
    size = min(patch, *image.shape)
    if size < patch:
        logger.info("noise patch shrunk from %d to %d for image %s", patch, size, image.shape)
    corner = background[:size, :size]
    if corner.any():
        level = image[:size, :size][corner].mean()
    else:
        level = image[background].mean()
    return np.where(pixels, kept, level * true_r)


def build_examples(volume, variant, r, acl_count, rng, n_maps=1, estimate=True, threshold_frac=0.1, sens=None):
    """
    Turns fully sampled k-space into supervised training examples.

    SN references are the sensitivity-combined fully sampled magnitude, PCN
    references the RSS of the fully sampled coil images. Each slice gets its
    own random mask; data_range is the reference volume maximum.

    Args:
        volume (PhantomVolume or KSpaceVolume): fully sampled data.
        variant (str): "SN" or "PCN".
        r (float): nominal acceleration of the drawn masks.
        acl_count (int): calibration lines per mask.
        rng (np.random.Generator): split into one substream per slice.
        n_maps (int): SN map sets.
        estimate (bool): estimate SN maps from the calibration lines instead
            of using the known ones.
        threshold_frac (float): foreground threshold on the reference.
        sens (SensitivitySet, optional): known maps when volume carries none.

    Returns:
        list[TrainingExample]: one example per slice.
    """
    kspace = volume.kspace.data if isinstance(volume, PhantomVolume) else volume.data
    known = sens if sens is not None else getattr(volume, "sens", None)
    if variant == "SN" and not estimate and known is None:
        raise InvalidParams("SN examples without estimation need known sensitivity maps")
    _, _, height, _ = kspace.shape
    full = SamplingMask.full(height)
    drafts = []
    for child, k_full in zip(spawn_rngs(rng, kspace.shape[0]), kspace):
        mask = make_mask(height, r, acl_count, child)
        y = k_full * mask.grid()
        if variant == "SN":
            if estimate:
                maps = estimate_sensitivities(extract_acs(y, mask), height, n_maps).maps
            else:
                maps = known.maps[:1]
                if n_maps == 2:
                    maps = np.concatenate([maps, np.zeros_like(maps)])
            x_ref = rss(ForwardOperator("SN", full, maps).adjoint(k_full))
        else:
            maps = None
            x_ref = rss(ifft2c(k_full))
        drafts.append((y, mask, maps, x_ref))
    data_range = max(d[3].max() for d in drafts)
    return [
        TrainingExample(y, mask, maps, x_ref, foreground_mask(x_ref, threshold_frac).pixels, float(data_range))
        for y, mask, maps, x_ref in drafts
    ]


def replace_volume_background(images, volume, threshold_frac=0.1, patch=NOISE_PATCH, masks=None):
    """
    Applies background_replace slice by slice, with the undersampled RSS of volume as noise source.

    masks gives one foreground mask per slice; by default each image is thresholded.
    """
    out = []
    for s, (image, kspace) in enumerate(zip(images, volume.data)):
        fg = foreground_mask(image, threshold_frac) if masks is None else masks[s]
        out.append(background_replace(rss(ifft2c(kspace)), fg, volume.mask.true_r, patch, keep=image))
    return np.stack(out)
