"""Reconstruction metrics, the Sigma-net ensemble and report/PNG export."""
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from PIL import Image

from .core import ForegroundMask, InvalidParams, ShapeMismatch, ZeroReference
from .learn import fit_window, ssim

logger = logging.getLogger(__name__)

# Foreground weights of the SN mean, PCN and finetuned SN reconstructions
FOREGROUND_WEIGHTS = (0.3, 0.2, 0.5)
REPORT_COLUMNS = ["volume", "slice", "nmse", "psnr", "ssim"]
DATA_RANGE_POLICY = "max of reference volume"


@dataclass(frozen=True, eq=False)
class EnsembleInputs:
    x_sn: np.ndarray
    x_pcn: np.ndarray
    x_sn_ft: np.ndarray
    m: np.ndarray

    @classmethod
    def from_reconstructions(cls, sn_family, x_pcn, x_sn_ft, m):
        """x_sn is the mean over the SN-family reconstructions (finetuned model excluded)."""
        if not sn_family:
            raise InvalidParams("ensemble needs at least one SN reconstruction")
        return cls(np.mean(np.stack(sn_family), axis=0), x_pcn, x_sn_ft, m)


def ensemble(inp):
    """m * (0.3 x_sn + 0.2 x_pcn + 0.5 x_sn_ft) + (1 - m) * (x_sn + x_pcn) / 2."""
    pixels = inp.m.pixels if isinstance(inp.m, ForegroundMask) else np.asarray(inp.m, dtype=bool)
    images = [np.asarray(x, dtype=np.float64) for x in (inp.x_sn, inp.x_pcn, inp.x_sn_ft)]
    for name, x in zip(("x_sn", "x_pcn", "x_sn_ft"), images):
        if x.shape != pixels.shape:
            raise ShapeMismatch(f"{name} has shape {x.shape}, mask has {pixels.shape}")
    x_sn, x_pcn, x_sn_ft = images
    w_sn, w_pcn, w_ft = FOREGROUND_WEIGHTS
    foreground = w_sn * x_sn + w_pcn * x_pcn + w_ft * x_sn_ft
    background = 0.5 * (x_sn + x_pcn)
    return np.where(pixels, foreground, background)


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeMismatch(f"image shape {x.shape} != reference shape {ref.shape}")
    return x, ref


def nmse(x, ref):
    x, ref = _pair(x, ref)
    energy = np.sum(ref ** 2)
    if energy == 0:
        raise ZeroReference("NMSE reference is identically zero")
    return float(np.sum((x - ref) ** 2) / energy)


def psnr(x, ref, data_range=None):
    """10 log10(L^2 N / ||x - ref||^2); +inf for identical images."""
    x, ref = _pair(x, ref)
    data_range = float(ref.max()) if data_range is None else data_range
    err = np.sum((x - ref) ** 2)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(data_range ** 2 * x.size / err))


def ssim_eval(x, ref, data_range=None, window=7):
    """
    SSIM over the full image; (S, H, W) volumes are averaged over slices with one data_range.

    Images smaller than the window are scored with the largest odd window that fits.
    """
    x, ref = _pair(x, ref)
    data_range = float(ref.max()) if data_range is None else data_range
    side = fit_window(window, x.shape[-2:])
    if side != window:
        logger.info("SSIM window shrunk from %d to %d for images of %s", window, side, x.shape[-2:])
    if x.ndim == 2:
        return ssim(x, ref, None, data_range, side)[0]
    return float(np.mean([ssim(a, b, None, data_range, side)[0] for a, b in zip(x, ref)]))


def metrics_report(volumes, window=7):
    """
    Per-slice and per-volume metrics.

    Args:
        volumes (dict): name -> (reconstruction (S, H, W), reference (S, H, W)).
        window (int): SSIM window.

    Returns:
        pandas.DataFrame: columns volume,slice,nmse,psnr,ssim; per-slice rows,
        one "all" row per volume and a final "mean" summary row.
    """
    rows, summary = [], []
    for name, (x, ref) in volumes.items():
        x, ref = _pair(x, ref)
        if x.ndim == 2:
            x, ref = x[None], ref[None]
        data_range = float(ref.max())
        for s in range(x.shape[0]):
            rows.append((name, str(s), nmse(x[s], ref[s]), psnr(x[s], ref[s], data_range),
                         ssim_eval(x[s], ref[s], data_range, window)))
        volume_row = (name, "all", nmse(x, ref), psnr(x, ref, data_range), ssim_eval(x, ref, data_range, window))
        rows.append(volume_row)
        summary.append(volume_row[2:])
    means = np.mean(np.array(summary, dtype=np.float64), axis=0) if summary else [np.nan] * 3
    rows.append(("mean", "", *(float(v) for v in means)))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def write_report(report, path):
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(f"# data_range={DATA_RANGE_POLICY}\n")
        report.to_csv(file, index=False)
    logger.info("metrics report written to %s", path)


def read_report(path):
    return pd.read_csv(path, comment="#", dtype={"volume": str, "slice": str}, keep_default_na=False)


def to_uint8(volume):
    """Min-max windows a whole magnitude volume to 8 bits."""
    volume = np.asarray(volume, dtype=np.float64)
    low, high = float(volume.min()), float(volume.max())
    if high <= low:
        return np.zeros(volume.shape, dtype=np.uint8), (low, high)
    scaled = np.round(255 * (volume - low) / (high - low))
    return scaled.astype(np.uint8), (low, high)


def export_png(volume, out_dir, prefix):
    """Writes one 8-bit PNG per slice with a shared window; returns the paths and the window."""
    volume = np.asarray(volume)
    if volume.ndim == 2:
        volume = volume[None]
    os.makedirs(out_dir, exist_ok=True)
    pixels, window = to_uint8(volume)
    paths = []
    for s, plane in enumerate(pixels):
        path = os.path.join(out_dir, f"{prefix}_{s:03d}.png")
        Image.fromarray(plane).save(path)
        paths.append(path)
    logger.info("wrote %d PNG slices to %s (window %.6g..%.6g)", len(paths), out_dir, *window)
    return paths, window
