"""Reconstruction quality metrics: NRMSE, 3D SSIM, HFEN, ROI stats, phase consistency.

All metrics take an optional boolean ``mask``; reductions run over the
masked voxels only. Filtering (SSIM windows, LoG) always sees the whole
volume with zero padding outside it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import fftconvolve

from .dipole import ForwardOperator, ReconState, Z_HAT
from .volume import Grid3

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
HFEN_SIGMA = 1.5
HFEN_SIZE = 15


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match volume {shape}")
    if not mask.any():
        raise ValueError("mask is empty")
    return mask


def _pair(x, ref):
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def nrmse(x, ref, mask=None) -> float:
    """``100 * ||x - ref|| / ||ref||`` over the mask."""
    x, ref = _pair(x, ref)
    m = _mask(mask, ref.shape)
    denom = np.linalg.norm(ref[m])
    if denom == 0:
        raise ValueError("reference has zero norm inside the mask")
    return 100.0 * float(np.linalg.norm((x - ref)[m]) / denom)


def rmse(x, ref, mask=None, normalized: bool = True) -> float:
    """NRMSE (percent) by default; plain root-mean-square error otherwise."""
    if normalized:
        return nrmse(x, ref, mask)
    x, ref = _pair(x, ref)
    m = _mask(mask, ref.shape)
    return float(np.sqrt(np.mean((x - ref)[m] ** 2)))


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian of odd length ``size``."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _local_mean(vol: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable zero-padded Gaussian weighting
    for axis in range(3):
        vol = correlate1d(vol, w, axis=axis, mode="constant", cval=0.0)
    return vol


def ssim_map(x, ref, k1=SSIM_K1, k2=SSIM_K2, sigma=SSIM_SIGMA, size=SSIM_WINDOW,
             data_range: float | None = None) -> np.ndarray:
    """Local SSIM with Gaussian-weighted statistics and zero padding.

    ``data_range`` defaults to ``max(ref) - min(ref)``.
    """
    x, ref = _pair(x, ref)
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if not L > 0:
        raise ValueError("reference has zero dynamic range")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    w = gaussian_window(size, sigma)
    mx, my = _local_mean(x, w), _local_mean(ref, w)
    sxx = _local_mean(x * x, w) - mx * mx
    syy = _local_mean(ref * ref, w) - my * my
    sxy = _local_mean(x * ref, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim3(x, ref, mask=None, **params) -> float:
    """Mean local SSIM over the mask."""
    m = _mask(mask, np.shape(ref))
    return float(ssim_map(x, ref, **params)[m].mean())


# --------------------------------------------------------------------------
# HFEN


def log_kernel(size: int = HFEN_SIZE, sigma: float = HFEN_SIGMA) -> np.ndarray:
    """3D Laplacian-of-Gaussian kernel, shifted to sum to exactly zero.

    Same construction as the usual ``fspecial('log')`` recipe, extended to
    three dimensions.
    """
    r = np.arange(size) - (size - 1) / 2.0
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    r2 = x ** 2 + y ** 2 + z ** 2
    g = np.exp(-r2 / (2.0 * sigma ** 2))
    g /= g.sum()
    h = g * (r2 - 3.0 * sigma ** 2) / sigma ** 4
    return h - h.mean()


def log_filter(vol, size: int = HFEN_SIZE, sigma: float = HFEN_SIGMA) -> np.ndarray:
    """Linear (zero-padded) convolution with :func:`log_kernel`, same shape."""
    return fftconvolve(np.asarray(vol, dtype=float), log_kernel(size, sigma), mode="same")


def interior_mask(shape, margin: int = HFEN_SIZE // 2) -> np.ndarray:
    """Voxels at least ``margin`` away from every face."""
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(margin, n - margin) for n in shape)] = True
    return m


def hfen(x, ref, mask=None, size: int = HFEN_SIZE, sigma: float = HFEN_SIGMA) -> float:
    """``100 * ||LoG(x) - LoG(ref)|| / ||LoG(ref)||`` over the mask."""
    x, ref = _pair(x, ref)
    m = _mask(mask, ref.shape)
    lx, lr = log_filter(x, size, sigma), log_filter(ref, size, sigma)
    denom = np.linalg.norm(lr[m])
    if denom == 0:
        raise ValueError("LoG-filtered reference is zero inside the mask")
    return 100.0 * float(np.linalg.norm((lx - lr)[m]) / denom)


# --------------------------------------------------------------------------
# ROI statistics and forward-phase consistency


@dataclass
class RoiStat:
    label: str
    mean: float
    std: float
    count: int


def roi_stats(vol, masks: dict) -> list[RoiStat]:
    """Mean and population standard deviation per labelled mask."""
    vol = np.asarray(vol, dtype=float)
    out = []
    for name, mask in masks.items():
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != vol.shape:
            raise ValueError(f"ROI {name!r}: mask shape {mask.shape} != volume {vol.shape}")
        values = vol[mask]
        if values.size == 0:
            raise ValueError(f"ROI {name!r} is empty")
        out.append(RoiStat(str(name), float(values.mean()), float(values.std()), int(values.size)))
    return out


def label_masks(labels, names: dict | None = None) -> dict:
    """Split an integer label volume into ``{name: mask}`` (label 0 is background)."""
    labels = np.asarray(labels)
    ids = [int(v) for v in np.unique(np.rint(labels)) if v != 0]
    names = names or {}
    return {names.get(i, str(i)): np.rint(labels) == i for i in ids}


def phase_consistency(X: ReconState, b_measured, mask=None, voxel_size=(1.0, 1.0, 1.0),
                      H=Z_HAT) -> float:
    """Mean absolute difference between ``A X`` and the measured field."""
    b = np.asarray(b_measured, dtype=float)
    m = _mask(mask, b.shape)
    sim = ForwardOperator(Grid3(b.shape, voxel_size), H).apply(X)
    return float(np.abs(sim - b)[m].mean())


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    rmse: float
    ssim: float
    hfen: float
    params: dict = field(default_factory=dict)
    rois: list = field(default_factory=list)
    consistency: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None and v != []}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def evaluate(x, ref, mask=None, normalized_rmse: bool = True) -> MetricReport:
    """RMSE, SSIM and HFEN of ``x`` against ``ref`` with the default parameters."""
    report = MetricReport(
        rmse=rmse(x, ref, mask, normalized_rmse),
        ssim=ssim3(x, ref, mask),
        hfen=hfen(x, ref, mask),
        params={
            "rmse": {"normalized_percent": normalized_rmse},
            "ssim": {"k1": SSIM_K1, "k2": SSIM_K2, "window": "gaussian", "sigma": SSIM_SIGMA,
                     "size": SSIM_WINDOW, "data_range": "max(ref)-min(ref)", "padding": "zero"},
            "hfen": {"kernel": "LoG", "size": HFEN_SIZE, "sigma": HFEN_SIGMA, "padding": "zero"},
            "mask_voxels": int(_mask(mask, np.shape(ref)).sum()),
        },
    )
    for v in (report.rmse, report.ssim, report.hfen):
        if not math.isfinite(v):
            raise ValueError("metric evaluated to a non-finite value")
    return report
