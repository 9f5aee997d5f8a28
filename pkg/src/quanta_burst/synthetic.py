"""Synthetic test scenes."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def texture(shape, seed: int = 0, sigma: float = 1.0, lo: float = 0.0, hi: float = 1.0,
            contrast: float = 2.0) -> np.ndarray:
    """Band-limited random texture rescaled into ``[lo, hi]``.

    Gaussian-filtered white noise, normalized to ``[0, 1]`` and contrast
    stretched about 0.5 (values are clipped after stretching).
    """
    if np.isscalar(shape):
        shape = (int(shape), int(shape))
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    tex = np.clip((tex - 0.5) * contrast + 0.5, 0.0, 1.0)
    return lo + (hi - lo) * tex


def binary_blobs(shape, seed: int = 0, sigma: float = 4.0, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Two-level image from thresholded smooth noise: sharp edges, high contrast."""
    if np.isscalar(shape):
        shape = (int(shape), int(shape))
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return np.where(tex > np.median(tex), hi, lo).astype(np.float64)


def flux_for_rate(lam, spec) -> np.ndarray:
    """Flux giving a mean of ``lam`` photo-detections per frame under ``spec`` (dark counts excluded)."""
    return np.asarray(lam, dtype=np.float64) / (spec.frame_exposure_s * np.mean(spec.eta))
