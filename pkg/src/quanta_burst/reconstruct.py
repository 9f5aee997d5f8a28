"""From merged photon counts to a display image.

Hot-pixel correction works on the binary frames; everything else operates
on (merged) sum images: variance stabilization around a pluggable denoiser,
MLE inversion of the nonlinear SPAD response, a TV-regularized alternative
to the per-pixel MLE, and percentile normalization plus gamma for display.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .core_model import DomainError, FrameSequence, SensorSpec, SumImage, mle_flux
from .merge import MergedImage
from .simulator import DcrMap

_NEIGHBORS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]


def correct_hot_pixels(seq: FrameSequence, dcr_map: DcrMap, seed: int = 0) -> FrameSequence:
    """Replace hot pixels, frame by frame, with a random healthy 8-neighbour.

    Every masked pixel in every frame copies the value of one of its
    non-masked neighbours, chosen uniformly.  Pixels whose neighbours are
    all masked are set to zero (with a warning).  Unmasked pixels are left
    bit-for-bit unchanged.
    """
    mask = np.asarray(dcr_map.hot_mask, dtype=bool)
    if mask.shape != seq.shape:
        raise DomainError("hot-pixel mask does not match the frame size")
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return seq
    h, w = mask.shape
    frames = seq.frames.copy()
    rng = np.random.default_rng(seed)
    isolated = 0
    for y, x in zip(ys, xs):
        cand = [(y + dy, x + dx) for dy, dx in _NEIGHBORS
                if 0 <= y + dy < h and 0 <= x + dx < w and not mask[y + dy, x + dx]]
        if not cand:
            frames[:, y, x] = 0
            isolated += 1
            continue
        cand = np.array(cand)
        pick = cand[rng.integers(0, len(cand), size=seq.n_frames)]
        frames[:, y, x] = seq.frames[np.arange(seq.n_frames), pick[:, 0], pick[:, 1]]
    if isolated:
        warnings.warn(f"{isolated} hot pixel(s) have no healthy neighbour; set to 0", RuntimeWarning,
                      stacklevel=2)
    return FrameSequence(seq.spec, frames, seq.start_time_s, seq.frame_period_s, seq.seed)


# ---------------------------------------------------------------------------
# Variance stabilization and denoising

def anscombe(x):
    """``2 sqrt(x + 3/8)``, which makes Poisson-like counts roughly unit variance."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("anscombe needs nonnegative input")
    return 2.0 * np.sqrt(x + 0.375)


def inverse_anscombe(y):
    """Algebraic inverse ``(y/2)^2 - 3/8``, clamped at zero."""
    y = np.asarray(y, dtype=np.float64)
    return np.maximum((y / 2.0) ** 2 - 0.375, 0.0)


class Denoiser(Protocol):
    def __call__(self, stabilized: np.ndarray) -> np.ndarray: ...


@dataclass
class GaussianDenoiser:
    """Reference plug-in: Gaussian smoothing of the stabilized image."""

    sigma_px: float = 1.0

    def __call__(self, stabilized: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(stabilized, self.sigma_px, mode="reflect")


# ---------------------------------------------------------------------------
# TV-regularized reconstruction

def _tv(x: np.ndarray) -> float:
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


def _grad_op(x):
    gy = np.zeros_like(x)
    gx = np.zeros_like(x)
    gy[:-1] = x[1:] - x[:-1]
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    return gy, gx


def _grad_adj(py, px):
    """Adjoint of the forward-difference operator (a negative divergence)."""
    out = np.zeros_like(py)
    out[:-1] -= py[:-1]
    out[1:] += py[:-1]
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    return out


def tv_prox(y: np.ndarray, weight: float, iters: int = 100, dual=None):
    """``argmin_x 0.5||x - y||^2 + weight ||Dx||_1`` by projected gradient on the dual.

    Returns ``(x, dual)`` so callers can warm-start the next call.
    """
    if weight <= 0:
        return y.copy(), dual
    py, px = dual if dual is not None else (np.zeros_like(y), np.zeros_like(y))
    step = 1.0 / 8.0  # ||D||^2 <= 8 in 2-D
    for _ in range(iters):
        gy, gx = _grad_op(y - _grad_adj(py, px))
        py = np.clip(py + step * gy, -weight, weight)
        px = np.clip(px + step * gx, -weight, weight)
    return y - _grad_adj(py, px), (py, px)


@dataclass
class TVResult:
    flux: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0


def tv_denoise(sum_image: SumImage, spec: SensorSpec, lambda_tv: float, iters: int = 100,
               prox_iters: int = 50, return_info: bool = False):
    """Joint MLE + total-variation reconstruction of the flux.

    Minimizes ``-sum log f(phi_i | s_i) + lambda_tv * ||D phi||_1`` over
    ``phi >= 0`` (``D``: forward differences, anisotropic).  The problem is
    solved in exposure units ``lam = phi tau eta + r tau`` by proximal
    gradient with backtracking, starting from the per-pixel MLE.  The
    objective is checked to be non-increasing after every iteration.
    Saturated pixels are evaluated at ``s = n - 1``.
    """
    if lambda_tv < 0:
        raise DomainError("lambda_tv must be nonnegative")
    n = sum_image.n_frames
    s = np.minimum(np.asarray(sum_image.counts, dtype=np.float64), n - 1)
    phi0 = mle_flux(SumImage(s, n), spec)
    if lambda_tv == 0:
        return TVResult(phi0, [], 0) if return_info else phi0

    tau_eta = spec.frame_exposure_s * float(np.mean(spec.eta))
    offset = spec.dcr_cps * spec.frame_exposure_s
    lam_floor = max(offset, 1e-12)
    w = lambda_tv / tau_eta  # TV weight in exposure units

    def data(lam):
        with np.errstate(divide="ignore"):
            lp = np.log(-np.expm1(-lam))
        return float(np.sum((n - s) * lam - s * np.where(s > 0, lp, 0.0)))

    def data_grad(lam):
        return (n - s) - s / np.expm1(lam)

    def objective(lam):
        return data(lam) + w * _tv(lam)

    lam = np.maximum(phi0 * tau_eta + offset, lam_floor)
    F = objective(lam)
    history = [F]
    t = 1.0 / max(float(np.max(np.abs(data_grad(lam)))), 1.0) * float(np.max(lam))
    dual = None
    it = 0
    for it in range(1, iters + 1):
        f0, g = data(lam), data_grad(lam)
        accepted = False
        for _ in range(40):
            z, new_dual = tv_prox(lam - t * g, t * w, prox_iters, dual)
            z = np.maximum(z, lam_floor)
            d = z - lam
            fz = data(z)
            if np.isfinite(fz) and fz <= f0 + float(np.sum(g * d)) + float(np.sum(d * d)) / (2 * t):
                Fz = fz + w * _tv(z)
                if Fz <= F:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        lam, dual = z, new_dual
        assert Fz <= F, "TV objective increased"
        converged = F - Fz <= 1e-10 * max(abs(F), 1.0)
        F = Fz
        history.append(F)
        t *= 1.5
        if converged:
            break
    phi = np.maximum((lam - offset) / tau_eta, 0.0)
    if return_info:
        return TVResult(phi, history, it)
    return phi


def tv_objective(phi, sum_image: SumImage, spec: SensorSpec, lambda_tv: float) -> float:
    """The objective minimized by :func:`tv_denoise`, up to constants, in flux units."""
    n = sum_image.n_frames
    s = np.minimum(np.asarray(sum_image.counts, dtype=np.float64), n - 1)
    lam = np.asarray(phi) * spec.frame_exposure_s * float(np.mean(spec.eta)) + spec.dcr_cps * spec.frame_exposure_s
    with np.errstate(divide="ignore"):
        lp = np.log(-np.expm1(-lam))
    nll = np.sum((n - s) * lam - s * np.where(s > 0, lp, 0.0))
    return float(nll + lambda_tv * _tv(np.asarray(phi, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Display

@dataclass
class FinalImage:
    display: np.ndarray
    linear: np.ndarray
    saturated: np.ndarray
    scale: float


def finalize_image(merged: MergedImage, spec: SensorSpec, gamma: float = 2.2,
                   denoiser: Callable[[np.ndarray], np.ndarray] | None = None,
                   percentile: float = 99.9) -> FinalImage:
    """Turn merged counts into a linear flux image and a gamma-encoded display image.

    With a ``denoiser``, counts go through Anscombe, the denoiser, and the
    inverse transform first.  SPAD counts are inverted with the MLE using
    ``effective_frames`` as the frame count; other sensors are scaled
    linearly.  The display image divides by the given flux percentile,
    clips to ``[0, 1]`` and applies ``1/gamma``.
    """
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    n = merged.effective_frames
    counts = np.asarray(merged.counts, dtype=np.float64)
    if denoiser is not None:
        counts = inverse_anscombe(denoiser(anscombe(counts)))
    if spec.kind == "spad":
        sat = counts >= n
        linear = mle_flux(SumImage(np.minimum(counts, n), n), spec, saturated="clip")
    else:
        sat = np.zeros(counts.shape, dtype=bool)
        linear = counts / (n * spec.frame_exposure_s * float(np.mean(spec.eta)))
    scale = float(np.percentile(linear, percentile)) if linear.size else 0.0
    if scale > 0:
        display = np.clip(linear / scale, 0.0, 1.0) ** (1.0 / gamma)
    else:
        display = np.zeros_like(linear)
    return FinalImage(display, linear, sat, scale)
