"""Synthetic capture: warp a flux image along a trajectory and sample frames.

Every frame draws from its own random stream, derived from the master seed
and the frame index, so results are bit-identical regardless of how many
worker threads generate them.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .core_model import (
    DomainError,
    FrameSequence,
    SensorSpec,
    SumImage,
    check_flux,
    exposure_rate,
)

TRAJECTORY_KINDS = ("global_translation", "global_affine", "per_frame_list")


@dataclass
class MotionTrajectory:
    """Parametric image-space motion.

    ``global_translation``: displacement ``velocity * t`` (pixels, ``(dx, dy)``).
    ``global_affine``: ``matrix_rate`` (2x2, per second, acting on ``(x, y)``
    about the image centre) plus translation.
    ``per_frame_list``: explicit per-frame ``(dx, dy)`` displacements indexed
    by frame number.

    An optional smooth jitter (sum of low-frequency sinusoids with random
    phases drawn from ``jitter_seed``) is added to the translation.
    """

    kind: str = "global_translation"
    velocity_px_per_s: tuple[float, float] = (0.0, 0.0)
    matrix_rate: np.ndarray | None = None
    per_frame: np.ndarray | None = None
    jitter_px: float = 0.0
    jitter_hz: float = 5.0
    jitter_seed: int = 0
    _phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise DomainError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "per_frame_list":
            if self.per_frame is None:
                raise DomainError("per_frame_list trajectory needs per_frame displacements")
            self.per_frame = np.asarray(self.per_frame, dtype=np.float64).reshape(-1, 2)
        rng = np.random.default_rng(self.jitter_seed)
        self._phases = rng.uniform(0, 2 * np.pi, size=(2, 3))

    @classmethod
    def static(cls) -> "MotionTrajectory":
        return cls()

    def _jitter(self, t: float) -> np.ndarray:
        if self.jitter_px == 0:
            return np.zeros(2)
        harmonics = np.array([1.0, 0.5, 0.25])
        waves = np.sin(2 * np.pi * self.jitter_hz * harmonics * t + self._phases)
        return self.jitter_px * (waves * harmonics).sum(axis=1) / harmonics.sum()

    def displacement(self, t: float, frame: int | None = None) -> np.ndarray:
        """Translation ``(dx, dy)`` of scene content at time ``t``."""
        if self.kind == "per_frame_list":
            if frame is None or not 0 <= frame < len(self.per_frame):
                raise DomainError("per_frame_list trajectory needs an in-range frame index")
            base = self.per_frame[frame]
        else:
            base = np.asarray(self.velocity_px_per_s, dtype=np.float64) * t
        return base + self._jitter(t)

    def matrix(self, t: float) -> np.ndarray:
        if self.kind != "global_affine" or self.matrix_rate is None:
            return np.eye(2)
        return np.eye(2) + np.asarray(self.matrix_rate, dtype=np.float64) * t

    def validate_length(self, n_frames: int):
        if self.kind == "per_frame_list" and len(self.per_frame) != n_frames:
            raise DomainError("per_frame_list length must equal n_frames")


def warp_flux(flux, trajectory: MotionTrajectory, t: float, frame: int | None = None,
              boundary_flux: float = 0.0) -> np.ndarray:
    """Resample ``flux`` as seen at time ``t`` (bilinear, constant fill outside).

    Content moves by the trajectory displacement: ``out(x) = flux(x - d(t))``.
    """
    flux = check_flux(flux)
    d = trajectory.displacement(t, frame)
    A = trajectory.matrix(t)
    if flux.ndim == 3:
        return np.stack(
            [warp_flux(flux[..., c], trajectory, t, frame, boundary_flux) for c in range(flux.shape[2])],
            axis=-1,
        )
    if np.allclose(A, np.eye(2)):
        if not np.any(d):
            return flux.copy()
        out = ndimage.shift(flux, (d[1], d[0]), order=1, mode="constant", cval=boundary_flux)
    else:
        # out(p) = flux(A^-1 (p - c - d) + c), in (row, col) order for ndimage
        h, w = flux.shape
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        inv = np.linalg.inv(A)
        inv_rc = inv[::-1, ::-1]
        center_rc = c[::-1]
        offset = center_rc - inv_rc @ (center_rc + d[::-1])
        out = ndimage.affine_transform(flux, inv_rc, offset=offset, order=1, mode="constant",
                                       cval=boundary_flux)
    return np.maximum(out, 0.0)


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    """Independent, reproducible random stream for one frame."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(frame,))))


def _parallel_frames(n_frames: int, make_frame: Callable[[int], np.ndarray], workers: int) -> list:
    if workers <= 1 or n_frames < 2:
        return [make_frame(k) for k in range(n_frames)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(make_frame, range(n_frames)))


def _frame_times(spec: SensorSpec, n_frames: int, start: float, period: float) -> np.ndarray:
    return start + np.arange(n_frames) * period + 0.5 * spec.frame_exposure_s


@dataclass
class DcrMap:
    """Per-pixel dark count rate (counts/s) and the derived hot-pixel mask."""

    dcr: np.ndarray
    hot_mask: np.ndarray
    threshold_cps: float = math.inf

    @classmethod
    def from_dcr(cls, dcr, threshold_cps: float) -> "DcrMap":
        dcr = np.asarray(dcr, dtype=np.float64)
        return cls(dcr, dcr > threshold_cps, threshold_cps)


def sample_spad_sequence(flux, spec: SensorSpec, trajectory: MotionTrajectory | None = None,
                         n_frames: int = 1, dcr_map: DcrMap | None = None, seed: int = 0,
                         boundary_flux: float = 0.0, start_time_s: float = 0.0,
                         workers: int = 1) -> FrameSequence:
    """Draw a binary SPAD sequence of ``n_frames`` frames.

    Each frame samples the flux warped to its mid-exposure time; a pixel
    fires with the Bernoulli probability of the detection model, using the
    per-pixel dark count rate from ``dcr_map`` when given.
    """
    if spec.kind != "spad":
        raise DomainError("sample_spad_sequence needs a spad sensor")
    flux = check_flux(flux)
    trajectory = trajectory or MotionTrajectory.static()
    trajectory.validate_length(n_frames)
    dcr = None if dcr_map is None else dcr_map.dcr
    times = _frame_times(spec, n_frames, start_time_s, spec.period_s)
    static = trajectory.kind == "global_translation" and not any(trajectory.velocity_px_per_s) \
        and trajectory.jitter_px == 0
    p_static = -np.expm1(-exposure_rate(flux, spec, dcr)) if static else None

    def make_frame(k: int) -> np.ndarray:
        if p_static is None:
            warped = warp_flux(flux, trajectory, times[k], k, boundary_flux)
            p = -np.expm1(-exposure_rate(warped, spec, dcr))
        else:
            p = p_static
        return frame_rng(seed, k).random(p.shape) < p

    frames = np.empty((n_frames,) + flux.shape, dtype=np.uint8)
    for k, f in enumerate(_parallel_frames(n_frames, make_frame, workers)):
        frames[k] = f
    return FrameSequence(spec, frames, start_time_s=start_time_s, seed=seed)


def box_downsample(frames: np.ndarray, factor: int, max_value: float = 1.0) -> np.ndarray:
    """Average ``factor x factor`` pixel groups and normalize into ``[0, 1]``."""
    frames = np.asarray(frames, dtype=np.float64)
    if factor < 1:
        raise DomainError("factor must be >= 1")
    n, h, w = frames.shape
    h2, w2 = h // factor, w // factor
    trimmed = frames[:, : h2 * factor, : w2 * factor]
    out = trimmed.reshape(n, h2, factor, w2, factor).mean(axis=(2, 4))
    return out / max_value


def sample_jot_sequence(flux, spec: SensorSpec, trajectory: MotionTrajectory | None = None,
                        n_frames: int = 1, oversample: int = 1, seed: int = 0,
                        boundary_flux: float = 0.0, raw: bool = False,
                        workers: int = 1) -> FrameSequence:
    """Simulate a jot (quanta image sensor) sequence.

    ``flux`` is given on the jot grid.  Each jot collects a Poisson number
    of photo- and dark electrons, picks up Gaussian read noise, and is
    rounded and clamped to the ADC range.  Unless ``raw`` is set the frames
    are then box-filtered by ``oversample`` and normalized to ``[0, 1]``,
    which is the form the alignment stage consumes.
    """
    if spec.kind != "jot":
        raise DomainError("sample_jot_sequence needs a jot sensor")
    flux = check_flux(flux)
    trajectory = trajectory or MotionTrajectory.static()
    tau = spec.frame_exposure_s
    times = _frame_times(spec, n_frames, 0.0, spec.period_s)
    top = spec.max_value

    def make_frame(k: int) -> np.ndarray:
        rng = frame_rng(seed, k)
        warped = warp_flux(flux, trajectory, times[k], k, boundary_flux)
        electrons = rng.poisson(warped * tau * spec.eta + spec.dark_current_eps * tau).astype(np.float64)
        if spec.read_noise_e > 0:
            electrons += rng.normal(0.0, spec.read_noise_e, size=electrons.shape)
        return np.clip(np.rint(electrons), 0, top).astype(np.uint8 if top < 256 else np.uint16)

    frames = np.stack(_parallel_frames(n_frames, make_frame, workers))
    seq = FrameSequence(spec, frames, seed=seed)
    if raw:
        return seq
    return FrameSequence(spec, box_downsample(frames, oversample, top), seed=seed)


@dataclass
class ExposurePlan:
    """Total exposure and frame count chosen by :func:`plan_exposure`."""

    total_exposure_s: float
    n_frames: int
    frame_exposure_s: float
    target_count: float
    max_total_motion_px: float
    max_frame_motion_px: float
    speed_px_per_s: float
    mean_flux: float
    motion_limited: bool


def plan_exposure(phi_mean: float, v: float, spec: SensorSpec, c_t: float = 1000.0,
                  m_max: float = 60.0, m_f: float = 1.0) -> ExposurePlan:
    """Pick total exposure ``T`` and number of frames for a burst.

    ``T = min(c_t / phi, m_max / v)``.  Conventional bursts use the fewest
    frames keeping per-frame motion under ``m_f`` pixels; quanta bursts run
    at the sensor's full frame rate.
    """
    if c_t <= 0 or m_max <= 0 or m_f <= 0:
        raise DomainError("c_t, m_max and m_f must be positive")
    if phi_mean < 0 or v < 0:
        raise DomainError("flux and speed must be nonnegative")
    t_photons = c_t / phi_mean if phi_mean > 0 else math.inf
    t_motion = m_max / v if v > 0 else math.inf
    T = min(t_photons, t_motion)
    if math.isinf(T):
        raise DomainError("zero flux and zero speed give an unbounded exposure")
    if spec.kind == "conventional":
        n = max(1, math.ceil(v * T / m_f - 1e-9))
        tau = T / n
    else:
        # tolerate round-off in T / tau before flooring
        n = math.floor(T / spec.frame_exposure_s + 1e-9)
        tau = spec.frame_exposure_s
    return ExposurePlan(T, n, tau, c_t, m_max, m_f, v, phi_mean, t_motion < t_photons)


def emulate_conventional_burst(flux, spec: SensorSpec, trajectory: MotionTrajectory | None,
                               plan: ExposurePlan, seed: int = 0, boundary_flux: float = 0.0,
                               workers: int = 1) -> FrameSequence:
    """Simulate a conventional burst following ``plan``.

    Frames are in electrons at unit conversion gain: Poisson signal plus
    Poisson dark current plus Gaussian read noise, rounded and clamped to
    ``[0, full_well - 1]``.  The sensor bit depth only sets the storage width.
    """
    if spec.kind != "conventional":
        raise DomainError("emulate_conventional_burst needs a conventional sensor")
    flux = check_flux(flux)
    trajectory = trajectory or MotionTrajectory.static()
    tau = plan.frame_exposure_s
    frame_spec = spec.replace(frame_exposure_s=tau, frame_period_s=None)
    times = _frame_times(frame_spec, plan.n_frames, 0.0, tau)
    top = spec.full_well_e - 1

    def make_frame(k: int) -> np.ndarray:
        rng = frame_rng(seed, k)
        warped = warp_flux(flux, trajectory, times[k], k, boundary_flux)
        value = rng.poisson(warped * tau * spec.eta).astype(np.float64)
        value += rng.poisson(tau * spec.dark_current_eps, size=value.shape)
        if spec.read_noise_e > 0:
            value += rng.normal(0.0, spec.read_noise_e, size=value.shape)
        return np.clip(np.rint(value), 0, top).astype(np.uint16 if top < 65536 else np.uint32)

    frames = np.stack(_parallel_frames(plan.n_frames, make_frame, workers))
    return FrameSequence(frame_spec, frames, seed=seed)


def build_dcr_map(dark_sequence: FrameSequence, hot_threshold_cps: float) -> DcrMap:
    """Estimate per-pixel dark count rates from a sequence captured in the dark.

    Pixels that fired in every frame have an unbounded estimate and are
    always flagged hot.
    """
    if hot_threshold_cps <= 0:
        raise DomainError("hot_threshold_cps must be positive")
    n = dark_sequence.n_frames
    s = dark_sequence.frames.sum(axis=0, dtype=np.int64).astype(np.float64)
    with np.errstate(divide="ignore"):
        dcr = -np.log1p(-s / n) / dark_sequence.spec.frame_exposure_s
    return DcrMap(dcr, (dcr > hot_threshold_cps) | (s >= n), hot_threshold_cps)


def static_sum(flux, spec: SensorSpec, n_frames: int, seed: int = 0) -> SumImage:
    """Binomial shortcut for the sum of ``n_frames`` static SPAD frames."""
    p = -np.expm1(-exposure_rate(check_flux(flux), spec))
    rng = np.random.default_rng(seed)
    return SumImage(rng.binomial(n_frames, p).astype(np.int32), n_frames)
