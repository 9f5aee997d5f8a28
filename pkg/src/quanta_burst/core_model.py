"""Closed-form statistics of single-photon and conventional image sensors.

A SPAD pixel observing flux ``phi`` (photons/s) during a frame of ``tau``
seconds records a one with probability ``1 - exp(-(phi*tau*eta + dcr*tau))``.
Summing ``n`` such frames gives a binomial count from which the flux is
recovered by maximum likelihood.  Conventional sensors follow the usual
affine shot + dark + read noise model.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

SENSOR_KINDS = ("spad", "jot", "conventional")


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a model formula."""


class SaturationError(DomainError):
    """Raised when a sum image contains saturated pixels (``S == n``).

    The boolean ``mask`` attribute marks the offending pixels.
    """

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        n = int(self.mask.sum())
        super().__init__(f"{n} saturated pixel(s) with S == n; MLE is unbounded there")


@dataclass(frozen=True)
class SensorSpec:
    """Physical parameters of one sensor.

    ``pde`` is either a scalar or a per-channel tuple (broadcast against the
    last axis of a colour flux image).  ``dcr_cps`` is the SPAD dark count
    rate, ``dark_current_eps`` the conventional/jot dark current.
    """

    kind: str
    frame_exposure_s: float
    pde: float | tuple[float, ...] = 1.0
    dcr_cps: float = 0.0
    dark_current_eps: float = 0.0
    read_noise_e: float = 0.0
    bit_depth: int = 1
    full_well_e: int = 10_000
    frame_period_s: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in SENSOR_KINDS:
            raise DomainError(f"unknown sensor kind {self.kind!r}")
        if not self.frame_exposure_s > 0:
            raise DomainError("frame_exposure_s must be positive")
        pde = np.atleast_1d(np.asarray(self.pde, dtype=float))
        if np.any(pde <= 0) or np.any(pde > 1):
            raise DomainError("pde must lie in (0, 1]")
        if self.dcr_cps < 0 or self.dark_current_eps < 0 or self.read_noise_e < 0:
            raise DomainError("noise rates must be nonnegative")
        if self.bit_depth < 1:
            raise DomainError("bit_depth must be >= 1")
        if self.full_well_e < 1:
            raise DomainError("full_well_e must be >= 1")
        if self.kind == "spad" and (self.read_noise_e != 0 or self.bit_depth != 1):
            raise DomainError("a SPAD has zero read noise and bit depth 1")
        if self.frame_period_s is not None and self.frame_period_s < self.frame_exposure_s:
            raise DomainError("frame_period_s must be >= frame_exposure_s")

    @property
    def period_s(self) -> float:
        return self.frame_exposure_s if self.frame_period_s is None else self.frame_period_s

    @property
    def eta(self) -> np.ndarray | float:
        pde = np.asarray(self.pde, dtype=float)
        return float(pde) if pde.ndim == 0 else pde

    @property
    def max_value(self) -> int:
        return 2 ** self.bit_depth - 1

    def replace(self, **changes) -> "SensorSpec":
        return dataclasses.replace(self, **changes)

    def to_items(self) -> list[tuple[str, str]]:
        """Flat ``key, value`` pairs, used by the container metadata block."""
        items = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            items.append((f.name, "" if value is None else str(value)))
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "SensorSpec":
        kw: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in ("kind", "name"):
                kw[f.name] = raw
            elif f.name in ("bit_depth", "full_well_e"):
                kw[f.name] = int(raw)
            elif f.name == "frame_period_s":
                kw[f.name] = float(raw) if raw else None
            elif f.name == "pde":
                parts = [float(p) for p in raw.split(",")]
                kw[f.name] = parts[0] if len(parts) == 1 else tuple(parts)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


# Sensor presets; the conventional full well is an assumed value and
# defaults to 10 000 e-.
PRESETS: dict[str, SensorSpec] = {
    "spad-swiss2": SensorSpec(
        kind="spad", frame_exposure_s=1 / 97_700, pde=0.23, dcr_cps=7.5, name="spad-swiss2"
    ),
    "conv-machinevision": SensorSpec(
        kind="conventional", frame_exposure_s=1e-3, pde=0.64, dark_current_eps=1.0,
        read_noise_e=2.4, bit_depth=10, full_well_e=10_000, name="conv-machinevision",
    ),
    "conv-iphone7": SensorSpec(
        kind="conventional", frame_exposure_s=1e-3, pde=0.64, dark_current_eps=1.0,
        read_noise_e=0.68, bit_depth=10, full_well_e=10_000, name="conv-iphone7",
    ),
    "jot": SensorSpec(
        kind="jot", frame_exposure_s=1e-3, pde=0.71, dark_current_eps=0.16,
        read_noise_e=0.24, bit_depth=1, name="jot",
    ),
}

# Full RGB photon detection efficiencies from the same table.
RGB_PDE = {
    "spad-swiss2": (0.17, 0.23, 0.21),
    "conv-machinevision": (0.59, 0.64, 0.47),
    "jot": (0.64, 0.71, 0.62),
}


def preset(name: str, **overrides) -> SensorSpec:
    """Return a named sensor preset, optionally with fields overridden."""
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return spec.replace(**overrides) if overrides else spec


@dataclass
class SumImage:
    """Per-pixel sum of ``n_frames`` binary frames."""

    counts: np.ndarray
    n_frames: int
    center_frame: int | None = None
    saturated: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.n_frames < 1:
            raise DomainError("n_frames must be >= 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts.shape


def check_flux(flux) -> np.ndarray:
    """Validate a flux image (nonnegative and finite) and return it as float64."""
    flux = np.asarray(flux, dtype=np.float64)
    if not np.all(np.isfinite(flux)):
        raise DomainError("flux must be finite")
    if np.any(flux < 0):
        raise DomainError("flux must be nonnegative")
    return flux


def _require(spec: SensorSpec, kind: str):
    if spec.kind != kind:
        raise DomainError(f"expected a {kind} sensor, got {spec.kind}")


def _dcr(spec: SensorSpec, dcr):
    return spec.dcr_cps if dcr is None else np.asarray(dcr, dtype=np.float64)


def exposure_rate(phi, spec: SensorSpec, dcr=None):
    """Mean number of detection events per frame, ``phi*tau*eta + dcr*tau``."""
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(phi < 0):
        raise DomainError("flux must be nonnegative")
    tau = spec.frame_exposure_s
    return phi * tau * spec.eta + _dcr(spec, dcr) * tau


def detection_probability(phi, spec: SensorSpec, dcr=None):
    """Probability that a SPAD pixel fires during one frame."""
    _require(spec, "spad")
    return -np.expm1(-exposure_rate(phi, spec, dcr))


def expected_sum(phi, spec: SensorSpec, n_frames: int, dcr=None):
    """Expected sum of ``n_frames`` binary frames (the SPAD response curve)."""
    if n_frames < 1:
        raise DomainError("n_frames must be >= 1")
    return n_frames * detection_probability(phi, spec, dcr)


def saturation_mask(counts, n_frames: int) -> np.ndarray:
    return np.asarray(counts) >= n_frames


def mle_flux(sum_image: SumImage, spec: SensorSpec, dcr=None, saturated: str = "raise") -> np.ndarray:
    """Maximum-likelihood flux from a sum image.

    Parameters
    ----------
    sum_image : SumImage
        Counts ``S`` over ``n`` frames.
    spec : SensorSpec
        SPAD parameters; ``dcr`` optionally overrides ``spec.dcr_cps`` with a
        per-pixel map.
    saturated : {"raise", "clip"}
        Pixels with ``S == n`` have an unbounded MLE.  ``"raise"`` throws
        :class:`SaturationError`; ``"clip"`` evaluates them at ``S = n - 1``
        and records the mask on ``sum_image.saturated``.

    Returns
    -------
    ndarray
        Flux estimate in photons/s, clamped at zero.
    """
    _require(spec, "spad")
    n = sum_image.n_frames
    counts = np.asarray(sum_image.counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DomainError("counts must be nonnegative")
    sat = counts >= n
    if sat.any():
        if saturated == "raise":
            raise SaturationError(sat)
        counts = np.minimum(counts, n - 1)
    sum_image.saturated = sat
    tau_eta = spec.frame_exposure_s * np.asarray(spec.eta)
    phi = -np.log1p(-counts / n) / tau_eta - _dcr(spec, dcr) / np.asarray(spec.eta)
    return np.maximum(phi, 0.0)


def binomial_log_likelihood(s, n_q: int, phi, spec: SensorSpec, dcr=None):
    """Log of ``C(n, s) p1^s p0^(n-s)`` with ``p0 = exp(-lambda)``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > n_q):
        raise DomainError("s must lie in [0, n_q]")
    lam = exposure_rate(phi, spec, dcr)
    log_coef = gammaln(n_q + 1) - gammaln(s + 1) - gammaln(n_q - s + 1)
    with np.errstate(divide="ignore"):
        log_p1 = np.log(-np.expm1(-lam))
    # 0 * log(0) is 0 for the s == 0 case
    ones_term = s * np.where(s > 0, log_p1, 0.0)
    return log_coef + ones_term - (n_q - s) * lam


def fisher_rmse_quanta(phi, spec: SensorSpec, n_q: int):
    """Cramer-Rao RMSE of the SPAD flux MLE after ``n_q`` frames."""
    if n_q < 1:
        raise DomainError("n_q must be >= 1")
    lam = exposure_rate(phi, spec)
    tau_eta = spec.frame_exposure_s * np.asarray(spec.eta)
    return np.sqrt(np.expm1(lam) / (n_q * tau_eta**2))


def conventional_estimate(frames, spec: SensorSpec, frame_exposure_s: float | None = None):
    """Average-of-frames flux estimator with dark-current subtraction."""
    frames = np.asarray(frames, dtype=np.float64)
    tau = spec.frame_exposure_s if frame_exposure_s is None else frame_exposure_s
    n_c = frames.shape[0]
    return (frames - tau * spec.dark_current_eps).sum(axis=0) / (n_c * tau * np.asarray(spec.eta))


def rmse_conventional(phi, spec: SensorSpec, n_c: int, total_exposure_s: float):
    """RMSE of :func:`conventional_estimate` over ``n_c`` frames totalling ``T`` seconds."""
    _require(spec, "conventional")
    if n_c < 1 or total_exposure_s <= 0:
        raise DomainError("need n_c >= 1 and a positive total exposure")
    phi = np.asarray(phi, dtype=np.float64)
    eta = np.asarray(spec.eta)
    T = total_exposure_s
    shot = (phi * eta + spec.dark_current_eps) / (T * eta**2)
    read = n_c * spec.read_noise_e**2 / (T**2 * eta**2)
    return np.sqrt(shot + read)


def response_curve_samples(spec: SensorSpec, n_q: int, phi_grid: Sequence[float]) -> list[tuple[float, float]]:
    """``(phi, expected detected count)`` pairs for plotting a response curve.

    SPADs report the expected sum over ``n_q`` frames; conventional sensors
    report the expected per-frame electron count, hard-clamped at the full
    well.
    """
    grid = np.asarray(list(phi_grid), dtype=np.float64)
    if grid.size == 0:
        raise DomainError("phi_grid must be nonempty")
    if spec.kind == "spad":
        values = expected_sum(grid, spec, n_q)
    else:
        values = np.minimum(grid * spec.frame_exposure_s * spec.eta, spec.full_well_e - 1)
    return [(float(p), float(v)) for p, v in zip(grid, np.broadcast_to(values, grid.shape))]


@dataclass
class FrameSequence:
    """An ordered stack of frames with timing metadata.

    ``frames`` has shape ``(n_frames, H, W)``.  Binary SPAD/jot frames are
    held unpacked as ``uint8`` in memory; the ``.qbs`` container packs them
    to one bit per pixel.  Box-filtered jot sequences carry float frames in
    ``[0, 1]``.
    """

    spec: SensorSpec
    frames: np.ndarray
    start_time_s: float = 0.0
    frame_period_s: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise DomainError("frames must have shape (n_frames, H, W)")
        if self.frame_period_s is None:
            self.frame_period_s = self.spec.period_s
        if self.frame_period_s < self.spec.frame_exposure_s:
            raise DomainError("frame_period_s must be >= frame_exposure_s")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def frame_time(self, k):
        """Mid-exposure time of frame ``k``."""
        return self.start_time_s + np.asarray(k) * self.frame_period_s + 0.5 * self.spec.frame_exposure_s

    def total_sum(self) -> SumImage:
        return SumImage(self.frames.sum(axis=0, dtype=np.int64), self.n_frames)
