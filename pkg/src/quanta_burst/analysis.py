"""SNR and dynamic-range comparisons between quanta and conventional bursts.

Both sensors are assumed perfectly aligned, so each reconstruction's error is
its closed-form RMSE: the Fisher bound for the SPAD flux MLE and the
shot + dark + read noise model for averaged conventional frames.  The
exposure of each burst comes from the same auto-exposure rule.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core_model import DomainError, SensorSpec, fisher_rmse_quanta, rmse_conventional
from .simulator import plan_exposure


def snr_db(phi, rmse):
    """``20 log10(phi / rmse)``."""
    phi = np.asarray(phi, dtype=np.float64)
    rmse = np.asarray(rmse, dtype=np.float64)
    if np.any(phi <= 0) or np.any(rmse <= 0):
        raise DomainError("snr_db needs positive flux and rmse")
    out = 20.0 * np.log10(phi / rmse)
    return float(out) if out.ndim == 0 else out


def _check_sorted(values, name: str, positive: bool = False):
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise DomainError(f"{name} must be nonempty")
    if np.any(np.diff(arr) < 0):
        raise DomainError(f"{name} must be sorted")
    if positive and np.any(arr <= 0):
        raise DomainError(f"{name} must be positive")
    if np.any(arr < 0):
        raise DomainError(f"{name} must be nonnegative")
    return arr


# ---------------------------------------------------------------------------
# SNR surface

@dataclass
class SnrGridSpec:
    flux_grid: Sequence[float]
    speed_grid: Sequence[float]
    quanta_spec: SensorSpec
    conv_spec: SensorSpec
    c_t: float = 1000.0
    m_max: float = 60.0
    m_f: float = 1.0

    def __post_init__(self):
        self.flux_grid = _check_sorted(self.flux_grid, "flux_grid", positive=True)
        self.speed_grid = _check_sorted(self.speed_grid, "speed_grid")
        if self.quanta_spec.kind == "conventional" or self.conv_spec.kind != "conventional":
            raise DomainError("need a photon-counting quanta_spec and a conventional conv_spec")

    @staticmethod
    def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
        return np.logspace(math.log10(lo), math.log10(hi), n)


@dataclass
class SnrRow:
    phi: float
    v: float
    snr_quanta: float
    snr_conv: float
    diff_db: float
    n_q: int = 0
    n_c: int = 0
    total_exposure_s: float = math.nan
    valid: bool = True


SNR_COLUMNS = ("phi", "v", "snr_quanta", "snr_conv", "diff_db", "n_q", "n_c", "total_exposure_s", "valid")


def snr_point(phi: float, v: float, grid: SnrGridSpec) -> SnrRow:
    """Planned exposure and both SNRs at one (flux, speed) point."""
    try:
        plan_q = plan_exposure(phi, v, grid.quanta_spec, grid.c_t, grid.m_max, grid.m_f)
        plan_c = plan_exposure(phi, v, grid.conv_spec, grid.c_t, grid.m_max, grid.m_f)
    except DomainError:
        return SnrRow(phi, v, math.nan, math.nan, math.nan, valid=False)
    if plan_q.n_frames < 1:
        # shorter than one quanta frame: no measurement possible
        return SnrRow(phi, v, math.nan, math.nan, math.nan, 0, plan_c.n_frames,
                      plan_q.total_exposure_s, valid=False)
    sq = snr_db(phi, fisher_rmse_quanta(phi, grid.quanta_spec, plan_q.n_frames))
    sc = snr_db(phi, rmse_conventional(phi, grid.conv_spec, plan_c.n_frames, plan_c.total_exposure_s))
    return SnrRow(phi, v, float(sq), float(sc), float(sq - sc), plan_q.n_frames, plan_c.n_frames,
                  plan_q.total_exposure_s)


def snr_surface(grid: SnrGridSpec) -> list[SnrRow]:
    """Rows in grid order: flux outer, speed inner."""
    return [snr_point(float(phi), float(v), grid) for phi in grid.flux_grid for v in grid.speed_grid]


def max_advantage(rows: Iterable[SnrRow]) -> SnrRow:
    valid = [r for r in rows if r.valid]
    if not valid:
        raise DomainError("no valid grid points")
    return max(valid, key=lambda r: r.diff_db)


# ---------------------------------------------------------------------------
# Dynamic range

def _frames(total_exposure_s: float, frame_rate: float) -> int:
    return int(math.floor(total_exposure_s * frame_rate + 1e-9))


def max_flux(spec: SensorSpec, total_exposure_s: float, frame_rate: float) -> float:
    """Largest measurable flux.

    SPAD: the MLE at ``S = n - 1`` detections.  Conventional: the flux whose
    expected per-frame signal is ``full_well - 1`` electrons (dark current
    ignored).
    """
    tau = 1.0 / frame_rate
    eta = float(np.mean(spec.eta))
    n = _frames(total_exposure_s, frame_rate)
    if spec.kind == "conventional":
        return (spec.full_well_e - 1) / (tau * eta)
    if n < 2:
        raise DomainError("dynamic range needs at least two photon-counting frames")
    return max(math.log(n) / (tau * eta) - spec.dcr_cps / eta, 0.0)


def snr_at(phi: float, spec: SensorSpec, total_exposure_s: float, frame_rate: float) -> float:
    """Closed-form SNR (dB) of a burst at ``frame_rate`` lasting ``total_exposure_s``."""
    n = _frames(total_exposure_s, frame_rate)
    if spec.kind == "conventional":
        rmse = rmse_conventional(phi, spec, n, n / frame_rate)
    else:
        rmse = fisher_rmse_quanta(phi, spec.replace(frame_exposure_s=1.0 / frame_rate), n)
    return float(snr_db(phi, rmse))


def min_flux(spec: SensorSpec, total_exposure_s: float, frame_rate: float, snr_floor_db: float = 0.0,
             lo: float = 1e-3, hi: float | None = None, iters: int = 200) -> float:
    """Smallest flux whose SNR reaches ``snr_floor_db``, by bisection in log flux.

    Returns NaN when even ``hi`` (default: the maximum measurable flux) falls
    short of the floor.
    """
    if hi is None:
        hi = min(max_flux(spec, total_exposure_s, frame_rate), 1e12)
    f = lambda phi: snr_at(phi, spec, total_exposure_s, frame_rate) - snr_floor_db
    if not hi > lo or f(hi) < 0:
        return math.nan
    if f(lo) >= 0:
        return lo
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if f(math.exp(m)) >= 0:
            b = m
        else:
            a = m
        if b - a < 1e-15:
            break
    return math.exp(b)


def dynamic_range_db(spec: SensorSpec, total_exposure_s: float, frame_rate: float,
                     snr_floor_db: float = 0.0) -> float:
    """``20 log10(phi_max / phi_min)`` for a burst of the given length and frame rate."""
    if frame_rate <= 0 or total_exposure_s <= 0:
        raise DomainError("frame_rate and total exposure must be positive")
    n = _frames(total_exposure_s, frame_rate)
    if n < 1:
        raise DomainError("exposure is shorter than one frame")
    hi = max_flux(spec, total_exposure_s, frame_rate)
    lo = min_flux(spec, total_exposure_s, frame_rate, snr_floor_db, hi=min(hi, 1e12))
    if not lo > 0:
        return math.nan
    return 20.0 * math.log10(hi / lo)


@dataclass
class DrSpec:
    exposure_grid: Sequence[float]
    quanta_rates: Sequence[float] = (1e5,)
    conv_rates: Sequence[float] = (1e3,)
    snr_floor_db: float = 0.0

    def __post_init__(self):
        self.exposure_grid = _check_sorted(self.exposure_grid, "exposure_grid", positive=True)
        self.quanta_rates = [float(r) for r in _check_sorted(self.quanta_rates, "quanta_rates", positive=True)]
        self.conv_rates = [float(r) for r in _check_sorted(self.conv_rates, "conv_rates", positive=True)]


@dataclass
class DrRow:
    exposure_s: float
    kind: str
    frame_rate: float
    dr_db: float


DR_COLUMNS = ("exposure_s", "kind", "frame_rate", "dr_db")


@dataclass
class DrCurves:
    rows: list[DrRow]
    crossovers: dict[tuple[float, float], float | None] = field(default_factory=dict)


def _dr_or_nan(spec, T, rate, floor):
    try:
        return dynamic_range_db(spec, T, rate, floor)
    except DomainError:
        return math.nan


def crossover_exposure(quanta_spec: SensorSpec, conv_spec: SensorSpec, quanta_rate: float, conv_rate: float,
                       lo: float, hi: float, snr_floor_db: float = 0.0, iters: int = 60) -> float | None:
    """Exposure at which quanta DR overtakes conventional DR, bisected on ``[lo, hi]``.

    Needs quanta behind at ``lo`` and ahead at ``hi``; returns ``None`` otherwise.
    """
    def ahead(T):
        q = _dr_or_nan(quanta_spec, T, quanta_rate, snr_floor_db)
        c = _dr_or_nan(conv_spec, T, conv_rate, snr_floor_db)
        return bool(q > c)

    if ahead(lo) or not ahead(hi):
        return None
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if ahead(math.exp(m)):
            b = m
        else:
            a = m
    return math.exp(b)


def dr_curves(quanta_spec: SensorSpec, conv_spec: SensorSpec, dr_spec: DrSpec) -> DrCurves:
    """DR versus exposure for every frame rate, plus quanta/conventional crossovers.

    Points with too few frames are reported as NaN.  A crossover is the
    exposure after the last grid point where quanta DR trails conventional
    DR, refined by bisection between neighbouring grid points.
    """
    grid = dr_spec.exposure_grid
    rows = []
    table: dict[tuple[str, float], np.ndarray] = {}
    for kind, spec, rates in (("quanta", quanta_spec, dr_spec.quanta_rates),
                              ("conventional", conv_spec, dr_spec.conv_rates)):
        for rate in rates:
            vals = np.array([_dr_or_nan(spec, float(T), rate, dr_spec.snr_floor_db) for T in grid])
            table[(kind, rate)] = vals
            rows.extend(DrRow(float(T), kind, float(rate), float(d)) for T, d in zip(grid, vals))
    crossovers: dict[tuple[float, float], float | None] = {}
    for qr in dr_spec.quanta_rates:
        for cr in dr_spec.conv_rates:
            q = table[("quanta", qr)]
            c = table[("conventional", cr)]
            ahead = q > c  # NaN compares False
            if not ahead[-1]:
                crossovers[(qr, cr)] = None
                continue
            behind = np.nonzero(~ahead)[0]
            if behind.size == 0:
                crossovers[(qr, cr)] = float(grid[0])
                continue
            k = behind[-1]
            crossovers[(qr, cr)] = crossover_exposure(quanta_spec, conv_spec, qr, cr, float(grid[k]),
                                                      float(grid[k + 1]), dr_spec.snr_floor_db)
    return DrCurves(rows, crossovers)


# ---------------------------------------------------------------------------
# CSV

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def rows_to_csv(rows, columns: Sequence[str], path=None) -> str:
    """Render dataclass rows as CSV (header first); also write to ``path`` if given."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
