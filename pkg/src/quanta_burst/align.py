"""Patch-wise motion estimation between block-sum images.

Flow convention: a patch flow ``(u, v)`` at patch ``(i, j)`` means the
content of the reference patch is found in the auxiliary image displaced by
``u`` columns and ``v`` rows.  Flow grids have shape ``(gh, gw, 2)`` with the
last axis holding ``(u, v)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize

from .core_model import DomainError, FrameSequence, SumImage


@dataclass
class AlignConfig:
    block_size_frames: int = 100
    patch_size_px: int = 16
    pyramid_levels: int = 3
    search_radius_px: int | Sequence[int] = 4
    lambda_reg: float = 0.0
    charbonnier_eps: float = 1e-3
    reg_iterations: int = 100
    match_presmooth_px: float = 1.0
    reg_presmooth_px: float = 1.0

    def __post_init__(self):
        if self.block_size_frames < 1 or self.patch_size_px < 1 or self.pyramid_levels < 1:
            raise DomainError("block size, patch size and pyramid levels must be >= 1")
        if self.lambda_reg < 0 or self.charbonnier_eps <= 0:
            raise DomainError("lambda_reg must be >= 0 and charbonnier_eps > 0")

    def radius(self, level: int) -> int:
        """Search radius at pyramid ``level`` (0 is full resolution)."""
        r = self.search_radius_px
        if isinstance(r, int):
            return r
        r = list(r)
        return r[min(level, len(r) - 1)]


@dataclass
class PatchFlow:
    """Per-patch 2D motion at one timestamp."""

    flow: np.ndarray
    patch_size: int
    timestamp: float = 0.0
    granularity: str = "block"
    warning: str | None = None
    energy_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise DomainError("flow must have shape (gh, gw, 2)")

    @classmethod
    def zeros(cls, image_shape, patch_size: int, timestamp: float = 0.0, granularity: str = "block"):
        gh, gw = grid_shape(image_shape, patch_size)
        return cls(np.zeros((gh, gw, 2)), patch_size, timestamp, granularity)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    def pixel_flow(self, image_shape) -> np.ndarray:
        """Piecewise-constant per-pixel expansion, shape ``(H, W, 2)``."""
        h, w = image_shape
        M = self.patch_size
        rows = np.minimum(np.arange(h) // M, self.flow.shape[0] - 1)
        cols = np.minimum(np.arange(w) // M, self.flow.shape[1] - 1)
        return self.flow[rows[:, None], cols[None, :]]


def grid_shape(image_shape, patch_size: int) -> tuple[int, int]:
    h, w = image_shape[:2]
    return math.ceil(h / patch_size), math.ceil(w / patch_size)


def charbonnier(x, eps: float):
    return np.sqrt(np.square(x) + eps * eps)


def block_sums(seq: FrameSequence, block_size: int) -> list[SumImage]:
    """Sum non-overlapping temporal blocks; a trailing partial block is dropped."""
    if block_size < 1:
        raise DomainError("block_size must be >= 1")
    n_blocks = seq.n_frames // block_size
    if n_blocks == 0:
        raise DomainError(f"block_size {block_size} exceeds the {seq.n_frames} available frames")
    out = []
    dtype = np.float64 if seq.frames.dtype.kind == "f" else np.int32
    for b in range(n_blocks):
        chunk = seq.frames[b * block_size:(b + 1) * block_size]
        out.append(SumImage(chunk.sum(axis=0, dtype=dtype), block_size,
                            center_frame=b * block_size + block_size // 2))
    return out


def _as_array(img) -> np.ndarray:
    return np.asarray(img.counts if isinstance(img, SumImage) else img, dtype=np.float64)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def build_pyramid(img, levels: int) -> list[np.ndarray]:
    """2x2 box pyramid, finest level first."""
    pyr = [_as_array(img)]
    for _ in range(1, levels):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _candidates(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(r, r, indexing="ij")
    return np.stack([du.ravel(), dv.ravel()], axis=1)


def _patch_geometry(shape, M: int):
    """Row/col pixel indices of every patch, plus a validity mask."""
    h, w = shape
    gh, gw = grid_shape(shape, M)
    ys = np.arange(gh)[:, None] * M + np.arange(M)[None, :]
    xs = np.arange(gw)[:, None] * M + np.arange(M)[None, :]
    valid = (ys[:, None, :, None] < h) & (xs[None, :, None, :] < w)
    return ys, xs, valid


def _match_all(ref: np.ndarray, aux: np.ndarray, M: int, radius: int, init: np.ndarray):
    """Exhaustive L1 search around integer ``init`` for every patch at once.

    Returns the best integer flow ``(gh, gw, 2)`` and its matching error.
    Ties go to the smallest motion vector (L2 norm), then smallest ``u``,
    then smallest ``v``.
    """
    h, w = ref.shape
    ys, xs, valid = _patch_geometry(ref.shape, M)
    gh, gw = ys.shape[0], xs.shape[0]
    ref_p = ref[np.minimum(ys, h - 1)[:, None, :, None], np.minimum(xs, w - 1)[None, :, None, :]]
    init = np.rint(init).astype(np.int64)
    cands = _candidates(radius)
    errors = np.empty((gh, gw, len(cands)))
    for c, (du, dv) in enumerate(cands):
        u = init[..., 0] + du
        v = init[..., 1] + dv
        yy = np.clip(ys[:, None, :, None] + v[:, :, None, None], 0, h - 1)
        xx = np.clip(xs[None, :, None, :] + u[:, :, None, None], 0, w - 1)
        diff = np.abs(aux[yy, xx] - ref_p)
        errors[..., c] = np.where(valid, diff, 0.0).sum(axis=(2, 3))
    total = init[:, :, None, :] + cands[None, None, :, :]
    best = errors.min(axis=2, keepdims=True)
    tie = errors <= best
    norm2 = np.where(tie, (total**2).sum(axis=3), np.iinfo(np.int64).max)
    tie &= norm2 == norm2.min(axis=2, keepdims=True)
    big = np.iinfo(np.int64).max
    uu = np.where(tie, total[..., 0], big)
    tie &= uu == uu.min(axis=2, keepdims=True)
    vv = np.where(tie, total[..., 1], big)
    tie &= vv == vv.min(axis=2, keepdims=True)
    pick = tie.argmax(axis=2)
    flow = np.take_along_axis(total, pick[:, :, None, None], axis=2)[:, :, 0, :]
    return flow.astype(np.float64), best[..., 0]


def match_patch(ref, aux, i: int, j: int, M: int, search_radius: int,
                init=(0, 0)) -> tuple[int, int, float]:
    """Best integer displacement of reference patch ``(i, j)`` (row ``i``, column ``j``).

    Minimizes the L1 matching error over a ``(2r+1)^2`` window centred on
    ``init``; out-of-image auxiliary pixels are read with clamped indices.
    """
    ref = _as_array(ref)
    aux = _as_array(aux)
    gh, gw = grid_shape(ref.shape, M)
    if not (0 <= i < gh and 0 <= j < gw):
        raise DomainError("patch index outside the image")
    y0, x0 = i * M, j * M
    sub_ref = ref[y0:y0 + M, x0:x0 + M]
    h, w = ref.shape
    best = None
    for du, dv in _candidates(search_radius):
        u, v = int(round(init[0])) + du, int(round(init[1])) + dv
        yy = np.clip(np.arange(y0, y0 + sub_ref.shape[0]) + v, 0, h - 1)
        xx = np.clip(np.arange(x0, x0 + sub_ref.shape[1]) + u, 0, w - 1)
        e = float(np.abs(aux[np.ix_(yy, xx)] - sub_ref).sum())
        key = (e, u * u + v * v, u, v)
        if best is None or key < best:
            best = key
    e, _, u, v = best
    return u, v, e


def hierarchical_align(ref, aux, cfg: AlignConfig) -> PatchFlow:
    """Coarse-to-fine patch matching on a 2x2 box pyramid.

    The same patch size is used on every level; each finer level starts
    from the parent patch's flow scaled by two.  Both images are lightly
    Gaussian-smoothed first (``cfg.match_presmooth_px``) to tame shot noise.
    """
    ref_a, aux_a = _as_array(ref), _as_array(aux)
    if ref_a.shape != aux_a.shape:
        raise DomainError("reference and auxiliary images must have the same shape")
    if cfg.match_presmooth_px > 0:
        ref_a = ndimage.gaussian_filter(ref_a, cfg.match_presmooth_px, mode="nearest")
        aux_a = ndimage.gaussian_filter(aux_a, cfg.match_presmooth_px, mode="nearest")
    M = cfg.patch_size_px
    levels = cfg.pyramid_levels
    pref = build_pyramid(ref_a, levels)
    paux = build_pyramid(aux_a, levels)
    flow = None
    for lvl in range(levels - 1, -1, -1):
        gh, gw = grid_shape(pref[lvl].shape, M)
        if flow is None:
            init = np.zeros((gh, gw, 2))
        else:
            pi = np.minimum(np.arange(gh) // 2, flow.shape[0] - 1)
            pj = np.minimum(np.arange(gw) // 2, flow.shape[1] - 1)
            init = 2 * flow[pi[:, None], pj[None, :]]
        flow, _ = _match_all(pref[lvl], paux[lvl], M, cfg.radius(lvl), init)
    ts = ref.center_frame if isinstance(ref, SumImage) and ref.center_frame is not None else 0
    return PatchFlow(flow, M, float(ts), "block")


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray):
    """Bilinear samples and their x/y derivatives, with clamped borders."""
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    a, b, c, d = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    val = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    dx = (1 - fy) * (b - a) + fy * (d - c)
    dy = (1 - fx) * (c - a) + fx * (d - b)
    return val, dx, dy


class _FlowEnergy:
    """Charbonnier data + smoothness energy over a patch grid."""

    def __init__(self, ref: np.ndarray, aux: np.ndarray, M: int, lam: float, eps: float):
        self.ref, self.aux, self.M, self.lam, self.eps = ref, aux, M, lam, eps
        h, w = ref.shape
        ys, xs, valid = _patch_geometry(ref.shape, M)
        self.Y = np.minimum(ys, h - 1)[:, None, :, None].astype(np.float64)
        self.X = np.minimum(xs, w - 1)[None, :, None, :].astype(np.float64)
        self.valid = valid
        self.ref_p = ref[self.Y.astype(np.int64), self.X.astype(np.int64)]

    def data(self, flow: np.ndarray, grad: bool = False):
        u = flow[..., 0][:, :, None, None]
        v = flow[..., 1][:, :, None, None]
        val, dx, dy = _bilinear(self.aux, self.Y + v, self.X + u)
        r = val - self.ref_p
        rho = np.where(self.valid, charbonnier(r, self.eps), 0.0)
        e = rho.sum(axis=(2, 3))
        if not grad:
            return e, None
        w = np.where(self.valid, r / charbonnier(r, self.eps), 0.0)
        g = np.stack([(w * dx).sum(axis=(2, 3)), (w * dy).sum(axis=(2, 3))], axis=-1)
        return e, g

    def smooth(self, flow: np.ndarray, grad: bool = False):
        e = 0.0
        g = np.zeros_like(flow) if grad else None
        for axis in (0, 1):
            d = np.diff(flow, axis=axis)
            e += charbonnier(d, self.eps).sum()
            if grad:
                dr = d / charbonnier(d, self.eps)
                pad_lo = [(0, 0)] * 3
                pad_hi = [(0, 0)] * 3
                pad_lo[axis] = (1, 0)
                pad_hi[axis] = (0, 1)
                # d[k] = f[k+1] - f[k]: +dr to f[k+1], -dr to f[k]
                g += np.pad(dr, pad_lo) - np.pad(dr, pad_hi)
        return e, g

    def total(self, flow: np.ndarray, grad: bool = False):
        ed, gd = self.data(flow, grad)
        es, gs = self.smooth(flow, grad) if self.lam > 0 else (0.0, None)
        e = float(ed.sum() + self.lam * es)
        if not grad:
            return e, None
        g = gd if gs is None else gd + self.lam * gs
        return e, g


def flow_energy(flow: PatchFlow | np.ndarray, ref, aux, cfg: AlignConfig) -> float:
    """Regularized matching energy of a flow grid (Charbonnier form)."""
    f = flow.flow if isinstance(flow, PatchFlow) else np.asarray(flow, dtype=np.float64)
    ref_a, aux_a = _prepare_reg_images(ref, aux, cfg)
    return _FlowEnergy(ref_a, aux_a, cfg.patch_size_px, cfg.lambda_reg, cfg.charbonnier_eps).total(f)[0]


def _prepare_reg_images(ref, aux, cfg: AlignConfig):
    ref_a, aux_a = _as_array(ref), _as_array(aux)
    if cfg.reg_presmooth_px > 0:
        ref_a = ndimage.gaussian_filter(ref_a, cfg.reg_presmooth_px, mode="nearest")
        aux_a = ndimage.gaussian_filter(aux_a, cfg.reg_presmooth_px, mode="nearest")
    return ref_a, aux_a


def regularize_flow(flow: PatchFlow, ref, aux, cfg: AlignConfig) -> PatchFlow:
    """Refine a finest-level flow by minimizing data + lambda * TV energy.

    Both L1 terms use the Charbonnier penalty and the data term samples the
    auxiliary image bilinearly, so the result is sub-pixel.  The energy is
    smooth, so it is minimized with L-BFGS for at most ``cfg.reg_iterations``
    iterations; if the solver ends above the starting energy the input flow
    is returned, so the output energy never exceeds the input energy.
    """
    ref_a, aux_a = _prepare_reg_images(ref, aux, cfg)
    energy = _FlowEnergy(ref_a, aux_a, flow.patch_size, cfg.lambda_reg, cfg.charbonnier_eps)
    shape = flow.flow.shape

    def fun(x):
        e, g = energy.total(x.reshape(shape), grad=True)
        return e, g.ravel()

    e0 = energy.total(flow.flow)[0]
    history = [e0]
    res = optimize.minimize(fun, flow.flow.ravel(), jac=True, method="L-BFGS-B",
                            callback=lambda x: history.append(energy.total(x.reshape(shape))[0]),
                            options={"maxiter": cfg.reg_iterations})
    f = res.x.reshape(shape)
    e = energy.total(f)[0]
    if not e <= e0:
        f, e = flow.flow.copy(), e0
    if history[-1] != e:
        history.append(e)
    out = PatchFlow(f, flow.patch_size, flow.timestamp, flow.granularity)
    out.energy_history = history
    return out


def interpolate_flow(block_flows: Sequence[PatchFlow], block_size: int, n_frames: int,
                     ref_frame_index: int | None = None) -> list[PatchFlow]:
    """Linear-in-time interpolation of block flows to every frame.

    Block ``b`` is timestamped at its centre frame ``b*block_size +
    block_size//2``; frames before the first or after the last centre take
    the nearest block's flow.  With ``ref_frame_index`` the result is made
    relative to that frame.
    """
    if not block_flows:
        raise DomainError("need at least one block flow")
    centers = np.array([b * block_size + block_size // 2 for b in range(len(block_flows))], dtype=np.float64)
    stack = np.stack([bf.flow for bf in block_flows])
    t = np.arange(n_frames, dtype=np.float64)
    if len(block_flows) == 1:
        frames = np.broadcast_to(stack[0], (n_frames,) + stack.shape[1:]).copy()
    else:
        k = np.clip(np.searchsorted(centers, t, side="right") - 1, 0, len(centers) - 2)
        a = np.clip((t - centers[k]) / (centers[k + 1] - centers[k]), 0.0, 1.0)
        a = a[:, None, None, None]
        frames = (1 - a) * stack[k] + a * stack[k + 1]
    if ref_frame_index is not None:
        frames = frames - frames[ref_frame_index]
    M = block_flows[0].patch_size
    return [PatchFlow(frames[i], M, float(i), "frame") for i in range(n_frames)]


def align_blocks(blocks: Sequence[SumImage], cfg: AlignConfig, ref_index: int | None = None,
                 regularize: bool | None = None) -> tuple[list[PatchFlow], int]:
    """Align every block to the reference (default: the centre block)."""
    ref_index = len(blocks) // 2 if ref_index is None else ref_index
    regularize = cfg.lambda_reg > 0 if regularize is None else regularize
    ref = blocks[ref_index]
    flows = []
    for b, blk in enumerate(blocks):
        if b == ref_index:
            flows.append(PatchFlow.zeros(ref.shape, cfg.patch_size_px, float(blk.center_frame or 0)))
            continue
        f = hierarchical_align(ref, blk, cfg)
        if regularize:
            f = regularize_flow(f, ref, blk, cfg)
        f.timestamp = float(blk.center_frame or 0)
        flows.append(f)
    return flows, ref_index
