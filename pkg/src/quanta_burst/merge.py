"""Warping, robust frequency-domain merging and super-resolution.

Frames are scattered forward into the reference grid with bilinear weights,
which keeps photon counts exact.  Warped block sums are merged tile by tile
in the Fourier domain: a frequency component of an auxiliary block is
accepted when it agrees with the reference to within the shot-noise level
and replaced by the reference where it does not.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .align import AlignConfig, PatchFlow, align_blocks, block_sums, interpolate_flow
from .core_model import DomainError, FrameSequence, SensorSpec, SumImage


@dataclass
class MergeConfig:
    """Robust merge settings.

    ``noise_scale`` is the tuning factor ``c`` multiplying the noise
    variance in the shrinkage weight; ``math.inf`` disables robustness
    (every block is accepted as-is).  ``noise_sigma`` overrides the
    model-based per-block estimate when set.
    """

    merge_block_size: int = 100
    tile_size_px: int = 16
    tile_overlap: float = 0.5
    noise_scale: float = 8.0
    noise_sigma: float | None = None

    def __post_init__(self):
        if self.merge_block_size < 1:
            raise DomainError("merge_block_size must be >= 1")
        t = self.tile_size_px
        if t < 2 or t & (t - 1):
            raise DomainError("tile_size_px must be a power of two >= 2")
        if self.tile_overlap != 0.5:
            raise DomainError("only half-overlapping tiles are supported")
        if self.noise_scale < 0:
            raise DomainError("noise_scale must be nonnegative")


@dataclass
class SRConfig:
    upsample_factor: int = 2
    k_detail: float = 0.3
    k_denoise: float = 1.0
    d_th: float = 0.005
    d_tr: float = 0.5
    k_stretch: float = 1.0
    k_shrink: float = 1.0
    tile_size_px: int = 16
    anisotropy_cap: float = 5.0
    radius_px: int = 2

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise DomainError("upsample_factor must be >= 1")


@dataclass
class MergedImage:
    counts: np.ndarray
    effective_frames: float
    resolution_scale: int = 1
    block_flows: list[PatchFlow] = field(default_factory=list, repr=False)
    fallback_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.effective_frames > 0:
            raise DomainError("effective_frames must be positive")


# ---------------------------------------------------------------------------
# Warping

def scatter_bilinear(values: np.ndarray, ys: np.ndarray, xs: np.ndarray, shape) -> np.ndarray:
    """Splat ``values`` at real-valued positions onto a grid; out-of-grid mass is lost."""
    h, w = shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(h * w)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            wgt = values * wy * wx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wgt != 0)
            out += np.bincount(yy[ok] * w + xx[ok], weights=wgt[ok], minlength=h * w)
    return out.reshape(h, w)


def warp_frame(frame: np.ndarray, flow: PatchFlow) -> np.ndarray:
    """Move a frame onto the reference grid.

    A pixel at ``x`` in the frame, whose patch flow is ``(u, v)``, lands at
    ``x - (u, v)`` in the reference.
    """
    frame = np.asarray(frame)
    ys, xs = np.nonzero(frame)
    if ys.size == 0:
        return np.zeros(frame.shape)
    M = flow.patch_size
    gi = np.minimum(ys // M, flow.flow.shape[0] - 1)
    gj = np.minimum(xs // M, flow.flow.shape[1] - 1)
    f = flow.flow[gi, gj]
    return scatter_bilinear(frame[ys, xs].astype(np.float64), ys - f[:, 1], xs - f[:, 0], frame.shape)


def warp_and_sum_block(frames: np.ndarray, frame_flows: Sequence[PatchFlow]) -> SumImage:
    """Warp each frame by its own flow and add them into one block sum."""
    frames = np.asarray(frames)
    if len(frame_flows) != frames.shape[0]:
        raise DomainError("need exactly one flow per frame")
    acc = np.zeros(frames.shape[1:])
    for frame, flow in zip(frames, frame_flows):
        if not np.any(flow.flow):
            acc += frame
        else:
            acc += warp_frame(frame, flow)
    return SumImage(acc, frames.shape[0])


# ---------------------------------------------------------------------------
# Tiled Fourier merging

def raised_cosine(n: int) -> np.ndarray:
    """1D window whose half-overlapped copies sum to exactly one."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(n) + 0.5) / n)


class _Tiling:
    """Half-overlapping windowed tiles covering an image (with zero padding)."""

    def __init__(self, shape, tile: int):
        self.shape = shape
        self.tile = tile
        half = tile // 2
        h, w = shape
        self.pad_y = (half, half + (-h) % half)
        self.pad_x = (half, half + (-w) % half)
        H = h + sum(self.pad_y)
        W = w + sum(self.pad_x)
        self.padded = (H, W)
        self.ny = (H - tile) // half + 1
        self.nx = (W - tile) // half + 1
        win = raised_cosine(tile)
        self.window = win[:, None] * win[None, :]

    def tiles(self, img: np.ndarray) -> np.ndarray:
        """Windowed tiles, shape ``(ny, nx, T, T)``."""
        p = np.pad(np.asarray(img, dtype=np.float64), (self.pad_y, self.pad_x))
        half = self.tile // 2
        view = np.lib.stride_tricks.sliding_window_view(p, (self.tile, self.tile))[::half, ::half]
        return view[: self.ny, : self.nx] * self.window

    def assemble(self, tiles: np.ndarray) -> np.ndarray:
        half = self.tile // 2
        out = np.zeros(self.padded)
        T = self.tile
        for iy in range(self.ny):
            for ix in range(self.nx):
                out[iy * half: iy * half + T, ix * half: ix * half + T] += tiles[iy, ix]
        h, w = self.shape
        return out[self.pad_y[0]: self.pad_y[0] + h, self.pad_x[0]: self.pad_x[0] + w]


def robust_weight(diff_power, noise_power) -> np.ndarray:
    """Shrinkage weight ``|D|^2 / (|D|^2 + c sigma^2)``, bounded in ``[0, 1]``.

    ``0`` keeps the auxiliary component, ``1`` replaces it with the
    reference.  ``0/0`` (identical components, no noise) maps to ``0``.
    """
    diff_power = np.asarray(diff_power, dtype=np.float64)
    if math.isinf(noise_power):
        return np.zeros_like(diff_power)
    denom = diff_power + noise_power
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(denom > 0, diff_power / denom, 0.0)
    return a


def estimate_block_noise_sigma(ref_block: SumImage, spec: SensorSpec | None = None,
                               tile_size: int | None = None) -> float:
    """Shot-noise level of a block sum from the binomial model.

    The per-pixel variance is ``n p (1 - p)`` with ``p = counts / n``,
    averaged over the image.  With ``tile_size`` the variance is scaled by
    the tile pixel count, the size of a noise component's power in an
    unnormalized tile FFT.
    """
    n = ref_block.n_frames
    c = np.asarray(ref_block.counts, dtype=np.float64)
    if spec is not None and spec.kind == "jot" and spec.bit_depth > 1:
        # multi-bit jots: counts are normalized intensities, use a Poisson proxy
        var = float(np.mean(c))
    else:
        p = np.clip(c / n, 0.0, 1.0)
        var = float(np.mean(n * p * (1 - p)))
    if tile_size is not None:
        var *= tile_size * tile_size
    return math.sqrt(var)


def _wiener_tiles(ref_f: np.ndarray, aux_f: np.ndarray, noise_power: float) -> np.ndarray:
    """Per-tile robust replacement of an auxiliary spectrum."""
    diff = ref_f - aux_f
    a = robust_weight(np.abs(diff) ** 2, noise_power)
    return aux_f + a * diff


def wiener_merge(ref_block: SumImage, aux_blocks: Sequence[SumImage], cfg: MergeConfig,
                 spec: SensorSpec | None = None) -> MergedImage:
    """Robustly merge aligned block sums with the reference.

    For every half-overlapping windowed tile, each auxiliary spectrum is
    pulled towards the reference by ``A = |D|^2 / (|D|^2 + c sigma^2)``
    (``D`` the spectral difference), so components that disagree beyond
    the noise level are replaced by the reference.  The merged sum is the
    reference plus all filtered auxiliaries.
    """
    ref = np.asarray(ref_block.counts, dtype=np.float64)
    for blk in aux_blocks:
        if blk.shape != ref.shape:
            raise DomainError("all blocks must have the same dimensions")
    n_total = ref_block.n_frames + sum(b.n_frames for b in aux_blocks)
    if not aux_blocks:
        return MergedImage(ref.copy(), n_total)
    tiling = _Tiling(ref.shape, cfg.tile_size_px)
    ref_f = np.fft.fft2(tiling.tiles(ref))
    acc = ref_f.copy()
    if cfg.noise_scale == math.inf:
        noise_power = math.inf
    else:
        sigma = cfg.noise_sigma
        if sigma is None:
            sigma = estimate_block_noise_sigma(ref_block, spec, cfg.tile_size_px)
        noise_power = cfg.noise_scale * sigma * sigma
    for blk in aux_blocks:
        aux_f = np.fft.fft2(tiling.tiles(blk.counts))
        acc += _wiener_tiles(ref_f, aux_f, noise_power)
    merged = tiling.assemble(np.fft.ifft2(acc).real)
    return MergedImage(np.maximum(merged, 0.0), n_total)


# ---------------------------------------------------------------------------
# Super-resolution

def structure_tensor(img: np.ndarray, sigma: float = 1.0):
    """Smoothed gradient outer products ``(Jxx, Jxy, Jyy)``."""
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    jxx = ndimage.gaussian_filter(gx * gx, sigma)
    jxy = ndimage.gaussian_filter(gx * gy, sigma)
    jyy = ndimage.gaussian_filter(gy * gy, sigma)
    return jxx, jxy, jyy


def anisotropy(lam1, lam2, cap: float = 5.0):
    """``1 + min(sqrt(lam1 / lam2), cap)`` with ``lam1 >= lam2``."""
    lam1 = np.asarray(lam1, dtype=np.float64)
    lam2 = np.asarray(lam2, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lam2 > 0, np.sqrt(lam1 / np.where(lam2 > 0, lam2, 1.0)), np.inf)
    ratio = np.where((lam1 <= 0) & (lam2 <= 0), 1.0, ratio)
    return 1.0 + np.minimum(ratio, cap)


def kernel_covariance(guide: np.ndarray, cfg: SRConfig):
    """Per-pixel inverse kernel covariance from the guide's structure tensor.

    Returns ``(ixx, ixy, iyy)`` of ``Omega^-1`` in input-pixel units.  Flat
    regions get a wide isotropic kernel, edges a kernel stretched along the
    edge and shrunk across it.
    """
    jxx, jxy, jyy = structure_tensor(guide)
    tr = jxx + jyy
    det_term = np.sqrt(np.maximum((jxx - jyy) ** 2 / 4 + jxy**2, 0.0))
    lam1 = tr / 2 + det_term
    lam2 = np.maximum(tr / 2 - det_term, 0.0)
    A = anisotropy(lam1, lam2, cfg.anisotropy_cap)
    D = np.clip(1 - np.sqrt(lam1) / cfg.d_tr + cfg.d_th, 0.0, 1.0)
    base = cfg.k_detail * cfg.k_denoise
    # e1: dominant gradient direction (across the edge); e2 along it
    theta = 0.5 * np.arctan2(2 * jxy, jxx - jyy)
    e1 = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    e2 = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    s_across = (1 - D) * cfg.k_detail / (cfg.k_shrink * A) + D * base
    s_along = (1 - D) * cfg.k_detail * cfg.k_stretch * A + D * base
    # flat-area floor so the kernel always spans a few samples
    s_across = np.maximum(s_across, 0.5 * cfg.k_detail)
    k1 = s_across**2
    k2 = s_along**2
    inv = (e1[..., :, None] * e1[..., None, :]) / k1[..., None, None] + \
        (e2[..., :, None] * e2[..., None, :]) / k2[..., None, None]
    return inv[..., 0, 0], inv[..., 0, 1], inv[..., 1, 1]


def _shift_spectrum(spec_tiles: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Fourier-shift every tile by its own sub-pixel offset."""
    T = spec_tiles.shape[-1]
    k = np.fft.fftfreq(T)
    ramp = np.exp(-2j * np.pi * (dy[..., None, None] * k[:, None] + dx[..., None, None] * k[None, :]))
    return spec_tiles * ramp


def _tile_residuals(flow: PatchFlow, tiling: _Tiling, shape) -> tuple[np.ndarray, np.ndarray]:
    """Flow sampled at each tile centre, in pixels."""
    half = tiling.tile // 2
    h, w = shape
    cy = np.clip(np.arange(tiling.ny) * half + half - tiling.pad_y[0], 0, h - 1)
    cx = np.clip(np.arange(tiling.nx) * half + half - tiling.pad_x[0], 0, w - 1)
    pf = flow.pixel_flow(shape)
    f = pf[cy[:, None], cx[None, :]]
    return f[..., 1], f[..., 0]


def super_resolve(ref_block: SumImage, aux_blocks: Sequence[SumImage], subpixel_flows: Sequence[PatchFlow],
                  guide: np.ndarray | None, cfg: SRConfig, mcfg: MergeConfig,
                  spec: SensorSpec | None = None, guide_frames: float | None = None) -> MergedImage:
    """Kernel-regression merge onto an upsampled grid.

    ``aux_blocks`` are block sums in their own (unwarped) coordinates and
    ``subpixel_flows`` give, per block, where the reference content sits in
    that block.  Each block is first robustly filtered against the guide
    (Fourier-shifted to the block's position), then every pixel becomes a
    sample at ``x - flow`` in reference coordinates.  An output pixel is the
    anisotropic-Gaussian weighted mean of nearby samples, scaled back to a
    per-block sum times the number of blocks.
    """
    ref = np.asarray(ref_block.counts, dtype=np.float64)
    if len(subpixel_flows) != len(aux_blocks):
        raise DomainError("need one flow per auxiliary block")
    shape = ref.shape
    h, w = shape
    n_blocks = 1 + len(aux_blocks)
    if guide is None:
        guide = ref
        guide_frames = ref_block.n_frames
    guide = np.asarray(guide, dtype=np.float64)
    gscale = ref_block.n_frames / (guide_frames or ref_block.n_frames)
    guide_blk = guide * gscale

    tiling = _Tiling(shape, cfg.tile_size_px)
    guide_f = np.fft.fft2(tiling.tiles(guide_blk))
    if mcfg.noise_scale == math.inf:
        noise_power = math.inf
    else:
        sigma = mcfg.noise_sigma
        if sigma is None:
            sigma = estimate_block_noise_sigma(ref_block, spec, cfg.tile_size_px)
        noise_power = mcfg.noise_scale * sigma * sigma

    blocks = [(ref, PatchFlow.zeros(shape, subpixel_flows[0].patch_size if subpixel_flows else 16))]
    blocks += [(np.asarray(b.counts, dtype=np.float64), f) for b, f in zip(aux_blocks, subpixel_flows)]

    f_up = cfg.upsample_factor
    H, W = h * f_up, w * f_up
    ixx, ixy, iyy = kernel_covariance(guide / (guide_frames or ref_block.n_frames), cfg)
    num = np.zeros(H * W)
    den = np.zeros(H * W)
    yy, xx = np.mgrid[0:h, 0:w]
    R = cfg.radius_px
    for counts, flow in blocks:
        dy_t, dx_t = _tile_residuals(flow, tiling, shape)
        g_shift = _shift_spectrum(guide_f, dy_t, dx_t)
        filt = tiling.assemble(np.fft.ifft2(_wiener_tiles(g_shift, np.fft.fft2(tiling.tiles(counts)),
                                                           noise_power)).real)
        pf = flow.pixel_flow(shape)
        sy = yy - pf[..., 1]
        sx = xx - pf[..., 0]
        # sample position on the output grid (pixel centres at (k + 0.5) / f - 0.5)
        oy = (sy + 0.5) * f_up - 0.5
        ox = (sx + 0.5) * f_up - 0.5
        cy = np.rint(oy).astype(np.int64)
        cx = np.rint(ox).astype(np.int64)
        # kernel shape taken at the nearest input pixel of the sample
        ky = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
        kx = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
        a, b, c = ixx[ky, kx], ixy[ky, kx], iyy[ky, kx]
        for dy in range(-R, R + 1):
            for dx in range(-R, R + 1):
                ty, tx = cy + dy, cx + dx
                ok = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
                ddx = (tx - ox) / f_up
                ddy = (ty - oy) / f_up
                wgt = np.exp(-0.5 * (a * ddx * ddx + 2 * b * ddx * ddy + c * ddy * ddy))
                idx = (ty * W + tx)[ok]
                num += np.bincount(idx, weights=(wgt * filt)[ok], minlength=H * W)
                den += np.bincount(idx, weights=wgt[ok], minlength=H * W)
    num = num.reshape(H, W)
    den = den.reshape(H, W)
    empty = den < 1e-8
    out = np.zeros((H, W))
    out[~empty] = num[~empty] / den[~empty]
    if empty.any():
        # nearest-sample fallback from the reference block
        ry = np.clip(((np.arange(H) + 0.5) / f_up).astype(np.int64), 0, h - 1)
        rx = np.clip(((np.arange(W) + 0.5) / f_up).astype(np.int64), 0, w - 1)
        out[empty] = ref[ry[:, None], rx[None, :]][empty]
    total_frames = ref_block.n_frames + sum(b.n_frames for b in aux_blocks)
    merged = MergedImage(np.maximum(out, 0.0) * n_blocks, total_frames, f_up)
    merged.fallback_mask = empty
    return merged


# ---------------------------------------------------------------------------
# Full pipeline

def _map(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _merge_groups(n_frames: int, merge_block: int) -> list[range]:
    n = n_frames // merge_block
    if n == 0:
        raise DomainError("sequence is shorter than one merge block")
    return [range(b * merge_block, (b + 1) * merge_block) for b in range(n)]


def merge_pipeline(seq: FrameSequence, align_cfg: AlignConfig, merge_cfg: MergeConfig,
                   sr_cfg: SRConfig | None = None, spec: SensorSpec | None = None,
                   naive: bool = False, frame_level: bool = True, workers: int = 1) -> MergedImage:
    """Align and merge a frame sequence into one robust sum image.

    Steps: block sums, alignment of every block to the centre block,
    temporal interpolation to per-frame flows, warping into merge blocks,
    then robust merging (or super-resolution when ``sr_cfg`` is given).
    ``naive`` skips alignment; ``frame_level=False`` warps each frame with
    its block's flow instead of the interpolated one.  ``workers`` threads
    warp the merge blocks; results are combined in block order, so the
    output does not depend on the thread count.
    """
    spec = spec or seq.spec
    frames = seq.frames
    blocks = block_sums(seq, align_cfg.block_size_frames)
    n_used_align = len(blocks) * align_cfg.block_size_frames
    if naive:
        block_flows = [PatchFlow.zeros(seq.shape, align_cfg.patch_size_px) for _ in blocks]
        ref_index = len(blocks) // 2
    else:
        block_flows, ref_index = align_blocks(blocks, align_cfg)
    B = align_cfg.block_size_frames
    ref_frame = blocks[ref_index].center_frame
    if frame_level:
        frame_flows = interpolate_flow(block_flows, B, n_used_align, ref_frame_index=ref_frame)
    else:
        frame_flows = [block_flows[k // B] for k in range(n_used_align)]

    groups = _merge_groups(n_used_align, merge_cfg.merge_block_size)
    ref_group = len(groups) // 2

    if sr_cfg is not None:
        # warp each merge block by integer flow only and keep the sub-pixel residual
        def warp_group(g):
            centre = g.start + len(g) // 2
            base = frame_flows[centre].flow
            integer = np.rint(base)
            rel = [PatchFlow(frame_flows[k].flow - base + integer, align_cfg.patch_size_px) for k in g]
            return warp_and_sum_block(frames[g.start:g.stop], rel), PatchFlow(base - integer, align_cfg.patch_size_px)

        pairs = _map(warp_group, groups, workers)
        sums = [s for s, _ in pairs]
        residual_flows = [r for _, r in pairs]
        ref_blk = sums[ref_group]
        aux = [s for i, s in enumerate(sums) if i != ref_group]
        aux_flows = [PatchFlow(residual_flows[i].flow - residual_flows[ref_group].flow, align_cfg.patch_size_px)
                     for i in range(len(sums)) if i != ref_group]
        guide_merge = wiener_merge(ref_blk, aux, merge_cfg, spec)
        out = super_resolve(ref_blk, aux, aux_flows, guide_merge.counts, sr_cfg, merge_cfg, spec,
                            guide_frames=guide_merge.effective_frames)
    else:
        sums = _map(lambda g: warp_and_sum_block(frames[g.start:g.stop], frame_flows[g.start:g.stop]),
                    groups, workers)
        ref_blk = sums[ref_group]
        aux = [s for i, s in enumerate(sums) if i != ref_group]
        out = wiener_merge(ref_blk, aux, merge_cfg, spec)
    out.block_flows = block_flows
    return out
