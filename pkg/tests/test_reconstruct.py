import math

import numpy as np
import pytest

from quanta_burst.core_model import DomainError, FrameSequence, SensorSpec, SumImage, mle_flux
from quanta_burst.merge import MergedImage
from quanta_burst.reconstruct import (GaussianDenoiser, anscombe, correct_hot_pixels, finalize_image,
                                      inverse_anscombe, tv_denoise, tv_objective, tv_prox)
from quanta_burst.simulator import DcrMap

SPEC = SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=0.5)


def _hot(shape, *points):
    dcr = np.zeros(shape)
    for p in points:
        dcr[p] = 1e6
    return DcrMap.from_dcr(dcr, 1e4)


def test_hot_pixels_empty_mask_identity(rng):
    seq = FrameSequence(SPEC, (rng.random((10, 6, 6)) < 0.5).astype(np.uint8))
    assert correct_hot_pixels(seq, DcrMap.from_dcr(np.zeros((6, 6)), 1e4)) is seq


def test_hot_pixel_among_dark_neighbours_becomes_zero():
    frames = np.zeros((50, 5, 5), dtype=np.uint8)
    frames[:, 2, 2] = 1
    out = correct_hot_pixels(FrameSequence(SPEC, frames), _hot((5, 5), (2, 2)))
    assert not out.frames.any()


def test_hot_pixel_rate_and_untouched_pixels():
    rng = np.random.default_rng(3)
    frames = (rng.random((10_000, 5, 5)) < 0.1).astype(np.uint8)
    frames[:, 2, 2] = 1
    seq = FrameSequence(SPEC, frames)
    out = correct_hot_pixels(seq, _hot((5, 5), (2, 2)), seed=1)
    rate = out.frames[:, 2, 2].mean()
    assert abs(rate - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / 10_000)
    mask = np.ones((5, 5), bool)
    mask[2, 2] = False
    assert np.array_equal(out.frames[:, mask], frames[:, mask])


def test_isolated_hot_pixel_warns():
    frames = np.ones((4, 3, 3), dtype=np.uint8)
    dcr = np.full((3, 3), 1e6)
    with pytest.warns(RuntimeWarning):
        out = correct_hot_pixels(FrameSequence(SPEC, frames), DcrMap.from_dcr(dcr, 1e4))
    assert not out.frames.any()


def test_anscombe_values():
    assert anscombe(0.0) == pytest.approx(1.224744871, rel=1e-9)
    assert anscombe(10.0) == pytest.approx(6.442049363, rel=1e-9)
    x = np.linspace(0, 500, 101)
    assert np.allclose(inverse_anscombe(anscombe(x)), x)
    with pytest.raises(DomainError):
        anscombe(-1.0)


def test_anscombe_stabilizes_poisson_variance():
    rng = np.random.default_rng(0)
    for mean in (5.0, 50.0, 500.0):
        assert np.var(anscombe(rng.poisson(mean, 50_000))) == pytest.approx(1.0, abs=0.1)


def test_tv_prox_constant_input_unchanged():
    y = np.full((8, 8), 2.5)
    x, _ = tv_prox(y, 1.0, 50)
    assert np.allclose(x, y)


def test_tv_zero_lambda_is_mle(rng):
    s = SumImage(rng.binomial(200, 0.3, (12, 12)), 200)
    assert np.array_equal(tv_denoise(s, SPEC, 0.0), mle_flux(s, SPEC))


def test_tv_constant_input_gives_constant_mle():
    s = SumImage(np.full((10, 10), 37), 100)
    out = tv_denoise(s, SPEC, 5.0)
    assert np.ptp(out) == pytest.approx(0.0, abs=1e-6 * out.mean())
    assert out.mean() == pytest.approx(mle_flux(s, SPEC)[0, 0], rel=1e-6)


def test_tv_two_region_lowers_objective():
    rng = np.random.default_rng(5)
    p = np.where(np.arange(32)[None, :] < 16, 0.1, 0.4) * np.ones((32, 1))
    s = SumImage(rng.binomial(100, p), 100)
    lam_tv = 2e-4
    info = tv_denoise(s, SPEC, lam_tv, return_info=True)
    mle = mle_flux(s, SPEC)
    assert tv_objective(info.flux, s, SPEC, lam_tv) < tv_objective(mle, s, SPEC, lam_tv)
    assert np.all(np.diff(info.objective_history) <= 0)
    truth = -np.log1p(-p) / (1e-5 * 0.5)
    assert np.mean((info.flux - truth) ** 2) < np.mean((mle - truth) ** 2)


def test_finalize_black_and_percentile():
    blk = finalize_image(MergedImage(np.zeros((4, 4)), 100), SPEC)
    assert not blk.display.any() and blk.scale == 0
    counts = np.tile(np.arange(1, 11, dtype=float), (10, 1)) * 5
    img = finalize_image(MergedImage(counts, 100), SPEC, gamma=1.0, percentile=100)
    mle = mle_flux(SumImage(counts, 100), SPEC)
    assert np.allclose(img.linear, mle)
    assert np.allclose(img.display, mle / mle.max())
    assert img.display.max() == pytest.approx(1.0)


def test_finalize_with_denoiser_and_saturation():
    counts = np.full((16, 16), 40.0)
    counts[0, 0] = 100
    img = finalize_image(MergedImage(counts, 100), SPEC, denoiser=GaussianDenoiser(0.0))
    assert img.saturated[0, 0] and img.saturated.sum() == 1
    assert np.isfinite(img.linear).all()


def test_finalize_conventional_is_linear():
    spec = SensorSpec(kind="conventional", frame_exposure_s=1e-3, pde=0.5, bit_depth=12)
    img = finalize_image(MergedImage(np.full((3, 3), 200.0), 10), spec)
    assert np.allclose(img.linear, 200 / (10 * 1e-3 * 0.5))
