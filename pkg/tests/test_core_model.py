import math

import numpy as np
import pytest

from quanta_burst.core_model import (PRESETS, DomainError, SaturationError, SensorSpec, SumImage,
                                     binomial_log_likelihood, conventional_estimate, detection_probability,
                                     expected_sum, fisher_rmse_quanta, mle_flux, preset,
                                     response_curve_samples, rmse_conventional)


def test_detection_probability_reference_values(spad, spad_ideal):
    assert detection_probability(0.0, spad_ideal) == 0.0
    # lambda = 1e4 * 1e-5 * 0.23 + 7.5e-5 = 0.023075
    assert detection_probability(1e4, spad) == pytest.approx(1 - math.exp(-0.023075), rel=1e-12)
    assert detection_probability(1e4, spad) == pytest.approx(0.0228108, abs=1e-7)
    phi_half = math.log(2) / (1e-5 * 0.23)
    assert detection_probability(phi_half, spad_ideal) == pytest.approx(0.5, rel=1e-12)


def test_detection_probability_rejects_negative_flux(spad):
    with pytest.raises(DomainError):
        detection_probability(-1.0, spad)


def test_expected_sum_soft_saturation(spad_ideal):
    phi_half = math.log(2) / 2.3e-6
    assert expected_sum(phi_half, spad_ideal, 100) == pytest.approx(50.0)
    assert expected_sum(0.0, spad_ideal, 37) == 0.0
    phi20 = 20 / 2.3e-6
    # 1000 * (1 - e^-20) = 999.99999793884...
    val = expected_sum(phi20, spad_ideal, 1000)
    assert val == pytest.approx(1000 * (1 - math.exp(-20)), rel=1e-14)
    assert val < 1000


def test_expected_sum_strictly_increasing(spad):
    # lambda up to ~23: beyond that 1 - e^-lambda rounds to 1 in double precision
    phi = np.logspace(0, 7, 200)
    s = expected_sum(phi, spad, 1000)
    assert np.all(np.diff(s) > 0)
    assert np.all(s < 1000)
    assert np.all(expected_sum(np.logspace(7, 10, 20), spad, 1000) <= 1000)


def test_mle_reference_values(spad, spad_ideal):
    s = SumImage(np.full((2, 2), 500), 1000)
    assert mle_flux(s, spad_ideal) == pytest.approx(np.full((2, 2), 301368.4), rel=1e-6)
    assert mle_flux(s, spad)[0, 0] == pytest.approx(math.log(2) / 2.3e-6 - 7.5 / 0.23, rel=1e-12)
    assert mle_flux(s, spad)[0, 0] == pytest.approx(301335.8, abs=0.1)
    assert np.all(mle_flux(SumImage(np.zeros((3, 3)), 10), spad_ideal) == 0)


def test_mle_clamps_negative_estimates(spad):
    # a single detection over many frames is below the dark-count level
    out = mle_flux(SumImage(np.array([[0, 1]]), 100000), spad)
    assert np.all(out >= 0)
    assert out[0, 0] == 0


def test_mle_saturation_handling(spad):
    counts = np.array([[10, 3], [10, 0]])
    with pytest.raises(SaturationError) as info:
        mle_flux(SumImage(counts, 10), spad)
    assert info.value.mask.tolist() == [[True, False], [True, False]]
    img = SumImage(counts, 10)
    clipped = mle_flux(img, spad, saturated="clip")
    assert np.isfinite(clipped).all()
    assert img.saturated.tolist() == [[True, False], [True, False]]
    assert clipped[0, 0] == pytest.approx(mle_flux(SumImage(np.array([[9]]), 10), spad)[0, 0])


def test_mle_inverts_expected_sum(spad_ideal):
    for s in (1, 17, 250, 999):
        phi = mle_flux(SumImage(np.array([[s]]), 1000), spad_ideal)[0, 0]
        assert expected_sum(phi, spad_ideal, 1000) == pytest.approx(s, rel=1e-9)


def test_log_likelihood_values(spad_ideal):
    assert binomial_log_likelihood(0, 10, 0.0, spad_ideal) == pytest.approx(0.0)
    phi = math.log(2) / 2.3e-6
    assert binomial_log_likelihood(1, 2, phi, spad_ideal) == pytest.approx(math.log(0.5), rel=1e-12)
    with pytest.raises(DomainError):
        binomial_log_likelihood(11, 10, 1.0, spad_ideal)


def test_log_likelihood_peaks_at_mle(spad):
    s, n = 500, 1000
    phi_hat = mle_flux(SumImage(np.array([[s]]), n), spad)[0, 0]
    grid = phi_hat * np.linspace(0.5, 1.5, 2001)
    ll = binomial_log_likelihood(s, n, grid, spad)
    k = int(np.argmax(ll))
    assert abs(grid[k] - phi_hat) <= (grid[1] - grid[0])
    # unimodal: increasing then decreasing
    d = np.diff(ll)
    assert np.all(d[:k] > 0) and np.all(d[k + 1:] < 0)


def test_fisher_rmse_closed_form(spad_ideal):
    phi = math.log(2) / 2.3e-6
    assert fisher_rmse_quanta(phi, spad_ideal, 10_000) == pytest.approx(1 / (100 * 2.3e-6), rel=1e-12)
    assert fisher_rmse_quanta(phi, spad_ideal, 40_000) == pytest.approx(
        fisher_rmse_quanta(phi, spad_ideal, 10_000) / 2)


def test_fisher_rmse_matches_monte_carlo(spad_ideal):
    n, lam = 1000, 0.1
    phi = lam / 2.3e-6
    rng = np.random.default_rng(7)
    s = rng.binomial(n, 1 - math.exp(-lam), size=100_000)
    est = mle_flux(SumImage(s, n), spad_ideal)
    assert np.std(est) == pytest.approx(fisher_rmse_quanta(phi, spad_ideal, n), rel=0.05)


def test_rmse_conventional_closed_form():
    spec = SensorSpec(kind="conventional", frame_exposure_s=1.0, pde=0.64, bit_depth=12)
    assert rmse_conventional(1000.0, spec, 1, 1.0) == pytest.approx(math.sqrt(1000 / 0.64), rel=1e-12)
    assert rmse_conventional(1000.0, spec, 1, 1.0) == pytest.approx(39.528, abs=1e-3)


def test_rmse_conventional_read_noise_term_grows_with_frames(conv):
    assert rmse_conventional(100.0, conv, 20, 0.1) > rmse_conventional(100.0, conv, 10, 0.1)


def test_conventional_estimate_unbiased(conv, rng):
    phi, tau, n = 2e4, 1e-2, 400
    e = rng.poisson(phi * tau * 0.64 + tau * 1.0, size=(n, 50)) + rng.normal(0, 2.4, size=(n, 50))
    est = conventional_estimate(e, conv, tau)
    se = rmse_conventional(phi, conv, n, n * tau) / math.sqrt(est.size)
    assert abs(est.mean() - phi) < 3 * se


def test_response_curves(spad, conv):
    assert response_curve_samples(spad, 100, [0.0])[0][1] == pytest.approx(100 * (1 - math.exp(-7.5e-5)))
    assert response_curve_samples(conv.replace(dark_current_eps=0.0), 100, [0.0])[0][1] == 0.0
    phi_full = 10_000 / (1e-3 * 0.64)
    pts = response_curve_samples(conv, 1, [phi_full, 2 * phi_full, 100 * phi_full])
    assert [v for _, v in pts] == [9999.0, 9999.0, 9999.0]
    spad_pts = response_curve_samples(spad, 1000, np.logspace(3, 7, 30))
    assert all(v < 1000 for _, v in spad_pts)
    vals = [v for _, v in spad_pts]
    assert vals == sorted(vals)


def test_sensor_spec_validation():
    with pytest.raises(DomainError):
        SensorSpec(kind="spad", frame_exposure_s=0.0)
    with pytest.raises(DomainError):
        SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=1.5)
    with pytest.raises(DomainError):
        SensorSpec(kind="spad", frame_exposure_s=1e-5, read_noise_e=0.1)
    with pytest.raises(DomainError):
        SensorSpec(kind="spad", frame_exposure_s=1e-5, bit_depth=2)
    with pytest.raises(DomainError):
        SensorSpec(kind="ccd", frame_exposure_s=1e-5)


def test_presets_and_round_trip():
    assert set(PRESETS) == {"spad-swiss2", "conv-machinevision", "conv-iphone7", "jot"}
    assert preset("conv-iphone7").read_noise_e == 0.68
    assert preset("spad-swiss2").frame_exposure_s == pytest.approx(1 / 97_700)
    for spec in PRESETS.values():
        assert SensorSpec.from_items(dict(spec.to_items())) == spec
    rgb = SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=(0.17, 0.23, 0.21))
    assert SensorSpec.from_items(dict(rgb.to_items())) == rgb
    with pytest.raises(KeyError):
        preset("nope")


def test_per_channel_pde():
    spec = SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=(0.17, 0.23, 0.21))
    p = detection_probability(np.full((2, 2, 3), 1e4), spec)
    assert p.shape == (2, 2, 3)
    assert p[0, 0, 1] > p[0, 0, 2] > p[0, 0, 0]
