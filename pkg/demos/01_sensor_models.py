"""Soft versus hard saturation, and how well the SPAD flux MLE does.

Run: python3 demos/01_sensor_models.py
"""
import numpy as np

from quanta_burst import SumImage, mle_flux, preset, sample_spad_sequence
from quanta_burst.core_model import expected_sum, fisher_rmse_quanta, response_curve_samples, rmse_conventional

spad = preset("spad-swiss2")
conv = preset("conv-machinevision")

# %% Response curves
# A SPAD frame is one bit per pixel, so 1000 frames can count at most 1000.
# The expected count approaches that asymptotically. A conventional pixel
# instead clips hard at its full well.
fluxes = np.logspace(2, 8, 13)
print("flux (photons/s)   SPAD E[S] (1000 frames)   conventional (1 ms frame, e-)")
for (phi, s), (_, e) in zip(response_curve_samples(spad, 1000, fluxes), response_curve_samples(conv, 1, fluxes)):
    print(f"{phi:14.3g}   {s:22.3f}   {e:28.1f}")

# %% The MLE inverts the soft saturation
# Invert the expected count back to flux. A count just below n still gives a
# finite flux, which is where the extra dynamic range comes from.
n = 1000
for s in (10, 500, 990, 999):
    phi = mle_flux(SumImage(np.array([s]), n), spad)[0]
    print(f"S = {s:4d} / {n}: flux {phi:12.4g}  (round trip E[S] = {expected_sum(phi, spad, n):.3f})")

# %% Monte-Carlo check against the Fisher bound
# Each pixel of a flat image is one independent 1000-frame sequence.
flat = np.full((100, 100), 0.69 / (spad.frame_exposure_s * spad.eta))
seq = sample_spad_sequence(flat, spad, n_frames=n, seed=1)
est = mle_flux(SumImage(seq.frames.sum(axis=0), n), spad, saturated="clip")
print(f"\nempirical RMSE {est.std():.1f}, Fisher bound {fisher_rmse_quanta(flat[0, 0], spad, n):.1f}")

# %% Conventional RMSE grows with the number of reads
for n_c in (1, 10, 100):
    print(f"conventional, 10 ms total in {n_c:3d} frames: RMSE {rmse_conventional(1e4, conv, n_c, 0.01):.1f}")
