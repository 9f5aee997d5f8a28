"""Where does a photon-counting burst beat a conventional one?

Both bursts get the same auto-exposure. The exposure is limited by a
photon budget and by the total motion, and the two cameras are compared
through the closed-form RMSE of their estimators.

Run: python3 demos/03_snr_and_dynamic_range.py
"""
import numpy as np

from quanta_burst import preset
from quanta_burst.analysis import DrSpec, SnrGridSpec, dr_curves, max_advantage, snr_surface

spad, conv = preset("spad-swiss2"), preset("conv-machinevision")

# %% SNR difference over flux and speed
flux = SnrGridSpec.log_grid(1, 1e7, 8)
speed = [0.0, 10.0, 100.0, 1e3, 1e4]
rows = snr_surface(SnrGridSpec(flux, speed, spad, conv))
table = np.array([r.diff_db for r in rows]).reshape(len(flux), len(speed))
print("SNR_quanta - SNR_conv (dB); rows: flux, columns: speed (px/s)")
print("          " + "".join(f"{v:>8g}" for v in speed))
for phi, row in zip(flux, table):
    print(f"{phi:9.3g} " + "".join(f"{d:8.1f}" for d in row))
best = max_advantage(snr_surface(SnrGridSpec(SnrGridSpec.log_grid(1, 1e7, 29),
                                             [0.0] + list(SnrGridSpec.log_grid(1, 1e4, 17)), spad, conv)))
print(f"largest advantage {best.diff_db:.1f} dB at flux {best.phi:g}, speed {best.v:g}")

# %% Dynamic range against total exposure
curves = dr_curves(spad, conv, DrSpec(np.logspace(-3, 0, 7), quanta_rates=(1e5,), conv_rates=(1e3,)))
for T in np.logspace(-3, 0, 7):
    q = next(r.dr_db for r in curves.rows if r.kind == "quanta" and r.exposure_s == T)
    c = next(r.dr_db for r in curves.rows if r.kind == "conventional" and r.exposure_s == T)
    print(f"T = {T:7.4f} s   quanta {q:6.1f} dB   conventional {c:6.1f} dB")
print(f"quanta DR overtakes conventional after {curves.crossovers[(1e5, 1e3)]:.3f} s")
