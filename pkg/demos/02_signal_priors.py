"""
Frequency and texture cues of a signal
======================================

Instantaneous frequency from the analytic signal, its three-scale version,
and Teager-Kaiser energy with the flux statistic.
"""
import numpy as np

from mixforge.signal_analysis import (decompose_multiscale, feature_flux, hilbert_analytic, if_features,
                                      instantaneous_frequency, instantaneous_phase, tkeo)

n = np.arange(2048)
x = np.cos(0.3 * n)

z = hilbert_analytic(x)
f = instantaneous_frequency(instantaneous_phase(z))
# interior samples sit on 0.3 rad/sample; the ends leak because the window is not periodic
print("IF interior mean", f[128:-128].mean(), "max dev", np.abs(f[128:-128] - 0.3).max())
print("IF edge sample", f[0])

# high / all / low components of a chirp
chirp = np.cos(0.002 * n ** 1.5)
ms = decompose_multiscale(chirp)
print("high-band rms", np.sqrt(np.mean(ms.x_high ** 2)), "low-band rms", np.sqrt(np.mean(ms.x_low ** 2)))
feats = if_features(chirp)
for name in ("f_high", "f_all", "f_low"):
    print(name, np.round(getattr(feats, name)[[100, 1000, 2000]], 3))

# TKEO of A cos(wn) is A^2 sin^2 w
psi = tkeo(2.0 * np.cos(0.5 * n[:64]))
print("TKEO", psi[1], "expected", 4 * np.sin(0.5) ** 2)

# flux: spread of frame-to-frame jumps, per channel
h = np.random.default_rng(0).normal(size=(200, 4))
h[:, 0] = 1.0
print("flux per channel", np.round(feature_flux(h), 3))
