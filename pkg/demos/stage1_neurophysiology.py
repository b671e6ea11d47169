# %% [markdown]
# In-silico recordings from an untrained Stage-I bank: direction tuning to
# gratings and plaids, component/pattern classification and one spectral
# receptive field with its oriented-Gaussian fit.
#
#     python demos/stage1_neurophysiology.py [out_dir]

# %%
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from v1mt import neurophys
from v1mt.stage1 import EnergyBank

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
bank = EnergyBank.default(0)

# %% pick a unit whose Gabor spans enough carrier to act as a quadrature pair
unit = next(i for i, u in enumerate(bank.units())
            if 2 * math.pi * u.f_s * u.sigma >= 1.5 and 2 * math.pi * u.f_t * u.tau >= 1.5)
probe = neurophys.Stage1Probe(bank, unit)
print(f"unit {unit}: theta {probe.direction:.1f} deg, sf {probe.spatial_frequency:.3f} c/px, "
      f"speed {probe.speed:.2f} px/frame")

# %% tuning and classification
grating = neurophys.direction_tuning(probe, "gabor", 24)
plaid = neurophys.direction_tuning(probe, "plaid", 24, half_angle=60)
comp, patt = neurophys.component_pattern_predictions(grating, 60)
cls = neurophys.classify_unit(plaid, comp, patt)
print(f"grating peak {grating.preferred:.0f} deg; Z_c {cls.Z_c:.2f}, Z_p {cls.Z_p:.2f} -> {cls.label}")

fig, axes = plt.subplots(1, 2, subplot_kw={"projection": "polar"}, figsize=(8, 4))
th = np.radians(np.append(grating.directions, 360))
close = lambda r: np.append(r, r[0])
axes[0].plot(th, close(grating.responses))
axes[0].set_title("grating")
axes[1].plot(th, close(plaid.responses), label="plaid")
axes[1].plot(th, close(comp.responses), "--", label="component prediction")
axes[1].set_title(cls.label)
axes[1].legend(loc="lower left", fontsize=7)
fig.savefig(out / "tuning.png", dpi=120)

# %% spectral receptive field around the unit's own tuning
u = bank.unit(unit)
sf = probe.spatial_frequency * 2.0 ** np.linspace(-1.5, 1, 7)
tf = u.f_t * 2.0 ** np.linspace(-1.5, 1, 7)
rf = neurophys.spectral_rf(probe, sf, tf)
fit = neurophys.fit_oriented_gaussian(rf)
rho_speed, rho_indep = neurophys.speed_tuning_partial_corr(rf)
print(f"RF peak (sf, tf) = ({rf.peak[0]:.3f}, {rf.peak[1]:.3f}); fit centre ({fit.center_sf:.3f}, "
      f"{fit.center_tf:.3f}), tilt {fit.tilt:.0f} deg; rho speed {rho_speed:.2f}, independent {rho_indep:.2f}")

fig, ax = plt.subplots(figsize=(4, 4))
ax.imshow(rf.responses.T, origin="lower", extent=[np.log2(sf[0]), np.log2(sf[-1]), np.log2(tf[0]), np.log2(tf[-1])])
ax.set_xlabel("log2 spatial frequency")
ax.set_ylabel("log2 temporal frequency")
fig.savefig(out / "spectral_rf.png", dpi=120)
print(f"figures written to {out}/")
