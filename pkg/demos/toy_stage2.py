# %% [markdown]
# Toy Stage-II training on the untrained default bank, then per-iteration
# plaid and Gabor-array direction errors.  The run is seeded and takes
# several minutes on one core; the plaid error should fall across
# iterations as the recurrence integrates component motion.
#
#     python demos/toy_stage2.py [out_dir]

# %%
import sys
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from v1mt import battery, train
from v1mt.stage1 import EnergyBank

out = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_stage2_out")
out.mkdir(parents=True, exist_ok=True)
bank = EnergyBank.default(0)
model, cfg = train.toy_stage2_recipe(seed=0)

# %%
t0 = time.perf_counter()
fit = train.fit_stage2(model, bank, cfg)
print(f"trained {cfg.steps} steps in {time.perf_counter() - t0:.0f}s; "
      f"loss {np.mean(fit.losses[:10]):.3f} -> {np.mean(fit.losses[-10:]):.3f}")
train.save_checkpoint(out / "checkpoint", bank, fit.params, cfg)
train.write_log(out / "stage2_log.csv", fit.losses, fit.phases)

# %%
plaid = battery.plaid_direction_errors(bank, fit.params)
gabor = battery.gabor_array_errors(bank, fit.params)
for k, (p, g) in enumerate(zip(plaid, gabor), start=1):
    print(f"iteration {k}: plaid {p:5.1f} deg   gabor array {g:5.1f} deg")

# %%
fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
its = np.arange(1, len(plaid) + 1)
ax[0].plot(its, plaid, "o-", label="plaid (IOC)")
ax[0].plot(its, gabor, "s-", label="Gabor array")
ax[0].set_xlabel("iteration")
ax[0].set_ylabel("direction error (deg)")
ax[0].legend()
ax[1].plot(fit.losses, lw=0.6)
ax[1].set_xlabel("step")
ax[1].set_ylabel("sequence loss")
fig.tight_layout()
fig.savefig(out / "toy_stage2.png", dpi=120)
