# %% [markdown]
# Fourier-motion illusions on a bare Stage-I bank.  A leftward missing-
# fundamental grating should read as rightward; reverse phi flips the
# direction of a contrast-alternating texture.  Tests that need Stage II
# are reported as skipped unless a parameter file is given.
#
#     python demos/psychophysics_battery.py [stage2.npz]

# %%
import json
import sys

from v1mt import battery
from v1mt.stage1 import EnergyBank
from v1mt.stage2 import Stage2

bank = EnergyBank.default(0)
model = Stage2.load(sys.argv[1]) if len(sys.argv) > 1 else None

# %%
for v in battery.run_battery(bank, model):
    print(f"{v.test:20s} {v.verdict}")

# %% energy behind the missing-fundamental verdict, per bank seed
for seed in range(3):
    v = battery.missing_fundamental_test(EnergyBank.default(seed))
    d = v.details
    print(f"seed {seed}: rightward {d['rightward_energy']:.3f} vs leftward {d['leftward_energy']:.3f}; "
          f"with fundamental restored -> {d['control_with_fundamental']['verdict']}")

# %%
print(json.dumps(battery.barber_pole_test(bank).details["perceived_direction_deg"], indent=2))
