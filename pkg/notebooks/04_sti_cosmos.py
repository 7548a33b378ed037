# %% [markdown]
# # Multi-orientation fits: susceptibility tensor and COSMOS
#
# Rotating the head changes the field direction in the subject frame to
# H_sub = R z. With six or more orientations the six tensor channels are
# solvable at (almost) every k; with three, a scalar map is.

# %%
import numpy as np
from scipy.spatial.transform import Rotation

from qsmtk import (
    Grid3,
    OrientationSample,
    RandomTensorSpec,
    cosmos_fit,
    nrmse,
    orientation_set,
    random_tensor,
    simulate_field,
    simulate_field_sti,
    sti_fit,
)
from qsmtk.sti import cosmos_denominator, extract_labels

grid = Grid3((32, 32, 32))
chi = random_tensor(grid, RandomTensorSpec(seed=3, anisotropy=0.5))
rotations = orientation_set(12, max_tilt_deg=45.0, seed=3)
tilts = [round(float(np.degrees(np.arccos(R[2, 2]))), 1) for R in rotations]
print("tilts (deg):", tilts)

# %%
samples = [OrientationSample.from_rotation(simulate_field_sti(chi, R[:, 2]), R) for R in rotations]
est, info = sti_fit(samples, return_info=True)
print(info)
for c, name in enumerate(["chi11", "chi12", "chi13", "chi22", "chi23", "chi33"]):
    print(f"{name}: NRMSE {nrmse(est[c], chi[c]):.1e}%")

# %% [markdown]
# The fitted tensor yields the training targets for the single-orientation
# network: chi33 and the off-diagonal field dB'.

# %%
labels = extract_labels(est)
print("label shapes:", labels.chi33.shape, labels.dbp.shape)

# %% [markdown]
# Fewer than six orientations is refused.

# %%
try:
    sti_fit(samples[:5])
except ValueError as exc:
    print("refused:", exc)

# %% [markdown]
# COSMOS with three tilts about x on an isotropic map.

# %%
iso = random_tensor(grid, RandomTensorSpec(seed=4, anisotropy=0.0))[5]
rots = [Rotation.from_euler("x", a, degrees=True).as_matrix() for a in (0, 30, -30)]
csamples = [OrientationSample.from_rotation(simulate_field(iso, R[:, 2]), R) for R in rots]
den = cosmos_denominator(grid, [s.H_sub for s in csamples])
print("k-samples with sum D^2 < 1e-6:", int((den < 1e-6).sum()), "of", den.size)
print("COSMOS NRMSE:", nrmse(cosmos_fit(csamples), iso), "%")
