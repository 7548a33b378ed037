# %% [markdown]
# # Metrics, volume files, slices and patches
#
# NRMSE, SSIM and HFEN, the QVOL file pair, PGM slice export, and the
# patch-then-stitch path used when a full volume does not fit in memory.

# %%
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from qsmtk import Grid3, Volume, evaluate, plan_patches, patch_split, patch_stitch, read_qvol, write_qvol
from qsmtk.metrics import hfen, ssim3
from qsmtk.qvol import export_slice, read_pgm

rng = np.random.default_rng(5)
ref = rng.standard_normal((24, 24, 24))
noisy = ref + 0.3 * rng.standard_normal(ref.shape)
print(evaluate(noisy, ref).to_json())

# %% [markdown]
# Identical inputs: SSIM 1 and HFEN 0.

# %%
print(ssim3(ref, ref), hfen(ref, ref))

# %% [markdown]
# QVOL: a JSON header next to a raw little-endian float32 file, x fastest.

# %%
out = Path(tempfile.mkdtemp())
write_qvol(Volume(ref, Grid3(ref.shape, (1.0, 1.0, 2.0))), out / "ref.qvol")
print((out / "ref.qvol").read_text())
back = read_qvol(out / "ref.qvol")
print("round trip max error:", np.abs(back.data - ref).max(), "(float32)")

# %%
pixels = export_slice(ref, axis=2, index=12, window=(-2.0, 2.0), path=out / "axial.pgm")
print("PGM", pixels.shape, "matches file:", np.array_equal(read_pgm(out / "axial.pgm"), pixels))

# %% [markdown]
# Patches of 48 voxels with one-third overlap advance by 32 voxels.

# %%
vol = rng.standard_normal((100, 90, 60))
layout = plan_patches(vol.shape, 48, Fraction(1, 3))
print("stride", layout.stride, "patches", len(layout.origins))
print("exact identity:", np.array_equal(patch_stitch(patch_split(vol, layout), layout), vol))
