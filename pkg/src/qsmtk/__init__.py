"""Quantitative susceptibility mapping toolkit.

Two-channel dipole forward model, unrolled proximal-gradient inversion,
tensor (STI) and COSMOS fitting, quality metrics and a command line.
"""

from .dipole import (
    Z_HAT,
    ForwardOperator,
    ReconState,
    apply_A,
    apply_AH,
    dipole_kernel,
    echo_combine,
    gradient_step,
    offdiag_field,
    simulate_field,
    simulate_field_sti,
)
from .inversion import (
    DivergenceError,
    IdentityProx,
    SoftThresholdProx,
    SolveConfig,
    cg_least_squares,
    lipschitz_estimate,
    parse_prox,
    pgd_solve,
    tkd_invert,
)
from .metrics import evaluate, hfen, nrmse, phase_consistency, roi_stats, ssim3
from .phantom import RandomTensorSpec, SpherePhantom, orientation_set, random_tensor, sphere_chi
from .qvol import Volume, read_manifest, read_qvol, write_qvol
from .sti import OrientationSample, RankDeficiencyError, cosmos_fit, extract_labels, rotate_tensor, sti_fit
from .volume import Grid3, KernelSymmetryError, patch_split, patch_stitch, plan_patches

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
