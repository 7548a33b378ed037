"""Multi-orientation fitting: susceptibility tensor (STI) and COSMOS.

Frame convention: a rotation ``R`` maps laboratory vectors to subject
vectors, ``v_sub = R v_lab``. Hence the field direction seen in the subject
frame is ``H_sub = R z`` and the laboratory-frame tensor is
``chi_lab = R^T chi_sub R``.

Both fits work per k-sample on a single shared grid; no registration or
resampling is done here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dipole import Z_HAT, dipole_kernel, offdiag_field, ReconState, sti_coefficients, unit_direction
from .volume import Grid3, fft3, real_ifft3

log = logging.getLogger(__name__)

MIN_STI_ORIENTATIONS = 6
MIN_COSMOS_ORIENTATIONS = 3
COSMOS_CUTOFF = 1e-6
RIDGE = 1e-12
# (row, col) of each stored channel in the symmetric 3x3 tensor
_PAIRS = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class RankDeficiencyError(RuntimeError):
    """Too many k-samples had a singular per-k system."""

    def __init__(self, count: int, total: int):
        super().__init__(f"{count} of {total} k-samples are rank-deficient "
                         f"({100.0 * count / total:.2f}% > 1%)")
        self.count = count
        self.total = total


def check_rotation(R, tol: float = 1e-10) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(3, 3)
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"not a proper rotation matrix:\n{R}")
    return R


def h_from_rotation(R) -> np.ndarray:
    """Field direction in the subject frame, ``R @ z``."""
    return check_rotation(R) @ Z_HAT


def tensor_to_matrix(chi: np.ndarray) -> np.ndarray:
    """``(6, ...)`` channels to ``(..., 3, 3)`` symmetric matrices."""
    chi = np.asarray(chi)
    M = np.empty(chi.shape[1:] + (3, 3))
    for c, (i, j) in enumerate(_PAIRS):
        M[..., i, j] = chi[c]
        M[..., j, i] = chi[c]
    return M


def matrix_to_tensor(M: np.ndarray) -> np.ndarray:
    return np.stack([M[..., i, j] for i, j in _PAIRS])


def rotate_tensor(chi_sub: np.ndarray, R) -> np.ndarray:
    """Per-voxel congruence ``R^T chi R`` (subject frame to laboratory frame)."""
    R = check_rotation(R)
    M = tensor_to_matrix(chi_sub)
    out = np.einsum("ai,...ab,bj->...ij", R, M, R)
    # symmetrize away rounding so the 6-channel form is exact
    return matrix_to_tensor(0.5 * (out + np.swapaxes(out, -1, -2)))


def extract_labels(chi_lab: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> ReconState:
    """Single-orientation targets: ``chi33`` and the field of chi13, chi23."""
    chi_lab = np.asarray(chi_lab, dtype=float)
    return ReconState(chi_lab[5].copy(), offdiag_field(chi_lab[2], chi_lab[4], voxel_size))


def permute_grid(vol: np.ndarray, R) -> np.ndarray:
    """Resample a volume under a grid-aligned (signed permutation) rotation.

    Returns ``out`` with ``out[i] = vol[R i]`` where voxel indices are taken
    periodically about index 0, matching the FFT origin. This maps a
    subject-frame volume onto laboratory-frame sampling for the exact
    90-degree rotations used in tests; general rotations need registration
    and are not supported.
    """
    R = check_rotation(R)
    P = np.rint(R)
    if np.abs(R - P).max() > 1e-12:
        raise ValueError("permute_grid only supports signed permutation rotations")
    vol = np.asarray(vol)
    # out axis j reads source axis src[j]
    src = [int(np.flatnonzero(P[:, j])[0]) for j in range(3)]
    lead = vol.ndim - 3
    out = np.moveaxis(vol, [lead + s for s in src], [lead + 0, lead + 1, lead + 2])
    for j in range(3):
        if P[src[j], j] < 0:
            # index i -> -i mod n
            out = np.roll(np.flip(out, axis=lead + j), 1, axis=lead + j)
    return np.ascontiguousarray(out)


@dataclass
class OrientationSample:
    """One scan: field map (ppm) and the field direction in the subject frame."""

    field: np.ndarray
    H_sub: np.ndarray
    R: np.ndarray | None = None

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=float)
        if self.R is not None:
            self.R = check_rotation(self.R)
            H = self.R @ Z_HAT
            if self.H_sub is not None and np.abs(np.asarray(self.H_sub) - H).max() > 1e-10:
                raise ValueError("H_sub is inconsistent with R @ z")
            self.H_sub = H
        self.H_sub = unit_direction(self.H_sub)

    @classmethod
    def from_rotation(cls, field, R) -> "OrientationSample":
        return cls(field, None, R)


def _shared_grid(samples, voxel_size) -> Grid3:
    shapes = {s.field.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"grid mismatch across orientation samples: {sorted(shapes)}")
    return Grid3(shapes.pop(), voxel_size)


def sti_design(grid: Grid3, directions) -> np.ndarray:
    """Per-k design matrices, shape ``(N, 6, nx, ny, nz)``."""
    return np.stack([sti_coefficients(grid, H) for H in directions])


def sti_fit(samples, voxel_size=(1.0, 1.0, 1.0), max_deficient_fraction: float = 0.01,
            return_info: bool = False):
    """Least-squares susceptibility tensor from at least six orientations.

    Solves the ``N x 6`` system at every nonzero k through its 6x6 normal
    equations. Samples whose Gram matrix is numerically singular get a
    ridge of ``1e-12`` times the largest Gram eigenvalue over all k; if more than
    ``max_deficient_fraction`` of the samples need it,
    :class:`RankDeficiencyError` is raised. DC is set to 0.

    Returns the ``(6, nx, ny, nz)`` tensor, plus a dict with the deficient
    count and the worst condition number when ``return_info`` is true.
    """
    samples = list(samples)
    if len(samples) < MIN_STI_ORIENTATIONS:
        raise ValueError(f"STI needs at least {MIN_STI_ORIENTATIONS} orientations, got {len(samples)}")
    grid = _shared_grid(samples, voxel_size)
    A = sti_design(grid, [s.H_sub for s in samples])              # (N, 6, *dims)
    nk = grid.size
    A = A.reshape(len(samples), 6, nk).transpose(2, 0, 1)          # (nk, N, 6)
    B = np.stack([fft3(s.field).reshape(nk) for s in samples], 1)  # (nk, N)

    gram = np.einsum("kni,knj->kij", A, A)
    rhs = np.einsum("kni,kn->ki", A, B)
    evals = np.linalg.eigvalsh(gram)
    top = evals[:, -1]
    scale = top.max()
    # singular per-k systems, including all-zero ones such as the corner
    # sample where k k^T is a multiple of the identity
    deficient = (evals[:, 0] <= RIDGE * top) | (top <= RIDGE * scale)
    deficient[0] = False  # DC is dropped, not solved
    count = int(deficient.sum())
    if count > max_deficient_fraction * (nk - 1):
        raise RankDeficiencyError(count, nk - 1)
    if count:
        log.info("sti_fit: ridge applied at %d of %d k-samples", count, nk - 1)
    gram[deficient] += RIDGE * scale * np.eye(6)
    gram[0] = np.eye(6)
    rhs[0] = 0.0
    sol = np.linalg.solve(gram, rhs[..., None])[..., 0]           # (nk, 6)
    chi = real_ifft3(sol.T.reshape((6,) + grid.dims))
    if return_info:
        ok = ~deficient[1:]
        cond = float(np.sqrt(top[1:][ok] / evals[1:, 0][ok]).max()) if ok.any() else np.inf
        return chi, {"deficient": count, "max_condition": cond}
    return chi


def cosmos_fit(samples, voxel_size=(1.0, 1.0, 1.0), cutoff: float = COSMOS_CUTOFF) -> np.ndarray:
    """Scalar susceptibility from at least three orientations.

    Per k: ``sum_n D_n F b_n / sum_n D_n^2``; where the denominator falls
    below ``cutoff`` (always at DC) the estimate is 0.
    """
    samples = list(samples)
    if len(samples) < MIN_COSMOS_ORIENTATIONS:
        raise ValueError(f"COSMOS needs at least {MIN_COSMOS_ORIENTATIONS} orientations, "
                         f"got {len(samples)}")
    grid = _shared_grid(samples, voxel_size)
    num = np.zeros(grid.dims, dtype=complex)
    den = np.zeros(grid.dims)
    for s in samples:
        D = dipole_kernel(grid, s.H_sub)
        num += D * fft3(s.field)
        den += D * D
    keep = den >= cutoff
    spec = np.zeros_like(num)
    spec[keep] = num[keep] / den[keep]
    return real_ifft3(spec)


def cosmos_denominator(grid: Grid3, directions) -> np.ndarray:
    """``sum_n D_n(k)^2``; small values mark the mutual-zero set of the kernels."""
    return sum(dipole_kernel(grid, H) ** 2 for H in directions)
