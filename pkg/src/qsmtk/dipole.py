"""Dipole physics: k-space kernels and the two-channel forward operator.

The single-orientation forward model maps the state ``X = [chi33; dB']`` to
the field ``dB = F^-1 [D, 1] F X`` where ``D = 1/3 - (k.H)^2/|k|^2``. The
adjoint maps a field ``b`` back to ``[F^-1 D F b; b]``.

Every ``1/|k|^2`` multiplier is pinned to 0 at DC, so the mean
susceptibility is unobservable and forward fields are zero-mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Grid3, fft3, inv_ksq, k_outer, real_ifft3

GAMMA_HZ_PER_T = 42.577478e6
Z_HAT = np.array([0.0, 0.0, 1.0])


def unit_direction(H) -> np.ndarray:
    """Validate a field direction; must be unit norm to 1e-12."""
    H = np.asarray(H, dtype=float).reshape(3)
    if not np.all(np.isfinite(H)) or abs(np.linalg.norm(H) - 1.0) > 1e-12:
        raise ValueError(f"field direction must be a unit vector, got {H} (norm {np.linalg.norm(H)})")
    return H


def dipole_kernel(grid: Grid3, H=Z_HAT) -> np.ndarray:
    """Real k-space dipole kernel ``1/3 - (k.H)^2/|k|^2`` with ``D(DC) = 0``."""
    H = unit_direction(H)
    K, ksq = k_outer(grid)
    kHk = np.einsum("a,b,ab...->...", H, H, K)
    D = 1.0 / 3.0 - kHk * inv_ksq(ksq)
    D[0, 0, 0] = 0.0
    return D


def offdiag_kernels(grid: Grid3) -> tuple[np.ndarray, np.ndarray]:
    """Multipliers ``-kz kx/|k|^2`` and ``-kz ky/|k|^2`` applied to chi13, chi23."""
    K, ksq = k_outer(grid)
    ik = inv_ksq(ksq)
    return -K[2, 0] * ik, -K[2, 1] * ik


def _check_same_shape(*vols):
    shapes = {np.shape(v) for v in vols}
    if len(shapes) != 1:
        raise ValueError(f"grid mismatch: {sorted(shapes)}")


def offdiag_field(chi13: np.ndarray, chi23: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Field generated by the off-diagonal tensor terms chi13 and chi23."""
    _check_same_shape(chi13, chi23)
    grid = Grid3(chi13.shape, voxel_size)
    m13, m23 = offdiag_kernels(grid)
    return real_ifft3(m13 * fft3(chi13) + m23 * fft3(chi23))


def convolve_kernel(vol: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``F^-1(kernel * F vol)`` for a real, Hermitian-even kernel."""
    return real_ifft3(kernel * fft3(vol))


@dataclass
class ReconState:
    """The two-channel unknown: ``chi33`` and the off-diagonal field ``dbp`` (both ppm)."""

    chi33: np.ndarray
    dbp: np.ndarray

    def __post_init__(self):
        self.chi33 = np.asarray(self.chi33, dtype=float)
        self.dbp = np.asarray(self.dbp, dtype=float)
        _check_same_shape(self.chi33, self.dbp)

    @classmethod
    def zeros(cls, shape) -> "ReconState":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self):
        return self.chi33.shape

    def __add__(self, other: "ReconState") -> "ReconState":
        return ReconState(self.chi33 + other.chi33, self.dbp + other.dbp)

    def __sub__(self, other: "ReconState") -> "ReconState":
        return ReconState(self.chi33 - other.chi33, self.dbp - other.dbp)

    def __mul__(self, a: float) -> "ReconState":
        return ReconState(a * self.chi33, a * self.dbp)

    __rmul__ = __mul__

    def __neg__(self) -> "ReconState":
        return ReconState(-self.chi33, -self.dbp)

    def vdot(self, other: "ReconState") -> float:
        return float(np.vdot(self.chi33, other.chi33) + np.vdot(self.dbp, other.dbp))

    def norm(self) -> float:
        return float(np.sqrt(self.vdot(self)))

    def stack(self) -> np.ndarray:
        return np.stack([self.chi33, self.dbp])

    def copy(self) -> "ReconState":
        return ReconState(self.chi33.copy(), self.dbp.copy())


class ForwardOperator:
    """The two-channel operator ``A`` for one grid and field direction.

    Caches the dipole kernel so repeated applications inside a solver only
    cost two FFTs each.
    """

    def __init__(self, grid: Grid3, H=Z_HAT, kernel: np.ndarray | None = None):
        self.grid = grid
        self.H = unit_direction(H)
        self.kernel = dipole_kernel(grid, self.H) if kernel is None else np.asarray(kernel, float)
        if self.kernel.shape != grid.dims:
            raise ValueError(f"kernel shape {self.kernel.shape} does not match grid {grid.dims}")

    def _check(self, vol):
        if np.shape(vol) != self.grid.dims:
            raise ValueError(f"grid mismatch: {np.shape(vol)} vs operator {self.grid.dims}")

    def apply(self, X: ReconState) -> np.ndarray:
        """``A X = F^-1(D F chi33) + dB'``."""
        self._check(X.chi33)
        return convolve_kernel(X.chi33, self.kernel) + X.dbp

    def adjoint(self, b: np.ndarray) -> ReconState:
        """``A^H b = [F^-1(D F b); b]``; ``D`` is real and even, hence self-adjoint."""
        self._check(b)
        return ReconState(convolve_kernel(b, self.kernel), np.array(b, dtype=float))

    def normal(self, X: ReconState) -> ReconState:
        return self.adjoint(self.apply(X))

    def gradient_step(self, X: ReconState, b: np.ndarray, t: float) -> ReconState:
        """``X - t A^H(A X - b)``, the affine argument of the proximal map."""
        if not t > 0:
            raise ValueError(f"step size must be positive, got {t}")
        return X - t * self.adjoint(self.apply(X) - b)


def apply_A(X: ReconState, voxel_size=(1.0, 1.0, 1.0), H=Z_HAT) -> np.ndarray:
    return ForwardOperator(Grid3(X.shape, voxel_size), H).apply(X)


def apply_AH(b: np.ndarray, voxel_size=(1.0, 1.0, 1.0), H=Z_HAT) -> ReconState:
    return ForwardOperator(Grid3(np.shape(b), voxel_size), H).adjoint(b)


def gradient_step(X: ReconState, b: np.ndarray, t: float, voxel_size=(1.0, 1.0, 1.0),
                  H=Z_HAT) -> ReconState:
    return ForwardOperator(Grid3(X.shape, voxel_size), H).gradient_step(X, b, t)


def sti_coefficients(grid: Grid3, H) -> np.ndarray:
    """Per-k weights of the six tensor channels in the STI field model.

    Returns ``(6, nx, ny, nz)``: the field spectrum is
    ``sum_c coef[c] * F chi_c`` for channels ``(11, 12, 13, 22, 23, 33)``.
    Off-diagonal channels carry both symmetric entries, hence the factor 2
    in their ``H_i H_j / 3`` term.
    """
    H = unit_direction(H)
    K, ksq = k_outer(grid)
    ik = inv_ksq(ksq)
    # (k.H) k_i  ->  sum_a H_a K[a, i]
    kHk_i = np.einsum("a,ai...->i...", H, K)
    coef = np.empty((6,) + grid.dims)
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    for c, (i, j) in enumerate(pairs):
        if i == j:
            coef[c] = H[i] * H[i] / 3.0 - kHk_i[i] * H[i] * ik
        else:
            coef[c] = 2.0 * H[i] * H[j] / 3.0 - (kHk_i[i] * H[j] + kHk_i[j] * H[i]) * ik
    coef[:, 0, 0, 0] = 0.0
    return coef


def _padded_shape(shape, pad: float) -> tuple[int, int, int]:
    if pad < 1:
        raise ValueError(f"pad factor must be >= 1, got {pad}")
    return tuple(int(np.ceil(n * pad)) for n in shape)


def _zero_pad(vol: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(vol.shape[:-3] + tuple(shape))
    out[(...,) + tuple(slice(0, n) for n in vol.shape[-3:])] = vol
    return out


def _crop(vol: np.ndarray, shape) -> np.ndarray:
    return np.ascontiguousarray(vol[(...,) + tuple(slice(0, n) for n in shape)])


def simulate_field(chi33: np.ndarray, H=Z_HAT, voxel_size=(1.0, 1.0, 1.0),
                   pad: float = 1.0) -> np.ndarray:
    """Field of a scalar susceptibility map, ``F^-1(D F chi)``.

    With ``pad > 1`` the map is zero-padded to ``ceil(pad * n)`` per axis
    before the transform and the field is cropped back, which suppresses
    the periodic images of the circular convolution. ``pad = 1`` is exactly
    the first channel of :class:`ForwardOperator`.
    """
    chi33 = np.asarray(chi33, dtype=float)
    shape = _padded_shape(chi33.shape, pad)
    kernel = dipole_kernel(Grid3(shape, voxel_size), H)
    return _crop(convolve_kernel(_zero_pad(chi33, shape), kernel), chi33.shape)


def simulate_field_sti(chi: np.ndarray, H=Z_HAT, voxel_size=(1.0, 1.0, 1.0),
                       pad: float = 1.0) -> np.ndarray:
    """Field of a symmetric susceptibility tensor for field direction ``H``.

    ``chi`` has shape ``(6, nx, ny, nz)``; the result is the real field in
    the same units (ppm), evaluated on the tensor's own sampling grid.
    ``pad`` behaves as in :func:`simulate_field`.
    """
    chi = np.asarray(chi, dtype=float)
    if chi.ndim != 4 or chi.shape[0] != 6:
        raise ValueError(f"tensor field must be (6, nx, ny, nz), got {chi.shape}")
    shape = _padded_shape(chi.shape[1:], pad)
    coef = sti_coefficients(Grid3(shape, voxel_size), H)
    spec = np.einsum("c...,c...->...", coef, fft3(_zero_pad(chi, shape)))
    return _crop(real_ifft3(spec), chi.shape[1:])


def echo_combine(phases, echo_times, B0: float, gamma: float = GAMMA_HZ_PER_T) -> np.ndarray:
    """Average the per-echo fields ``phi / (2 pi gamma TE B0)``, in ppm."""
    phases = list(phases)
    echo_times = list(echo_times)
    if not phases:
        raise ValueError("need at least one echo")
    if len(phases) != len(echo_times):
        raise ValueError(f"{len(phases)} phase volumes but {len(echo_times)} echo times")
    if any(not te > 0 for te in echo_times):
        raise ValueError(f"echo times must be positive, got {echo_times}")
    if not B0 > 0:
        raise ValueError(f"B0 must be positive, got {B0}")
    acc = np.zeros(np.shape(phases[0]))
    for phi, te in zip(phases, echo_times):
        acc += np.asarray(phi, dtype=float) / (2.0 * np.pi * gamma * te * B0)
    return 1e6 * acc / len(phases)
