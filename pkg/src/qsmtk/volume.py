"""Grids, FFT convention, k-space coordinates and patch tiling.

Volumes are plain ``numpy`` arrays indexed ``[x, y, z]``; a :class:`Grid3`
carries the matching voxel size. Tensor fields carry a leading channel axis
of length 6 in the order ``(chi11, chi12, chi13, chi22, chi23, chi33)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import scipy.fft

TENSOR_CHANNELS = ("chi11", "chi12", "chi13", "chi22", "chi23", "chi33")


@dataclass(frozen=True)
class Grid3:
    """Sampling grid: integer dims and voxel size in mm."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        vsz = tuple(float(d) for d in self.voxel_size)
        if len(dims) != 3 or len(vsz) != 3:
            raise ValueError("Grid3 needs three dims and three voxel sizes")
        if min(dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if not all(math.isfinite(d) and d > 0 for d in vsz):
            raise ValueError(f"voxel sizes must be finite and positive, got {vsz}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vsz)

    @classmethod
    def of(cls, vol: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> "Grid3":
        return cls(tuple(np.shape(vol)[-3:]), voxel_size)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        return self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2]


def fft3(vol: np.ndarray, direction: str = "forward") -> np.ndarray:
    """3D FFT over the last three axes.

    The forward transform is the unnormalized sum; the inverse carries the
    ``1/(nx*ny*nz)`` factor.
    """
    if direction == "forward":
        return scipy.fft.fftn(vol, axes=(-3, -2, -1))
    if direction == "inverse":
        return scipy.fft.ifftn(vol, axes=(-3, -2, -1))
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def k_coords(grid: Grid3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical k-space coordinates (cycles/mm) on the FFT index layout.

    Returns broadcastable arrays of shapes ``(nx,1,1)``, ``(1,ny,1)`` and
    ``(1,1,nz)``. Index 0 is DC; the Nyquist sample of an even axis is
    negative, as in :func:`numpy.fft.fftfreq`.
    """
    nx, ny, nz = grid.dims
    dx, dy, dz = grid.voxel_size
    kx = np.fft.fftfreq(nx, d=dx).reshape(nx, 1, 1)
    ky = np.fft.fftfreq(ny, d=dy).reshape(1, ny, 1)
    kz = np.fft.fftfreq(nz, d=dz).reshape(1, 1, nz)
    return kx, ky, kz


def nyquist_masks(grid: Grid3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable boolean masks of the Nyquist sample on each even axis."""
    out = []
    for n, shape in zip(grid.dims, [(-1, 1, 1), (1, -1, 1), (1, 1, -1)]):
        m = np.zeros(n, dtype=bool)
        if n % 2 == 0:
            m[n // 2] = True
        out.append(m.reshape(shape))
    return tuple(out)


def k_outer(grid: Grid3) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric k-space outer product ``K[a][b] = k_a k_b`` and ``|k|^2``.

    The Nyquist sample of an even axis stands for both ``+k_N`` and
    ``-k_N``. Each entry is the average of ``k_a k_b`` over those aliases:
    squares are unaffected, while any cross term with a factor on a Nyquist
    plane averages to 0. This keeps every kernel built from ``K`` Hermitian
    (real output) and exactly equivariant under 90-degree grid rotations.
    ``K`` has shape ``(3, 3, nx, ny, nz)``.
    """
    k = k_coords(grid)
    nyq = nyquist_masks(grid)
    shape = grid.dims
    K = np.empty((3, 3) + shape)
    for a in range(3):
        K[a, a] = np.broadcast_to(k[a] ** 2, shape)
        for b in range(a + 1, 3):
            K[a, b] = K[b, a] = np.where(nyq[a] | nyq[b], 0.0, k[a] * k[b])
    ksq = K[0, 0] + K[1, 1] + K[2, 2]
    return K, ksq


def inv_ksq(ksq: np.ndarray) -> np.ndarray:
    """``1/|k|^2`` with the DC sample pinned to 0."""
    out = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=out, where=ksq > 0)
    return out


class KernelSymmetryError(RuntimeError):
    """A k-space product left a non-negligible imaginary part after F^-1."""


def real_ifft3(spectrum: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Inverse FFT of a Hermitian spectrum, returning the real part.

    Raises :class:`KernelSymmetryError` if the discarded imaginary residue
    exceeds ``rtol`` times the output scale.
    """
    out = fft3(spectrum, "inverse")
    imag = np.abs(out.imag).max() if out.size else 0.0
    if imag > 0:
        n = math.prod(spectrum.shape[-3:])
        scale = max(np.abs(out.real).max(), np.abs(spectrum).max() / n)
        if imag > rtol * scale:
            raise KernelSymmetryError(
                f"imaginary residue {imag:.3g} exceeds {rtol:g} x output scale {scale:.3g}"
            )
    return np.ascontiguousarray(out.real)


# --------------------------------------------------------------------------
# patch-then-stitch


@dataclass(frozen=True)
class PatchLayout:
    """Cube patches covering a (possibly zero-padded) volume.

    ``shape`` is the original volume shape, ``padded_shape`` the shape after
    zero-padding every axis up to at least ``patch_size``.
    """

    patch_size: int
    overlap_fraction: Fraction
    shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...] = field(repr=False)

    @property
    def stride(self) -> int:
        return patch_stride(self.patch_size, self.overlap_fraction)


def patch_stride(patch_size: int, overlap_fraction) -> int:
    return max(1, round(patch_size * (1 - Fraction(overlap_fraction))))


def _axis_origins(n: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] + size < n:
        origins.append(n - size)
    return origins


def plan_patches(shape: Sequence[int], patch_size: int = 48,
                 overlap_fraction=Fraction(1, 3)) -> PatchLayout:
    """Plan the patch origins for a volume of the given shape.

    Origins advance by ``patch_size * (1 - overlap_fraction)``; the last
    origin along each axis is clamped so the patch ends on the boundary.
    """
    if int(patch_size) <= 0:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    overlap_fraction = Fraction(overlap_fraction).limit_denominator(1000)
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap fraction must be in [0, 1), got {overlap_fraction}")
    shape = tuple(int(n) for n in shape)
    padded = tuple(max(n, patch_size) for n in shape)
    stride = patch_stride(patch_size, overlap_fraction)
    per_axis = [_axis_origins(n, patch_size, stride) for n in padded]
    origins = tuple((i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2])
    return PatchLayout(int(patch_size), overlap_fraction, shape, padded, origins)


def _pad(vol: np.ndarray, padded_shape) -> np.ndarray:
    if vol.shape == tuple(padded_shape):
        return vol
    out = np.zeros(padded_shape, dtype=vol.dtype)
    out[tuple(slice(0, n) for n in vol.shape)] = vol
    return out


def patch_split(vol: np.ndarray, layout: PatchLayout) -> list[np.ndarray]:
    """Cut ``vol`` into the patches of ``layout`` (copies, in origin order)."""
    if vol.shape != layout.shape:
        raise ValueError(f"volume shape {vol.shape} does not match layout {layout.shape}")
    vol = _pad(vol, layout.padded_shape)
    p = layout.patch_size
    return [vol[i:i + p, j:j + p, k:k + p].copy() for i, j, k in layout.origins]


def patch_stitch(patches: Sequence[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Average overlapping patches back into a volume of ``layout.shape``.

    The average is accumulated as a running mean, so voxels on which all
    covering patches agree come back bit-exact.
    """
    p = layout.patch_size
    if len(patches) != len(layout.origins):
        raise ValueError(f"expected {len(layout.origins)} patches, got {len(patches)}")
    mean = np.zeros(layout.padded_shape)
    count = np.zeros(layout.padded_shape)
    for (i, j, k), patch in zip(layout.origins, patches):
        if patch.shape != (p, p, p):
            raise ValueError(f"patch shape {patch.shape} does not match size {p}")
        sl = np.s_[i:i + p, j:j + p, k:k + p]
        count[sl] += 1
        mean[sl] += (patch - mean[sl]) / count[sl]
    return mean[tuple(slice(0, n) for n in layout.shape)]


def apply_patchwise(vol: np.ndarray, fn: Callable[[np.ndarray], np.ndarray],
                    patch_size: int = 48, overlap_fraction=Fraction(1, 3)) -> np.ndarray:
    """Run ``fn`` on every patch of ``vol`` and stitch the results."""
    layout = plan_patches(vol.shape, patch_size, overlap_fraction)
    return patch_stitch([fn(p) for p in patch_split(vol, layout)], layout)
