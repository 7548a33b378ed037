"""Synthetic susceptibility sources and their analytic fields.

Voxel ``(i, j, k)`` is centred at ``(i*dx, j*dy, k*dz)`` mm, so sphere
centres are given in the same millimetre coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .dipole import unit_direction
from .volume import Grid3

SUPERSAMPLE = 8
GOLDEN_ANGLE_DEG = 180.0 * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class SpherePhantom:
    center: tuple[float, float, float]
    radius: float
    delta_chi: float = 1.0

    def check(self, grid: Grid3, margin_voxels: float = 2.0) -> None:
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")
        for c, n, d in zip(self.center, grid.dims, grid.voxel_size):
            lo, hi = c - self.radius, c + self.radius
            if lo < margin_voxels * d or hi > (n - 1 - margin_voxels) * d:
                raise ValueError(
                    f"sphere (center {self.center}, radius {self.radius}) leaves less than "
                    f"{margin_voxels} voxels of margin in grid {grid.dims}"
                )

    @classmethod
    def centered(cls, grid: Grid3, radius: float, delta_chi: float = 1.0) -> "SpherePhantom":
        center = tuple((n // 2) * d for n, d in zip(grid.dims, grid.voxel_size))
        return cls(center, radius, delta_chi)


def _positions(grid: Grid3):
    return [np.arange(n).reshape(s) * d for n, d, s in
            zip(grid.dims, grid.voxel_size, [(-1, 1, 1), (1, -1, 1), (1, 1, -1)])]


def sphere_chi(grid: Grid3, spec: SpherePhantom) -> np.ndarray:
    """Uniform sphere with partial-volume edges.

    Voxels that the surface may cut get the fraction of ``8^3`` sub-voxel
    samples falling inside the sphere.
    """
    spec.check(grid)
    x, y, z = _positions(grid)
    cx, cy, cz = spec.center
    dist = np.sqrt((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
    half_diag = 0.5 * np.linalg.norm(grid.voxel_size)
    frac = (dist <= spec.radius).astype(float)
    edge = np.argwhere(np.abs(dist - spec.radius) <= half_diag)
    if len(edge):
        offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
        sub = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
        sub = sub * np.asarray(grid.voxel_size)
        centers = edge * np.asarray(grid.voxel_size) - np.asarray(spec.center)
        pts = centers[:, None, :] + sub[None, :, :]
        inside = (pts ** 2).sum(-1) <= spec.radius ** 2
        frac[tuple(edge.T)] = inside.mean(axis=1)
    return spec.delta_chi * frac


def sphere_field_analytic(grid: Grid3, spec: SpherePhantom, H=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Field (ppm) of a uniformly magnetized sphere, zero inside.

    Outside: ``(dchi/3) (a/r)^3 (3 cos^2(theta) - 1)`` with ``theta`` the
    angle between ``r - c`` and ``H``. The zero interior follows from the
    Lorentz-sphere 1/3 term of the k-space kernel.
    """
    H = unit_direction(H)
    x, y, z = _positions(grid)
    rx, ry, rz = x - spec.center[0], y - spec.center[1], z - spec.center[2]
    r2 = rx ** 2 + ry ** 2 + rz ** 2
    outside = r2 > spec.radius ** 2
    r2s = np.where(outside, r2, 1.0)
    cos2 = (rx * H[0] + ry * H[1] + rz * H[2]) ** 2 / r2s
    field = spec.delta_chi / 3.0 * (spec.radius ** 2 / r2s) ** 1.5 * (3.0 * cos2 - 1.0)
    return np.where(outside, field, 0.0)


def sphere_distance(grid: Grid3, spec: SpherePhantom) -> np.ndarray:
    """Distance (mm) of each voxel centre from the sphere centre."""
    x, y, z = _positions(grid)
    return np.sqrt((x - spec.center[0]) ** 2 + (y - spec.center[1]) ** 2 + (z - spec.center[2]) ** 2)


# --------------------------------------------------------------------------
# random tensors


@dataclass(frozen=True)
class RandomTensorSpec:
    """Smooth random tensor field.

    ``amplitude`` is the target standard deviation (ppm), either one value or
    six per-channel values. ``anisotropy`` scales the off-diagonal channels
    and the independent part of the diagonal.
    """

    seed: int = 0
    correlation_length: float = 2.0
    amplitude: float | tuple = 0.05
    anisotropy: float = 0.3

    def amplitudes(self) -> np.ndarray:
        amp = np.broadcast_to(np.asarray(self.amplitude, dtype=float), (6,)).copy()
        if np.any(amp < 0):
            raise ValueError(f"amplitudes must be >= 0, got {amp}")
        return amp


def _smooth_unit(rng, grid: Grid3, length_mm: float) -> np.ndarray:
    sigma = [length_mm / d for d in grid.voxel_size]
    field = gaussian_filter(rng.standard_normal(grid.dims), sigma, mode="wrap")
    field -= field.mean()
    sd = field.std()
    return field / sd if sd > 0 else field


def random_tensor(grid: Grid3, spec: RandomTensorSpec) -> np.ndarray:
    """Zero-mean smooth symmetric tensor field ``(6, nx, ny, nz)``.

    The diagonal is a shared isotropic part plus ``anisotropy`` times an
    independent part, renormalized to the target amplitude; off-diagonals
    are ``anisotropy`` times the amplitude. ``anisotropy = 0`` gives an
    isotropic field.
    """
    if spec.correlation_length < min(grid.voxel_size):
        raise ValueError("correlation length must be at least one voxel")
    if spec.anisotropy < 0:
        raise ValueError(f"anisotropy fraction must be >= 0, got {spec.anisotropy}")
    amp = spec.amplitudes()
    rng = np.random.default_rng(spec.seed)
    iso = _smooth_unit(rng, grid, spec.correlation_length)
    noise = [_smooth_unit(rng, grid, spec.correlation_length) for _ in range(6)]
    f = spec.anisotropy
    chi = np.empty((6,) + grid.dims)
    for c in range(6):
        if c in (0, 3, 5):
            chi[c] = amp[c] * (iso + f * noise[c]) / np.sqrt(1.0 + f * f)
        else:
            chi[c] = amp[c] * f * noise[c]
    return chi


# --------------------------------------------------------------------------
# orientations and noise


def orientation_set(n: int, max_tilt_deg: float = 45.0, seed: int = 0) -> list[np.ndarray]:
    """``n`` head rotations; the first is the identity (supine).

    Tilts step evenly up to ``max_tilt_deg``; tilt axes lie in the xy-plane
    at golden-angle azimuth increments from a seeded random start.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not 0 < max_tilt_deg <= 90:
        raise ValueError(f"max tilt must be in (0, 90], got {max_tilt_deg}")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0.0, 360.0)
    out = [np.eye(3)]
    for i in range(1, n):
        tilt = np.deg2rad(max_tilt_deg * i / (n - 1))
        az = np.deg2rad((start + i * GOLDEN_ANGLE_DEG) % 360.0)
        axis = np.array([np.cos(az), np.sin(az), 0.0])
        out.append(Rotation.from_rotvec(tilt * axis).as_matrix())
    return out


def add_noise(vol: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """Add seeded i.i.d. Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    vol = np.asarray(vol, dtype=float)
    if sigma == 0:
        return vol.copy()
    return vol + sigma * np.random.default_rng(seed).standard_normal(vol.shape)
