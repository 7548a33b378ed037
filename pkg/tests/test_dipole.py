import itertools

import numpy as np
import pytest

from qsmtk.dipole import (
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
    sti_coefficients,
    unit_direction,
)
from qsmtk.phantom import RandomTensorSpec, random_tensor
from qsmtk.sti import extract_labels, tensor_to_matrix
from qsmtk.volume import Grid3, fft3, real_ifft3


# ---- brute-force oracles -------------------------------------------------
# Multipliers are evaluated from the textbook formulas sample by sample. An
# even axis's Nyquist sample stands for both +k_N and -k_N, so the oracle
# averages the formula over every such alias, then applies the result
# through explicit DFT matrices.


def _dft(n):
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def _alias_average(grid, formula):
    """Average ``formula(k)`` over the +-k_N aliases of Nyquist coordinates."""
    out = np.zeros(grid.dims)
    freqs = [np.fft.fftfreq(n, d) for n, d in zip(grid.dims, grid.voxel_size)]
    for idx in np.ndindex(*grid.dims):
        if idx == (0, 0, 0):
            continue
        options = []
        for i, n, f in zip(idx, grid.dims, freqs):
            k = f[i]
            options.append((k, -k) if n % 2 == 0 and i == n // 2 else (k,))
        vals = [formula(np.array(k)) for k in itertools.product(*options)]
        out[idx] = np.mean(vals)
    return out


def _textbook_offdiag(grid):
    return (_alias_average(grid, lambda k: -k[2] * k[0] / (k @ k)),
            _alias_average(grid, lambda k: -k[2] * k[1] / (k @ k)))


def _textbook_dipole(grid, H):
    return _alias_average(grid, lambda k: 1 / 3 - (k @ H) ** 2 / (k @ k))


def _dense_apply(mult, x):
    W = np.kron(np.kron(_dft(x.shape[0]), _dft(x.shape[1])), _dft(x.shape[2]))
    y = np.linalg.solve(W, mult.ravel() * (W @ x.ravel()))
    return y.real.reshape(x.shape)


def _separable_apply(mult, x):
    Fx, Fy, Fz = (_dft(n) for n in x.shape)
    X = np.einsum("ai,bj,ck,ijk->abc", Fx, Fy, Fz, x)
    Y = mult * X
    Ix, Iy, Iz = (np.conj(_dft(n)) / n for n in x.shape)
    return np.einsum("ai,bj,ck,ijk->abc", Ix, Iy, Iz, Y).real


def test_offdiag_matches_dense_dft_8cubed(rng):
    grid = Grid3((8, 8, 8))
    a, b = rng.standard_normal((2, 8, 8, 8))
    m13, m23 = _textbook_offdiag(grid)
    ref = _dense_apply(m13, a) + _dense_apply(m23, b)
    np.testing.assert_allclose(offdiag_field(a, b), ref, atol=1e-12)


def test_offdiag_matches_separable_dft_16cubed_anisotropic(rng):
    vsz = (0.9, 1.1, 2.0)
    grid = Grid3((16, 16, 16), vsz)
    a, b = rng.standard_normal((2, 16, 16, 16))
    m13, m23 = _textbook_offdiag(grid)
    ref = _separable_apply(m13, a) + _separable_apply(m23, b)
    np.testing.assert_allclose(offdiag_field(a, b, vsz), ref, atol=1e-12)


@pytest.mark.parametrize("H", [Z_HAT, np.array([0.3, -0.4, np.sqrt(0.75)])])
def test_dipole_kernel_matches_textbook(rng, H):
    grid = Grid3((6, 8, 5), (1.0, 0.8, 1.5))
    H = H / np.linalg.norm(H)
    x = rng.standard_normal(grid.dims)
    ref = _separable_apply(_textbook_dipole(grid, H), x)
    op = ForwardOperator(grid, H)
    np.testing.assert_allclose(op.apply(ReconState(x, 0 * x)), ref, atol=1e-12)


def test_dipole_kernel_values():
    D = dipole_kernel(Grid3((8, 8, 8)))
    assert D[0, 0, 0] == 0
    assert np.isclose(D[0, 0, 1], -2 / 3)
    assert np.isclose(D[1, 0, 0], 1 / 3)
    assert D.min() >= -2 / 3 - 1e-15 and D.max() <= 1 / 3 + 1e-15
    assert np.isclose(D[1, 0, 1], 1 / 3 - 1 / 2)


def test_unit_direction():
    with pytest.raises(ValueError):
        unit_direction([0, 0, 2])
    with pytest.raises(ValueError):
        unit_direction([np.nan, 0, 1])


# ---- operator algebra ----------------------------------------------------


@pytest.mark.parametrize("dims,vsz", [((8, 8, 8), (1, 1, 1)), ((16, 24, 12), (0.9, 0.9, 2.0))])
def test_adjoint_identity(rng, dims, vsz):
    op = ForwardOperator(Grid3(dims, vsz), np.array([0.1, 0.2, 1.0]) / np.sqrt(1.05))
    for _ in range(10):
        X = ReconState(rng.standard_normal(dims), rng.standard_normal(dims))
        y = rng.standard_normal(dims)
        AX = op.apply(X)
        lhs, rhs = np.vdot(AX, y), X.vdot(op.adjoint(y))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(AX) * np.linalg.norm(y)


def test_wrappers_and_gradient_step(rng):
    X = ReconState(rng.standard_normal((6, 6, 6)), rng.standard_normal((6, 6, 6)))
    b = rng.standard_normal((6, 6, 6))
    op = ForwardOperator(Grid3((6, 6, 6)))
    np.testing.assert_array_equal(apply_A(X), op.apply(X))
    np.testing.assert_array_equal(apply_AH(b).chi33, op.adjoint(b).chi33)
    step = gradient_step(X, b, 0.5)
    manual = X - 0.5 * op.adjoint(op.apply(X) - b)
    np.testing.assert_allclose(step.chi33, manual.chi33)
    np.testing.assert_allclose(step.dbp, manual.dbp)
    with pytest.raises(ValueError):
        op.gradient_step(X, b, 0.0)
    with pytest.raises(ValueError):
        op.apply(ReconState.zeros((5, 6, 6)))


def test_zero_input_zero_field():
    assert not simulate_field_sti(np.zeros((6, 8, 8, 8))).any()
    assert not simulate_field(np.zeros((8, 8, 8))).any()


def test_forward_fields_are_zero_mean(rng):
    assert abs(simulate_field(rng.standard_normal((8, 8, 8))).mean()) < 1e-15


# ---- tensor model --------------------------------------------------------


def test_sti_coefficients_match_quadratic_form(rng):
    """Field spectrum = F[ H^T chi H / 3 - (k.H)(k^T chi H)/|k|^2 ], per k."""
    grid = Grid3((5, 7, 6))
    H = np.array([0.2, -0.5, 0.8])
    H /= np.linalg.norm(H)
    coef = sti_coefficients(grid, H)
    kx, ky, kz = np.meshgrid(*[np.fft.fftfreq(n) for n in grid.dims], indexing="ij")
    chi_hat = rng.standard_normal(6)
    M = tensor_to_matrix(chi_hat.reshape(6, 1, 1, 1))[0, 0, 0]
    for idx in [(1, 2, 1), (2, 1, 5), (4, 6, 2), (0, 3, 0)]:
        k = np.array([kx[idx], ky[idx], kz[idx]])
        expect = H @ M @ H / 3 - (k @ H) * (k @ M @ H) / (k @ k)
        assert np.isclose(coef[(slice(None),) + idx] @ chi_hat, expect)


def test_decomposition_identity(rng):
    grid = Grid3((16, 16, 16))
    chi = random_tensor(grid, RandomTensorSpec(seed=3, anisotropy=0.5))
    labels = extract_labels(chi)
    lhs = simulate_field_sti(chi)
    rhs = ForwardOperator(grid).apply(labels)
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_isotropic_tensor_reduces_to_scalar(rng):
    chi33 = rng.standard_normal((8, 8, 8))
    chi = np.zeros((6, 8, 8, 8))
    chi[0] = chi[3] = chi[5] = chi33
    H = np.array([0.6, 0.0, 0.8])
    np.testing.assert_allclose(simulate_field_sti(chi, H), simulate_field(chi33, H), atol=1e-13)


def test_padding_crops_back(rng):
    x = rng.standard_normal((8, 9, 10))
    assert simulate_field(x, pad=2.0).shape == x.shape
    assert simulate_field_sti(rng.standard_normal((6, 8, 9, 10)), pad=1.5).shape == x.shape
    with pytest.raises(ValueError):
        simulate_field(x, pad=0.5)
    with pytest.raises(ValueError):
        simulate_field_sti(x)


def test_real_ifft3_holds_for_all_kernels(rng):
    # even dims with anisotropic voxels and oblique H: still Hermitian
    grid = Grid3((6, 8, 10), (0.7, 1.0, 1.3))
    H = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
    coef = sti_coefficients(grid, H)
    x = rng.standard_normal((6,) + grid.dims)
    real_ifft3(np.einsum("c...,c...->...", coef, fft3(x)))
    convolve = ForwardOperator(grid, H).apply(ReconState(x[0], x[1]))
    assert np.isfinite(convolve).all()


# ---- echo combination ----------------------------------------------------


def test_echo_combine():
    gamma, B0 = 42.577478e6, 3.0
    field_ppm = np.full((2, 2, 2), 0.05)
    tes = [5e-3, 10e-3, 15e-3]
    phases = [2 * np.pi * gamma * te * B0 * field_ppm * 1e-6 for te in tes]
    np.testing.assert_allclose(echo_combine(phases, tes, B0), field_ppm)
    with pytest.raises(ValueError):
        echo_combine(phases, tes[:2], B0)
    with pytest.raises(ValueError):
        echo_combine([], [], B0)
    with pytest.raises(ValueError):
        echo_combine(phases, [0.0, 1e-3, 2e-3], B0)
