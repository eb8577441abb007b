import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmrilab.fourier import (apply_adjoint, apply_forward, apply_normal, cg, dc_jacobian,
                             dc_solve, dc_solve_cg, fft2c, ifft2c)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def centered_dft_matrix(n):
    # origin at index n // 2 on both sides, unitary scaling
    idx = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_all_ones_dc_bin():
    k = fft2c(np.ones((4, 4)))
    assert k[2, 2] == pytest.approx(4.0, abs=1e-12)
    k[2, 2] = 0
    assert np.max(np.abs(k)) < 1e-12


def test_parseval_8x8():
    x = crandn(np.random.default_rng(0), 8, 8)
    assert abs(np.linalg.norm(fft2c(x)) - np.linalg.norm(x)) / np.linalg.norm(x) < 1e-12


@pytest.mark.parametrize("shape", [(4, 4), (5, 6), (3, 4)])
def test_matches_brute_force_dft(shape):
    x = crandn(np.random.default_rng(1), *shape)
    fy, fx = centered_dft_matrix(shape[0]), centered_dft_matrix(shape[1])
    oracle = fy @ x @ fx.T
    assert np.max(np.abs(fft2c(x) - oracle)) < 1e-10


def test_inverse_pair_and_linearity():
    rng = np.random.default_rng(2)
    x, y = crandn(rng, 8, 8), crandn(rng, 8, 8)
    assert rel(fft2c(ifft2c(x)), x) < 1e-12
    assert rel(ifft2c(fft2c(x)), x) < 1e-12
    assert rel(ifft2c(x + y), ifft2c(x) + ifft2c(y)) < 1e-12


def test_center_delta_has_flat_spectrum():
    x = np.zeros((8, 6), dtype=complex)
    x[4, 3] = 1
    assert np.allclose(np.abs(fft2c(x)), 1 / np.sqrt(48), atol=1e-15)


def test_complex64_preserved():
    x = np.ones((2, 8, 8), dtype=np.complex64)
    assert fft2c(x).dtype == np.complex64 and ifft2c(x).dtype == np.complex64


def test_forward_adjoint_algebra():
    rng = np.random.default_rng(3)
    mask = rng.uniform(size=(16, 12)) < 0.4
    g = crandn(rng, 4, 16, 12)
    b = crandn(rng, 4, 16, 12)
    lhs = np.vdot(apply_forward(g, mask), b)
    rhs = np.vdot(g, apply_adjoint(b, mask))
    assert abs(lhs - rhs) / abs(lhs) < 1e-10
    ahb = apply_adjoint(b, mask)
    assert rel(apply_normal(ahb, mask), ahb) < 1e-10
    full = np.ones((16, 12), dtype=bool)
    assert rel(apply_normal(g, full), g) < 1e-12
    assert rel(apply_adjoint(apply_forward(g, full), full), g) < 1e-12
    assert np.all(apply_forward(np.zeros_like(g), mask) == 0)
    off_support = b * ~mask
    assert np.max(np.abs(apply_adjoint(off_support, mask))) == 0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        apply_forward(np.zeros((2, 8, 8)), np.ones((8, 4), dtype=bool))


# ---------------------------------------------------------------------------
# data consistency


def test_dc_large_lambda_returns_z():
    rng = np.random.default_rng(4)
    mask = rng.uniform(size=(16, 16)) < 0.3
    z, b = crandn(rng, 2, 16, 16), crandn(rng, 2, 16, 16) * mask
    assert rel(dc_solve(z, b, mask, 1e6), z) < 1e-5


def test_dc_fully_sampled_zero_z_halves_b():
    rng = np.random.default_rng(5)
    b = crandn(rng, 3, 8, 8)
    out = dc_solve(np.zeros_like(b), b, np.ones((8, 8), bool), 1.0)
    assert np.array_equal(fft2c(out) * 2, fft2c(ifft2c(b)))
    assert np.max(np.abs(fft2c(out) - b / 2)) < 1e-14


def test_dc_matches_cg_oracle():
    rng = np.random.default_rng(6)
    mask = rng.uniform(size=(32, 32)) < 0.3
    z, b = crandn(rng, 4, 32, 32), crandn(rng, 4, 32, 32) * mask
    assert rel(dc_solve(z, b, mask, 0.05), dc_solve_cg(z, b, mask, 0.05)) < 1e-8


def test_dc_normal_equation_residual():
    rng = np.random.default_rng(7)
    mask = rng.uniform(size=(16, 16)) < 0.25
    z, b, lam = crandn(rng, 4, 16, 16), crandn(rng, 4, 16, 16) * mask, 0.3
    g = dc_solve(z, b, mask, lam)
    rhs = apply_adjoint(b, mask) + lam * z
    assert rel(apply_normal(g, mask) + lam * g, rhs) < 1e-10


def test_dc_rejects_nonpositive_lambda():
    z = np.zeros((1, 4, 4), complex)
    with pytest.raises(ValueError):
        dc_solve(z, z, np.ones((4, 4), bool), 0.0)


def test_dc_jacobian_against_finite_difference():
    rng = np.random.default_rng(8)
    mask = rng.uniform(size=(8, 8)) < 0.5
    z, b, lam = crandn(rng, 2, 8, 8), crandn(rng, 2, 8, 8) * mask, 2.0
    dz = crandn(rng, 2, 8, 8)
    h = 1e-6
    fd = (dc_solve(z + h * dz, b, mask, lam) - dc_solve(z - h * dz, b, mask, lam)) / (2 * h)
    assert rel(dc_jacobian(dz, mask, lam), fd) < 1e-8
    k = fft2c(dc_jacobian(ifft2c(np.ones((1, 8, 8))), mask, lam))[0]
    assert np.allclose(k[mask], lam / (1 + lam)) and np.allclose(k[~mask], 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(1e-3, 1e3))
def test_dc_is_non_expansive(seed, lam):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(8, 8)) < 0.4
    b = crandn(rng, 2, 8, 8) * mask
    z1, z2 = crandn(rng, 2, 8, 8), crandn(rng, 2, 8, 8)
    d_out = np.linalg.norm(dc_solve(z1, b, mask, lam) - dc_solve(z2, b, mask, lam))
    assert d_out <= np.linalg.norm(z1 - z2) * (1 + 1e-12)


def test_cg_solves_spd_system():
    rng = np.random.default_rng(9)
    m = rng.standard_normal((20, 20))
    a = m @ m.T + 20 * np.eye(20)
    rhs = rng.standard_normal(20)
    x, info = cg(lambda v: a @ v, rhs, tol=1e-12)
    assert info["converged"]
    assert np.allclose(x, np.linalg.solve(a, rhs), atol=1e-10)
    x2, info2 = cg(lambda v: a @ v, rhs, x0=x, tol=1e-8)
    assert info2["iterations"] == 0
