import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocr.covreg import (CoefficientSet, assemble_sigma_blocks, assemble_sigma_full, build_delta, build_L,
                          forward_substitute_U, precision_full, sensitivity_binary, sensitivity_continuous,
                          sensitivity_matrices, sigma_block)
from blocr.errors import ValidationError
from blocr.partition import validate_partition

import oracles


def coeffs_from(B):
    return CoefficientSet.from_matrices(B)


def random_coeffs(rng, p, J, scale=1.0):
    B = np.zeros((p, J, J))
    for q in range(p):
        B[q][np.tril_indices(J, -1)] = scale * rng.standard_normal(J * (J - 1) // 2)
    return B


# -- coefficient storage ------------------------------------------------------

def test_coefficient_layout_roundtrip(rng):
    p, J = 3, 5
    cs = CoefficientSet(p, J, rng.standard_normal(p * J * (J - 1) // 2))
    assert cs.size == 30
    B = cs.matrices()
    for j in range(1, J):
        blk = cs.block(j)
        assert blk.shape == (p * j,)
        for q in range(p):
            np.testing.assert_array_equal(blk[q * j : (q + 1) * j], B[q, j, :j])
        for l in range(j):
            np.testing.assert_array_equal(cs.pair(j, l), B[:, j, l])
    np.testing.assert_array_equal(CoefficientSet.from_matrices(B).flat, cs.flat)
    assert np.all(np.triu(B[0]) == 0)


def test_block_view_shares_storage():
    cs = CoefficientSet(2, 3)
    cs.block(2)[:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(cs.pair(2, 0), [1, 3])
    cs.set_pair(1, 0, [7, 8])
    assert cs.flat[0] == 7 and cs.flat[1] == 8
    with pytest.raises(ValidationError):
        cs.set_pair(1, 1, [0, 0])
    with pytest.raises(ValidationError):
        CoefficientSet(2, 3, np.zeros(5))


def test_single_block_has_no_coefficients():
    cs = CoefficientSet(3, 1)
    assert cs.size == 0
    assert cs.matrices().shape == (3, 1, 1)


# -- L, U, Delta --------------------------------------------------------------

def test_build_L_examples():
    cs = CoefficientSet(1, 2, np.array([0.5]))
    np.testing.assert_array_equal(build_L([1.0], cs), [[1, 0], [0.5, 1]])
    np.testing.assert_array_equal(build_L([1.0, 2.0, 3.0], CoefficientSet(3, 4)), np.eye(4))
    cs = CoefficientSet(2, 2)
    cs.set_pair(1, 0, [1.0, 0.25])
    assert build_L([1.0, 2.0], cs)[1, 0] == pytest.approx(1.5)
    with pytest.raises(ValidationError):
        build_L([1.0], cs)


def test_forward_substitution_examples(rng):
    np.testing.assert_allclose(forward_substitute_U(np.array([[1, 0], [0.5, 1.0]])), [[1, -0.5], [0, 1]])
    np.testing.assert_array_equal(forward_substitute_U(np.eye(4)), np.eye(4))
    L = oracles.random_unit_lower(6, rng)
    U = forward_substitute_U(L)
    np.testing.assert_allclose(U @ L.T, np.eye(6), atol=1e-12)
    np.testing.assert_allclose(U, np.linalg.inv(L).T, atol=1e-12)


def test_forward_substitution_batched(rng):
    Ls = np.array([oracles.random_unit_lower(5, rng) for _ in range(4)])
    Us = forward_substitute_U(Ls)
    for L, U in zip(Ls, Us):
        np.testing.assert_allclose(U, np.linalg.inv(L).T, atol=1e-12)


def test_build_delta_examples(rng):
    L = np.array([[1, 0], [0.5, 1.0]])
    np.testing.assert_allclose(build_delta(L, [2, 1]), [[2, 1], [1, 1.5]])
    np.testing.assert_allclose(build_delta(np.eye(3), [1, 2, 3]), np.diag([1, 2, 3]))
    delta = build_delta(oracles.random_unit_lower(5, rng), rng.uniform(0.1, 2, 5))
    assert np.linalg.eigvalsh(delta).min() > 0
    with pytest.raises(ValidationError):
        build_delta(np.eye(2), [1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_cholesky_factor_invariants(J, seed):
    rng = np.random.default_rng(seed)
    L = oracles.random_unit_lower(J, rng, 2.0)
    U = forward_substitute_U(L)
    np.testing.assert_array_equal(np.diag(U), 1)
    np.testing.assert_array_equal(np.tril(U, -1), 0)
    np.testing.assert_allclose(U @ L.T, np.eye(J), atol=1e-10)


# -- covariance assembly ------------------------------------------------------

def test_sigma_block_examples():
    part = validate_partition((2,))
    np.testing.assert_allclose(sigma_block(0, 0, part, np.array([[2.0]]), [0.5]), [[1.25, 0.75], [0.75, 1.25]])
    part = validate_partition((2, 1))
    delta = np.array([[1.0, 1.0], [1.0, 2.0]])
    blk = sigma_block(1, 0, part, delta, [1.0, 1.0])
    np.testing.assert_allclose(blk, [[1 / np.sqrt(2), 1 / np.sqrt(2)]])
    assert sigma_block(1, 1, part, delta, [1.0, 9.0])[0, 0] == pytest.approx(2.0)


def test_sigma_examples():
    part = validate_partition((2,))
    S = assemble_sigma_full(part, np.array([[2.0]]), np.array([0.5]))
    assert np.linalg.det(S) == pytest.approx(1.0, rel=1e-12)
    part = validate_partition((3, 2, 1))
    np.testing.assert_allclose(assemble_sigma_full(part, np.eye(3), np.ones(3)), np.eye(6), atol=1e-12)
    np.testing.assert_allclose(precision_full(part, np.eye(3), np.ones(3)), np.eye(6), atol=1e-12)
    part = validate_partition((2,))
    S = assemble_sigma_full(part, np.array([[2.0]]), np.array([0.5]))
    P = precision_full(part, np.array([[2.0]]), np.array([0.5]))
    np.testing.assert_allclose(S @ P, np.eye(2), atol=1e-12)


def test_random_assembly_agreement(rng):
    part = validate_partition((5, 4, 3))
    delta = build_delta(oracles.random_unit_lower(3, rng), rng.uniform(0.2, 2, 3))
    eta = rng.uniform(0.1, 1.5, 3)
    full = assemble_sigma_full(part, delta, eta)
    np.testing.assert_allclose(full, assemble_sigma_blocks(part, delta, eta), atol=1e-12)
    np.testing.assert_allclose(full, oracles.dense_sigma(part.d, delta, eta), atol=1e-12)
    assert np.abs(full @ precision_full(part, delta, eta) - np.eye(12)).max() < 1e-8


def test_dense_assembly_refused_above_threshold():
    part = validate_partition((150, 100))
    with pytest.raises(ValidationError):
        assemble_sigma_full(part, np.eye(2), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**31))
def test_sigma_positive_definite_and_identities(d, seed):
    rng = np.random.default_rng(seed)
    part = validate_partition(d)
    J = part.J
    p = 2
    B = random_coeffs(rng, p, J, 1.5)
    x = rng.uniform(-2, 2, p)
    lam = rng.uniform(0.05, 3, J)
    eta = rng.uniform(0.05, 3, J)
    delta = build_delta(build_L(x, coeffs_from(B)), lam)
    S = assemble_sigma_full(part, delta, eta)
    assert np.linalg.eigvalsh(S).min() > 0
    np.testing.assert_allclose(S, assemble_sigma_blocks(part, delta, eta), atol=1e-12 * max(1, np.abs(S).max()))
    sign, logdet = np.linalg.slogdet(S)
    expected = np.log(np.prod(lam)) + np.sum((part.sizes - 1) * np.log(eta))
    assert sign == 1
    assert logdet == pytest.approx(expected, rel=1e-8, abs=1e-8)


# -- sensitivities ------------------------------------------------------------

def test_sensitivity_null_effect(rng):
    part = validate_partition((2, 3, 2))
    cs = CoefficientSet(2, 3)
    for j in range(3):
        for l in range(j + 1):
            assert sensitivity_continuous(1, j, l, [1.0, 0.3], cs, [1, 1, 1], part) == 0
            assert sensitivity_binary(j, l, [1.0, 0.3], cs, [1, 1, 1], part) == 0


def test_sensitivity_single_coefficient():
    part = validate_partition((3, 2))
    b = 0.7
    cs = CoefficientSet(1, 2, np.array([b]))
    val = sensitivity_continuous(0, 1, 0, [0.4], cs, [1.0, 1.0], part)
    assert val == pytest.approx(b / np.sqrt(6))
    # symmetric argument order
    assert sensitivity_continuous(0, 0, 1, [0.4], cs, [1.0, 1.0], part) == pytest.approx(val)


def test_sensitivity_against_finite_differences(rng):
    for _ in range(100):
        J = int(rng.integers(2, 6))
        p = int(rng.integers(1, 4))
        d = rng.integers(1, 5, J)
        part = validate_partition(d)
        B = random_coeffs(rng, p, J)
        cs = coeffs_from(B)
        x = rng.uniform(-1, 1, p)
        lam = rng.uniform(0.2, 2, J)
        q = int(rng.integers(p))
        j = int(rng.integers(J))
        l = int(rng.integers(J))
        got = sensitivity_continuous(q, j, l, x, cs, lam, part)
        ref = oracles.fd_sensitivity(q, j, l, x, B, lam, d)
        if abs(ref) > 1e-8:
            assert abs(got - ref) / abs(ref) < 1e-6


def test_sensitivity_binary_two_point(rng):
    for _ in range(30):
        J = int(rng.integers(2, 5))
        p = int(rng.integers(1, 4))
        d = rng.integers(1, 4, J)
        part = validate_partition(d)
        B = random_coeffs(rng, p, J)
        x = rng.uniform(-1, 1, p)
        lam = rng.uniform(0.2, 2, J)
        eta = rng.uniform(0.1, 2, J)
        for j in range(J):
            for l in range(J):
                got = sensitivity_binary(j, l, x, coeffs_from(B), lam, part)
                blk = oracles.two_point_binary(p - 1, j, l, x, B, lam, d, eta)
                np.testing.assert_allclose(blk, got, atol=1e-10)


def test_sensitivity_matrices_match_scalar_versions(rng):
    n, p, J = 4, 3, 4
    X = rng.uniform(-1, 1, (n, p))
    sizes = rng.integers(1, 5, (n, J))
    B = random_coeffs(rng, p, J)
    lam = rng.uniform(0.2, 2, (n, J))
    cs = coeffs_from(B)
    for binary in (False, True):
        for q in range(p):
            mats = sensitivity_matrices(X, B, lam, sizes, q, binary)
            for i in range(n):
                part = validate_partition(sizes[i])
                for j in range(J):
                    for l in range(J):
                        if binary:
                            ref = sensitivity_binary(j, l, X[i], cs, lam[i], part, q=q)
                        else:
                            ref = sensitivity_continuous(q, j, l, X[i], cs, lam[i], part)
                        assert mats[i, j, l] == pytest.approx(ref, abs=1e-12)
    stacked = sensitivity_matrices(X, np.stack([B, 2 * B]), np.stack([lam, lam]), sizes, 1)
    np.testing.assert_allclose(stacked[0], sensitivity_matrices(X, B, lam, sizes, 1))


def test_sensitivity_bad_covariate():
    part = validate_partition((2, 2))
    with pytest.raises(ValidationError):
        sensitivity_continuous(3, 1, 0, [1.0], CoefficientSet(1, 2), [1, 1], part)
