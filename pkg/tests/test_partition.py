import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocr.errors import FormatError, ValidationError
from blocr.partition import (BlockPartition, build_basis, helmert_complement, read_partition_file,
                             validate_partition, write_partition_file)

sizes_strategy = st.lists(st.integers(1, 8), min_size=1, max_size=6).filter(lambda d: sum(d) <= 50)


def test_validate_partition_roi_sizes():
    part = validate_partition((259, 129, 216, 178, 85))
    assert part.M == 867
    assert part.J == 5
    assert list(part.offsets) == [0, 259, 388, 604, 782]


def test_single_block():
    part = validate_partition([1])
    assert (part.J, part.M) == (1, 1)


@pytest.mark.parametrize("bad", [(0, 2), (), (2, -1), (1.5, 2)])
def test_invalid_sizes_rejected(bad):
    with pytest.raises(ValidationError):
        validate_partition(bad)


def test_helmert_small_cases():
    assert helmert_complement(1).shape == (1, 0)
    v = helmert_complement(2)
    np.testing.assert_allclose(v[:, 0], [1 / np.sqrt(2), -1 / np.sqrt(2)], atol=1e-15)
    with pytest.raises(ValidationError):
        helmert_complement(0)


def test_helmert_classical_rows():
    V = helmert_complement(4)
    k = 3
    col = V[:, k - 2]
    expected = np.r_[np.full(k - 1, 1 / np.sqrt(k * (k - 1))), -(k - 1) / np.sqrt(k * (k - 1)), 0.0]
    np.testing.assert_allclose(col, expected, atol=1e-15)


def test_helmert_five():
    V = helmert_complement(5)
    assert V.shape == (5, 4)
    np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(np.ones(5) @ V, 0, atol=1e-12)


def test_basis_examples():
    b = build_basis(validate_partition((2, 1)))
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(b.nu_tilde, [[s, 0], [s, 0], [0, 1]], atol=1e-15)
    b = build_basis(validate_partition((1, 1, 1)))
    np.testing.assert_array_equal(b.nu_tilde, np.eye(3))
    assert b.nu_perp.shape == (3, 0)
    Q = build_basis(validate_partition((3, 2))).materialize_q()
    assert Q.shape == (5, 5)
    np.testing.assert_allclose(Q.T @ Q, np.eye(5), atol=1e-10)


def test_dense_basis_refused_above_threshold():
    b = build_basis(validate_partition((150, 100)))
    assert b.nu_tilde.shape == (250, 2)
    with pytest.raises(ValidationError):
        b.nu_perp


@settings(max_examples=60, deadline=None)
@given(sizes_strategy)
def test_q_orthogonal(d):
    part = validate_partition(d)
    b = build_basis(part)
    Q = b.materialize_q()
    M, J = part.M, part.J
    np.testing.assert_allclose(Q.T @ Q, np.eye(M), atol=1e-10)
    np.testing.assert_allclose(Q @ Q.T, np.eye(M), atol=1e-10)
    np.testing.assert_allclose(b.nu_tilde.T @ b.nu_tilde, np.eye(J), atol=1e-12)
    np.testing.assert_allclose(b.nu_tilde.T @ b.nu_perp, 0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(sizes_strategy)
def test_offsets_and_projectors(d):
    part = validate_partition(d)
    assert part.offsets[0] == 0
    assert np.all(np.diff(part.offsets) > 0) or part.J == 1
    assert part.sizes.sum() == part.M
    for dj in set(d):
        V = helmert_complement(dj)
        np.testing.assert_allclose(V @ V.T, np.eye(dj) - 1.0 / dj, atol=1e-12)


def test_partition_file_roundtrip(tmp_path):
    part = validate_partition((3, 4))
    path = tmp_path / "p.json"
    write_partition_file(path, part, "s01", T=20)
    back, rec = read_partition_file(path)
    assert back == part
    assert rec["participant_id"] == "s01" and rec["T"] == 20


def test_partition_file_errors(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"J": 3, "d": [1, 2]}))
    with pytest.raises(ValidationError):
        read_partition_file(path)
    path.write_text("not json")
    with pytest.raises(FormatError):
        read_partition_file(path)


def test_partition_is_hashable_value():
    assert BlockPartition((2, 3)) == validate_partition([2, 3])
