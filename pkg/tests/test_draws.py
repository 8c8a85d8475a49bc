import csv

import numpy as np
import pytest

from blocr.draws import (draws_from_bytes, draws_to_bytes, export_beta_pi_csv, read_draws, write_draws)
from blocr.errors import FormatError, ValidationError
from blocr.gibbs import PriorConfig, Schedule, run_chain
from blocr.partition import validate_partition
from blocr.sumstats import compute_summary, stack_summaries


@pytest.fixture
def draws(rng):
    part = validate_partition([2, 3, 2])
    batch = stack_summaries([compute_summary(rng.standard_normal((9, 7)), part) for _ in range(3)])
    X = np.column_stack([np.ones(3), [0.2, -0.1, 0.4]])
    return run_chain(batch, X, PriorConfig(), Schedule(8, 3, seed=4))


def test_roundtrip(tmp_path, draws):
    write_draws(tmp_path / "d.bdrw", draws)
    back = read_draws(tmp_path / "d.bdrw")
    for name in ("eta", "lam", "beta", "pi", "logpost", "iteration", "X", "sizes", "T"):
        np.testing.assert_array_equal(getattr(back, name), getattr(draws, name))
    assert back.ids == draws.ids and back.meta == draws.meta
    assert draws_to_bytes(back) == draws_to_bytes(draws)


def test_corruption(draws, tmp_path):
    buf = draws_to_bytes(draws)
    with pytest.raises(FormatError):
        draws_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        draws_from_bytes(buf[:-8])
    with pytest.raises(ValidationError):
        read_draws(tmp_path / "missing.bdrw")


def test_beta_matrices_and_snapshot(draws):
    B = draws.beta_matrices()
    assert B.shape == (draws.S, 2, 3, 3)
    for s in range(draws.S):
        np.testing.assert_array_equal(B[s], draws.coeffs(s).matrices())
    snap = draws.snapshot(1)
    assert snap.iteration == draws.iteration[1]


def test_csv_export(tmp_path, draws):
    export_beta_pi_csv(tmp_path / "b.csv", draws)
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    header = rows[0]
    assert header[0] == "iteration"
    assert "beta[2][3][1]" in header and "pi[3][2]" in header
    assert len(rows) == draws.S + 1
    col = header.index("beta[2][3][1]")
    B = draws.beta_matrices()
    assert float(rows[1][col]) == B[0, 1, 2, 0]
