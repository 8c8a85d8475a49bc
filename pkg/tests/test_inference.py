import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocr.covreg import CoefficientSet, build_delta, build_L, sensitivity_continuous
from blocr.draws import ParameterSnapshot, PosteriorDraws
from blocr.errors import NumericalError, ValidationError
from blocr.inference import (compare_scaled, credible_interval_sensitivity, delta_vs_A_report,
                             equal_tailed_interval, permuted_correlation, scale_to_unit_diagonal,
                             sensitivity_draws, sensitivity_report, significance_across_participants,
                             test_block_significance as block_significance)
from blocr.partition import validate_partition


def synthetic_draws(rng, S=200, n=4, J=3, p=2, beta_scale=1.0):
    K = J * (J - 1) // 2
    return PosteriorDraws(
        eta=rng.uniform(0.5, 1.5, (S, n, J)), lam=rng.uniform(0.5, 1.5, (S, n, J)),
        beta=beta_scale * rng.standard_normal((S, p * K)), pi=rng.integers(0, 2, (S, K)).astype(np.int8),
        logpost=rng.standard_normal(S), iteration=np.arange(1, S + 1),
        X=np.column_stack([np.ones(n), rng.uniform(-0.5, 0.5, (n, p - 1))]),
        sizes=rng.integers(1, 5, (n, J)), T=np.full(n, 10.0), ids=tuple(f"s{i}" for i in range(n)),
    )


def test_percentile_rule():
    lo, hi = equal_tailed_interval(np.arange(1, 101), 0.95)
    assert (lo, hi) == pytest.approx((3.475, 97.525))
    with pytest.raises(ValidationError):
        equal_tailed_interval([], 0.95)
    with pytest.raises(ValidationError):
        equal_tailed_interval([1, 2], 1.0)


def test_zero_functional(rng):
    draws = synthetic_draws(rng, beta_scale=0.0)
    assert credible_interval_sensitivity(draws, 0, 2, 1, 1) == (0.0, 0.0, 0.0)
    rep = sensitivity_report(draws, 1)
    assert not rep.significant.any()
    assert rep.selected == set()


def test_block_significance_examples():
    np.testing.assert_array_equal(block_significance([-0.1, 0.05, -0.3], [0.2, 0.3, -0.01]), [False, True, True])


def test_across_participants_threshold():
    J = 2
    flags = np.zeros((100, J, J), dtype=bool)
    flags[:96, 1, 0] = True
    flags[:95, 1, 1] = True
    assert significance_across_participants(flags, 0.95) == {(1, 0)}
    assert significance_across_participants(np.zeros((0, J, J)), 0.95) == set()


def test_interval_matches_scalar_functional(rng):
    draws = synthetic_draws(rng, S=50)
    vals = sensitivity_draws(draws, 1)
    for s in (0, 17, 49):
        part = validate_partition(draws.sizes[2])
        ref = sensitivity_continuous(1, 2, 0, draws.X[2], draws.coeffs(s), draws.lam[s, 2], part)
        assert vals[s, 2, 2, 0] == pytest.approx(ref, abs=1e-12)
    lo, mean, hi = credible_interval_sensitivity(draws, 2, 2, 0, 1, 0.9)
    assert mean == pytest.approx(vals[:, 2, 2, 0].mean())
    assert lo == pytest.approx(np.quantile(vals[:, 2, 2, 0], 0.05))
    with pytest.raises(ValidationError):
        credible_interval_sensitivity(draws, 0, 0, 0, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 0.9), st.floats(0.05, 0.09))
def test_interval_nesting(seed, level, gap):
    rng = np.random.default_rng(seed)
    draws = synthetic_draws(rng, S=60, n=2)
    narrow = sensitivity_report(draws, 1, level=level)
    wide = sensitivity_report(draws, 1, level=min(level + gap, 0.99))
    assert np.all(wide.lower <= narrow.lower + 1e-12)
    assert np.all(wide.upper >= narrow.upper - 1e-12)


def test_binary_contrast_flips_sign(rng):
    draws = synthetic_draws(rng, p=3)
    fwd = sensitivity_report(draws, 2, binary=True)
    rev = sensitivity_report(draws, 2, binary=True, contrast="one_to_zero")
    np.testing.assert_allclose(rev.mean, -fwd.mean)
    np.testing.assert_allclose(rev.lower, -fwd.upper)
    assert rev.meta["contrast"] == "one_to_zero"


def test_report_files(tmp_path, rng):
    draws = synthetic_draws(rng, beta_scale=3.0)
    rep = sensitivity_report(draws, 1, level=0.5, threshold=0.5)
    summary = rep.write(tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "intervals.csv")))
    assert len(rows) == draws.n * 6
    assert set(rows[0]) == {"participant", "j", "l", "q", "lower", "mean", "upper", "significant"}
    agg = list(csv.DictReader(open(tmp_path / "aggregate.csv")))
    assert len(agg) == 6
    heat = np.loadtxt(tmp_path / "heatmap.csv", delimiter=",")
    np.testing.assert_allclose(heat, heat.T)
    assert json.loads((tmp_path / "significant_blocks.json").read_text()) == summary


def test_scaling_and_fit(rng):
    A = np.array([[4.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(scale_to_unit_diagonal(A), [[1, 0.5], [0.5, 1]])
    with pytest.raises(NumericalError):
        scale_to_unit_diagonal(np.array([[0.0, 0], [0, 1]]))
    M = np.cov(rng.standard_normal((4, 30)))
    assert compare_scaled(M, M) == pytest.approx((1.0, 0.0))
    assert compare_scaled(2 * M, M) == pytest.approx((1.0, 0.0), abs=1e-12)


def test_delta_vs_A_identity_and_scale_invariance(rng):
    n, J, p = 3, 4, 2
    X = np.column_stack([np.ones(n), rng.uniform(-0.5, 0.5, n)])
    coeffs = CoefficientSet(p, J, rng.standard_normal(p * J * (J - 1) // 2))
    lam = rng.uniform(0.5, 2, (n, J))
    A = np.array([build_delta(build_L(X[i], coeffs), lam[i]) for i in range(n)])
    snap = ParameterSnapshot(np.ones((n, J)), lam, coeffs, np.zeros(6, np.int8))
    rep = delta_vs_A_report(snap, X, A)
    np.testing.assert_allclose(rep.correlation, 1.0)
    np.testing.assert_allclose(rep.max_abs_deviation, 0.0, atol=1e-12)
    rep2 = delta_vs_A_report(snap, X, 5 * A)
    np.testing.assert_allclose(rep2.correlation, rep.correlation)
    perm = permuted_correlation(rep, np.random.default_rng(0))
    assert np.all(perm <= 1.0) and np.all(perm >= -1.0)


def _fit_simulated(seed, null_effect):
    from blocr.gibbs import Schedule, run_chain
    from blocr.simharness import SimConfig, generate_dataset
    cfg = SimConfig(n=30, T=100, M=40, J=4, seed=seed, sparsity=0.65, null_effect=null_effect)
    ds = generate_dataset(cfg)
    draws = run_chain(ds.batch, ds.X, schedule=Schedule(1200, 300, seed=seed))
    return ds.truth, sensitivity_report(draws, 2)


@pytest.mark.slow
def test_power_for_known_effects():
    hits = total = 0
    for seed in (1, 2, 3):
        truth, rep = _fit_simulated(seed, False)
        true = truth.sensitivity()
        strong = np.abs(true) > 0.1
        strong &= np.tril(np.ones_like(strong[0], dtype=bool))
        hits += int(rep.significant[strong].sum())
        total += int(strong.sum())
    assert total > 0
    assert hits / total >= 0.9


@pytest.mark.slow
def test_null_effect_type_one_rate():
    fracs = []
    for seed in (4, 5, 6):
        _, rep = _fit_simulated(seed, True)
        J = rep.lower.shape[1]
        fracs.append(rep.fraction_significant[np.tril_indices(J)])
    fracs = np.array(fracs)
    # per-block fraction of participants flagged, with Monte-Carlo slack for 30 participants x 3 runs
    assert fracs.mean(axis=0).max() < 0.05 + 0.05
