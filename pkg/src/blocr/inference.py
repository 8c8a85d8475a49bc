"""Posterior functionals: sensitivity intervals, block tests, aggregation and fit reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covreg import build_delta, build_L, sensitivity_matrices
from .draws import ParameterSnapshot, PosteriorDraws
from .errors import NumericalError, ValidationError


def equal_tailed_interval(values, level: float = 0.95, axis: int = 0):
    """``(lower, upper)`` quantiles at ``(1-level)/2`` and ``(1+level)/2``.

    Uses linear interpolation between order statistics (type 7).
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    values = np.asarray(values, dtype=float)
    if values.size == 0 or values.shape[axis] == 0:
        raise ValidationError("no draws to summarize")
    alpha = 1.0 - level
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2], axis=axis, method="linear")
    return lo, hi


def _check_draws(draws: PosteriorDraws, q: int):
    if draws.S == 0:
        raise ValidationError("no retained draws")
    if not 0 <= q < draws.p:
        raise ValidationError(f"covariate index {q} out of range 0..{draws.p - 1}")


def sensitivity_draws(draws: PosteriorDraws, q: int, binary: bool = False,
                      participants=None, chunk: int = 256) -> np.ndarray:
    """Per-draw block sensitivities, shape (S, n', J, J).

    Evaluated on every retained draw (a functional of draws, not of
    posterior means), ``chunk`` draws at a time.
    """
    _check_draws(draws, q)
    idx = np.arange(draws.n) if participants is None else np.atleast_1d(np.asarray(participants))
    if idx.size and (idx.min() < 0 or idx.max() >= draws.n):
        raise ValidationError(f"participant index out of range 0..{draws.n - 1}")
    out = np.empty((draws.S, idx.size, draws.J, draws.J))
    X = draws.X[idx]
    sizes = draws.sizes[idx]
    for start in range(0, draws.S, chunk):
        stop = min(start + chunk, draws.S)
        B = draws.beta_matrices(start, stop)
        out[start:stop] = sensitivity_matrices(X, B, draws.lam[start:stop][:, idx], sizes, q, binary)
    return out


def credible_interval_sensitivity(draws: PosteriorDraws, participant: int, j: int, l: int, q: int,
                                  level: float = 0.95, binary: bool = False) -> tuple[float, float, float]:
    """``(lower, mean, upper)`` of the block-(j, l) sensitivity of one participant (0-based)."""
    _check_draws(draws, q)
    if not (0 <= j < draws.J and 0 <= l < draws.J):
        raise ValidationError(f"block ({j}, {l}) out of range for J={draws.J}")
    vals = sensitivity_draws(draws, q, binary, participants=[participant])[:, 0, j, l]
    lo, hi = equal_tailed_interval(vals, level)
    return float(lo), float(np.mean(vals)), float(hi)


def test_block_significance(lower, upper) -> np.ndarray:
    """True where the interval excludes zero."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return (lower > 0) | (upper < 0)


test_block_significance.__test__ = False  # not a pytest test


def significance_across_participants(flags, threshold: float = 0.95) -> set[tuple[int, int]]:
    """Blocks flagged in strictly more than ``threshold`` of participants.

    ``flags`` has shape (n, J, J); only the lower triangle (l <= j) is read.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 3 or flags.shape[0] == 0:
        return set()
    frac = flags.mean(axis=0)
    J = flags.shape[1]
    return {(j, l) for j in range(J) for l in range(j + 1) if frac[j, l] > threshold}


@dataclass
class SensitivityReport:
    """Per-participant intervals of every lower-triangle block for one covariate."""

    q: int
    level: float
    binary: bool
    lower: np.ndarray        # (n, J, J)
    mean: np.ndarray
    upper: np.ndarray
    ids: tuple = ()
    threshold: float = 0.95
    meta: dict = field(default_factory=dict)

    @property
    def significant(self) -> np.ndarray:
        return test_block_significance(self.lower, self.upper)

    @property
    def fraction_significant(self) -> np.ndarray:
        return self.significant.mean(axis=0)

    @property
    def selected(self) -> set[tuple[int, int]]:
        return significance_across_participants(self.significant, self.threshold)

    def write(self, out_dir) -> dict:
        """Write intervals.csv, aggregate.csv, heatmap.csv and significant_blocks.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n, J, _ = self.lower.shape
        sig = self.significant
        ids = self.ids or tuple(str(i) for i in range(n))
        with open(out / "intervals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["participant", "j", "l", "q", "lower", "mean", "upper", "significant"])
            for i in range(n):
                for j in range(J):
                    for l in range(j + 1):
                        w.writerow([ids[i], j + 1, l + 1, self.q + 1, repr(float(self.lower[i, j, l])),
                                    repr(float(self.mean[i, j, l])), repr(float(self.upper[i, j, l])),
                                    int(sig[i, j, l])])
        frac = self.fraction_significant
        chosen = self.selected
        with open(out / "aggregate.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "l", "fraction_significant", "selected"])
            for j in range(J):
                for l in range(j + 1):
                    w.writerow([j + 1, l + 1, repr(float(frac[j, l])), int((j, l) in chosen)])
        sym = np.tril(frac) + np.tril(frac, -1).T
        np.savetxt(out / "heatmap.csv", sym, delimiter=",", fmt="%.17g")
        summary = {
            "q": self.q + 1, "level": self.level, "binary": self.binary, "threshold": self.threshold,
            "n_participants": n, "J": J,
            "significant_blocks": [[j + 1, l + 1] for j, l in sorted(chosen)],
            "meta": self.meta,
        }
        (out / "significant_blocks.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        return summary


def sensitivity_report(draws: PosteriorDraws, q: int, level: float = 0.95, binary: bool = False,
                       threshold: float = 0.95, contrast: str = "zero_to_one",
                       participant_chunk: int = 16) -> SensitivityReport:
    """Intervals for every participant and lower-triangle block.

    With ``binary`` each participant's own remaining covariates are used and
    the covariate switches 0 -> 1.  ``contrast="one_to_zero"`` reports the
    reverse switch (the negated effect), for data coded the other way round.
    """
    _check_draws(draws, q)
    if contrast not in ("zero_to_one", "one_to_zero"):
        raise ValidationError(f"unknown contrast {contrast!r}")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    sign = -1.0 if (binary and contrast == "one_to_zero") else 1.0
    n, J = draws.n, draws.J
    lower = np.zeros((n, J, J))
    mean = np.zeros((n, J, J))
    upper = np.zeros((n, J, J))
    for start in range(0, n, participant_chunk):
        idx = np.arange(start, min(start + participant_chunk, n))
        vals = sign * sensitivity_draws(draws, q, binary, participants=idx)
        lo, hi = equal_tailed_interval(vals, level)
        lower[idx], upper[idx] = lo, hi
        mean[idx] = vals.mean(axis=0)
    meta = {"contrast": contrast if binary else "derivative", "interval": "equal-tailed, linear interpolation"}
    return SensitivityReport(q, level, binary, lower, mean, upper, tuple(draws.ids), threshold, meta)


# -- fit report ---------------------------------------------------------------

def scale_to_unit_diagonal(m: np.ndarray) -> np.ndarray:
    """``m_jl / sqrt(m_jj m_ll)``."""
    m = np.asarray(m, dtype=float)
    d = np.diagonal(m, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise NumericalError("cannot scale a matrix with a non-positive diagonal entry")
    s = np.sqrt(d)
    return m / (s[..., :, None] * s[..., None, :])


def lower_triangle(m: np.ndarray) -> np.ndarray:
    J = m.shape[-1]
    r, c = np.tril_indices(J)
    return m[..., r, c]


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if den == 0:
        return float("nan")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


@dataclass
class FitReport:
    """Scaled A and scaled MAP Delta for every participant plus their agreement."""

    ids: tuple
    scaled_A: np.ndarray       # (n, J, J)
    scaled_delta: np.ndarray   # (n, J, J)
    correlation: np.ndarray    # (n,)
    max_abs_deviation: np.ndarray

    def write(self, out_dir, permuted_correlation=None, low_fit: float = 0.9):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "fit_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["participant", "correlation", "max_abs_deviation", "permuted_correlation", "low_fit"])
            for i, pid in enumerate(self.ids):
                perm = "" if permuted_correlation is None else repr(float(permuted_correlation[i]))
                w.writerow([pid, repr(float(self.correlation[i])), repr(float(self.max_abs_deviation[i])),
                            perm, int(not self.correlation[i] >= low_fit)])
        J = self.scaled_A.shape[-1]
        r, c = np.tril_indices(J)
        with open(out / "fit_matrices.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["participant", "j", "l", "scaled_A", "scaled_delta"])
            for i, pid in enumerate(self.ids):
                for j, l in zip(r, c):
                    w.writerow([pid, j + 1, l + 1, repr(float(self.scaled_A[i, j, l])),
                                repr(float(self.scaled_delta[i, j, l]))])


def compare_scaled(delta: np.ndarray, A: np.ndarray) -> tuple[float, float]:
    """Pearson correlation and max |difference| of two matrices after unit-diagonal scaling."""
    sd = lower_triangle(scale_to_unit_diagonal(delta))
    sa = lower_triangle(scale_to_unit_diagonal(A))
    return _pearson(sd, sa), float(np.max(np.abs(sd - sa)))


def delta_vs_A_report(estimate: ParameterSnapshot | PosteriorDraws, X, A, ids=None) -> FitReport:
    """Compare each participant's MAP ``Delta`` with its observed ``A``.

    ``estimate`` is a snapshot (e.g. the MAP) or draws, in which case the MAP
    draw is used.  ``A`` has shape (n, J, J).
    """
    if isinstance(estimate, PosteriorDraws):
        from .gibbs import map_estimate
        estimate = map_estimate(estimate)
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    n = X.shape[0]
    if A.shape[0] != n or estimate.lam.shape[0] != n:
        raise ValidationError("participant counts of estimate, covariates and summaries disagree")
    deltas = np.array([build_delta(build_L(X[i], estimate.coeffs), estimate.lam[i]) for i in range(n)])
    sA = scale_to_unit_diagonal(A)
    sD = scale_to_unit_diagonal(deltas)
    corr = np.empty(n)
    dev = np.empty(n)
    for i in range(n):
        corr[i], dev[i] = compare_scaled(deltas[i], A[i])
    ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(n))
    return FitReport(ids, sA, sD, corr, dev)


def permuted_correlation(report: FitReport, rng: np.random.Generator) -> np.ndarray:
    """Control: correlation after a random simultaneous row/column permutation of scaled Delta."""
    n, J, _ = report.scaled_delta.shape
    out = np.empty(n)
    for i in range(n):
        perm = rng.permutation(J)
        shuffled = report.scaled_delta[i][np.ix_(perm, perm)]
        out[i] = _pearson(lower_triangle(shuffled), lower_triangle(report.scaled_A[i]))
    return out
