"""Gibbs sampler over (eta, lambda, beta, pi) driven by summary statistics.

One sweep updates, in order: all ``eta``, all ``lambda``, ``beta_j`` for
``j = 2..J`` (each followed by a forward-substitution refresh of the cached
``U`` columns it affects), then every spike-and-slab indicator ``pi``.
The last covariate carries the spike-and-slab prior.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln, xlogy

from .covreg import CoefficientSet, block_offset, build_L_batch, forward_substitute_U, refresh_U_columns
from .draws import ParameterSnapshot, PosteriorDraws
from .errors import NumericalError, ValidationError
from .sumstats import SummaryBatch, quadratic_forms

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters.  Defaults are the values used in the simulation study."""

    a0: float = 2.01
    b0: float = 1.01
    a1: float = 2.01
    b1: float = 1.01
    q1: float = 0.5
    tau0sq: float = 0.01
    tau1sq: float = 1.0
    tau2sq: float = 1.0

    def __post_init__(self):
        for name in ("a0", "b0", "a1", "b1", "tau0sq", "tau1sq", "tau2sq"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"prior {name} must be positive, got {v!r}")
        if not 0.0 <= self.q1 <= 1.0:
            raise ValidationError(f"prior q1 must lie in [0, 1], got {self.q1!r}")
        if not self.tau1sq > self.tau0sq:
            raise ValidationError("slab variance tau1sq must exceed spike variance tau0sq")

    @classmethod
    def from_mapping(cls, values: dict) -> "PriorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown prior keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**{k: float(v) for k, v in values.items()})
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad prior value: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Schedule:
    iters: int = 6000
    burnin: int = 1000
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.burnin < 0 or self.stride < 1:
            raise ValidationError(f"invalid schedule {self}")
        if self.burnin >= self.iters:
            raise ValidationError(f"burn-in ({self.burnin}) must be smaller than iters ({self.iters})")

    @property
    def n_draws(self) -> int:
        return (self.iters - self.burnin) // self.stride


class ChainRNG:
    """Independent Philox substreams per parameter block, keyed by (seed, chain)."""

    BLOCKS = ("init", "eta", "lam", "beta", "pi")

    def __init__(self, seed: int, chain: int = 0):
        root = np.random.SeedSequence(int(seed), spawn_key=(int(chain),))
        children = root.spawn(len(self.BLOCKS))
        for name, ss in zip(self.BLOCKS, children):
            setattr(self, name, np.random.Generator(np.random.Philox(ss)))


@dataclass
class ChainState:
    eta: np.ndarray              # (n, J)
    lam: np.ndarray              # (n, J)
    coeffs: CoefficientSet
    pi: np.ndarray               # (J(J-1)/2,) int8
    L: np.ndarray                # (n, J, J)
    U: np.ndarray                # (n, J, J)
    iteration: int = 0

    @classmethod
    def initial(cls, n: int, J: int, X: np.ndarray) -> "ChainState":
        coeffs = CoefficientSet(X.shape[1], J)
        L = build_L_batch(X, coeffs.matrices())
        return cls(
            eta=np.ones((n, J)), lam=np.ones((n, J)), coeffs=coeffs,
            pi=np.zeros(J * (J - 1) // 2, dtype=np.int8), L=L, U=forward_substitute_U(L),
        )

    @classmethod
    def from_snapshot(cls, snap: ParameterSnapshot, X: np.ndarray) -> "ChainState":
        L = build_L_batch(X, snap.coeffs.matrices())
        return cls(
            eta=np.array(snap.eta, dtype=float), lam=np.array(snap.lam, dtype=float),
            coeffs=snap.coeffs.copy(), pi=np.array(snap.pi, dtype=np.int8),
            L=L, U=forward_substitute_U(L),
        )

    def snapshot(self, logpost: float = float("nan")) -> ParameterSnapshot:
        return ParameterSnapshot(self.eta.copy(), self.lam.copy(), self.coeffs.copy(),
                                 self.pi.copy(), logpost, self.iteration)


def _spike_index(p: int, J: int) -> np.ndarray:
    """Flat positions of ``beta_{p j l}`` in (j, l) row-major pair order."""
    return np.array(
        [block_offset(j, p) + (p - 1) * j + l for j in range(1, J) for l in range(j)],
        dtype=np.int64,
    )


def _pair_start(j: int) -> int:
    return j * (j - 1) // 2


# -- conditional updates ------------------------------------------------------

def eta_conditional(data: SummaryBatch, priors: PriorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-gamma (shape, scale) of every ``eta_ij`` given the data."""
    shape = priors.a0 + 0.5 * data.T[:, None] * (data.sizes - 1)
    scale = priors.b0 + 0.5 * data.T[:, None] * data.resid
    return shape, scale


def lambda_conditional(state: ChainState, data: SummaryBatch, priors: PriorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-gamma (shape, scale) of every ``lambda_ij`` given ``U`` and the data."""
    qf = quadratic_forms(data.A, state.U)
    tol = 1e-10 * np.maximum(1.0, np.abs(data.A).max(axis=(1, 2)))[:, None]
    if np.any(qf < -tol):
        i, j = np.argwhere(qf < -tol)[0]
        raise NumericalError(f"negative quadratic form {qf[i, j]:.3e} for participant {i}, block {j + 1}")
    qf = np.maximum(qf, 0.0)
    shape = np.broadcast_to(priors.a1 + 0.5 * data.T[:, None], qf.shape)
    scale = priors.b1 + 0.5 * data.T[:, None] * qf
    return shape, scale


def sample_eta(state: ChainState, data: SummaryBatch, priors: PriorConfig, rng: np.random.Generator) -> np.ndarray:
    shape, scale = eta_conditional(data, priors)
    state.eta = scale / rng.standard_gamma(shape)
    return state.eta


def sample_lambda(state: ChainState, data: SummaryBatch, priors: PriorConfig, rng: np.random.Generator) -> np.ndarray:
    shape, scale = lambda_conditional(state, data, priors)
    state.lam = scale / rng.standard_gamma(shape)
    return state.lam


def prior_precision_diag(j: int, p: int, pi_j: np.ndarray, priors: PriorConfig) -> np.ndarray:
    """Diagonal of the prior precision of ``beta_j`` (length ``p*j``)."""
    slab = np.where(np.asarray(pi_j) == 1, 1.0 / priors.tau1sq, 1.0 / priors.tau0sq)
    return np.concatenate([np.full((p - 1) * j, 1.0 / priors.tau2sq), slab])


def beta_conditional(j: int, state: ChainState, data: SummaryBatch, X: np.ndarray,
                     priors: PriorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Linear term ``mu_j`` and precision ``C_j`` of the Gaussian conditional of ``beta_j``.

    Only likelihood term ``j`` is used; ``U[:, :j, :j]`` must be current.
    """
    p = X.shape[1]
    k = j
    n = data.n
    Uk = state.U[:, :k, :k]
    Ut = np.swapaxes(Uk, 1, 2)
    h = np.einsum("iba,ib->ia", Uk, data.A[:, :k, j])           # U^T A[:k, j]
    G = Ut @ data.A[:, :k, :k] @ Uk                              # U^T A U
    w = data.T / state.lam[:, j]
    Xw = X * w[:, None]
    mu = (Xw.T @ h).ravel()
    outer = (Xw[:, :, None] * X[:, None, :]).reshape(n, p * p)
    C = (outer.T @ G.reshape(n, k * k)).reshape(p, p, k, k).transpose(0, 2, 1, 3).reshape(p * k, p * k)
    pi_j = state.pi[_pair_start(j) : _pair_start(j) + j]
    C[np.diag_indices_from(C)] += prior_precision_diag(j, p, pi_j, priors)
    return mu, C


def inverse_sqrt_psd(C: np.ndarray) -> np.ndarray:
    """Symmetric ``C^{-1/2}`` by eigendecomposition, flooring tiny eigenvalues."""
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    top = evals.max()
    if not np.isfinite(top) or top <= 0 or evals.min() < -1e-8 * top:
        raise NumericalError(f"conditional precision is not positive definite (eigenvalues {evals.min():.3e}..{top:.3e})")
    evals = np.maximum(evals, 1e-12 * top)
    return (evecs / np.sqrt(evals)) @ evecs.T


def sample_beta_block(j: int, state: ChainState, data: SummaryBatch, X: np.ndarray,
                      priors: PriorConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``beta_j = C^{-1/2}(C^{-1/2} mu + z)`` and refresh ``L`` row ``j`` and ``U`` columns ``j..J``."""
    if not 1 <= j < state.coeffs.J:
        raise ValidationError(f"beta block {j} out of range 1..{state.coeffs.J - 1}")
    mu, C = beta_conditional(j, state, data, X, priors)
    R = inverse_sqrt_psd(C)
    z = rng.standard_normal(mu.shape[0])
    beta_j = R @ (R @ mu + z)
    state.coeffs.block(j)[:] = beta_j
    state.L[:, j, :j] = X @ beta_j.reshape(X.shape[1], j)
    refresh_U_columns(state.U, state.L, j)
    return beta_j


def inclusion_probability(beta_p: np.ndarray, priors: PriorConfig) -> np.ndarray:
    """Posterior probability that each indicator is 1 given its coefficient."""
    b = np.asarray(beta_p, dtype=float)
    if priors.q1 >= 1.0:
        return np.ones_like(b)
    if priors.q1 <= 0.0:
        return np.zeros_like(b)
    lw1 = np.log(priors.q1) - 0.5 * np.log(priors.tau1sq) - 0.5 * b * b / priors.tau1sq
    lw0 = np.log1p(-priors.q1) - 0.5 * np.log(priors.tau0sq) - 0.5 * b * b / priors.tau0sq
    return 1.0 / (1.0 + np.exp(lw0 - lw1))


def sample_pi(state: ChainState, priors: PriorConfig, rng: np.random.Generator) -> np.ndarray:
    coeffs = state.coeffs
    idx = _spike_index(coeffs.p, coeffs.J)
    prob = inclusion_probability(coeffs.flat[idx], priors)
    state.pi = (rng.random(prob.shape[0]) < prob).astype(np.int8)
    return state.pi


# -- joint density ------------------------------------------------------------

def _log_invgamma(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def log_prior(state: ChainState, priors: PriorConfig) -> float:
    coeffs = state.coeffs
    p, J = coeffs.p, coeffs.J
    var = np.full(coeffs.size, priors.tau2sq)
    idx = _spike_index(p, J)
    var[idx] = np.where(state.pi == 1, priors.tau1sq, priors.tau0sq)
    lp_beta = -0.5 * np.sum(LOG_2PI + np.log(var) + coeffs.flat ** 2 / var)
    pi = state.pi.astype(float)
    lp_pi = np.sum(xlogy(pi, priors.q1) + xlogy(1.0 - pi, 1.0 - priors.q1))
    return float(
        np.sum(_log_invgamma(state.eta, priors.a0, priors.b0))
        + np.sum(_log_invgamma(state.lam, priors.a1, priors.b1))
        + lp_beta + lp_pi
    )


def log_posterior(state: ChainState, data: SummaryBatch, priors: PriorConfig) -> float:
    """Unnormalized joint log posterior (normalized likelihood plus log priors)."""
    return float(np.sum(data.log_likelihood(state.eta, state.lam, state.U))) + log_prior(state, priors)


def sweep(state: ChainState, data: SummaryBatch, X: np.ndarray, priors: PriorConfig, rng: ChainRNG):
    sample_eta(state, data, priors, rng.eta)
    sample_lambda(state, data, priors, rng.lam)
    for j in range(1, state.coeffs.J):
        sample_beta_block(j, state, data, X, priors, rng.beta)
    sample_pi(state, priors, rng.pi)
    state.iteration += 1


def _check_inputs(data: SummaryBatch, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != data.n:
        raise ValidationError(f"covariate matrix has shape {X.shape}; expected {data.n} rows (one per participant)")
    if X.shape[1] < 1:
        raise ValidationError("need at least one covariate")
    if not np.all(np.isfinite(X)):
        raise ValidationError("covariates contain non-finite values")
    return X


def run_chain(data: SummaryBatch, X, priors: PriorConfig | None = None, schedule: Schedule | None = None, *,
              chain: int = 0, init: ParameterSnapshot | None = None,
              callback: Callable[[int, float], None] | None = None, check_u: bool = False) -> PosteriorDraws:
    """Run one chain and return the retained draws.

    Deterministic given ``schedule.seed`` and ``chain``.  ``callback`` receives
    ``(iteration, log_posterior)`` after every sweep.  With ``check_u`` the
    cached ``U`` is recomputed from scratch each sweep and compared.
    """
    priors = priors or PriorConfig()
    schedule = schedule or Schedule()
    X = _check_inputs(data, X)
    n, J = data.n, data.J
    rng = ChainRNG(schedule.seed, chain)
    state = ChainState.from_snapshot(init, X) if init is not None else ChainState.initial(n, J, X)

    S = schedule.n_draws
    K = J * (J - 1) // 2
    out_eta = np.empty((S, n, J))
    out_lam = np.empty((S, n, J))
    out_beta = np.empty((S, state.coeffs.size))
    out_pi = np.empty((S, K), dtype=np.int8)
    out_lp = np.empty(S)
    out_it = np.empty(S, dtype=np.int64)
    s = 0
    for t in range(1, schedule.iters + 1):
        sweep(state, data, X, priors, rng)
        if check_u:
            fresh = forward_substitute_U(build_L_batch(X, state.coeffs.matrices()))
            drift = np.abs(fresh - state.U).max()
            if drift > 1e-8:
                raise NumericalError(f"cached U drifted by {drift:.3e} at iteration {t}")
        lp = log_posterior(state, data, priors)
        if not np.isfinite(lp):
            raise NumericalError(
                f"non-finite log posterior at iteration {t}: "
                f"min eta={state.eta.min():.3e}, min lambda={state.lam.min():.3e}, "
                f"max |beta|={np.abs(state.coeffs.flat).max(initial=0.0):.3e}"
            )
        if callback is not None:
            callback(t, lp)
        if t > schedule.burnin and (t - schedule.burnin) % schedule.stride == 0:
            out_eta[s] = state.eta
            out_lam[s] = state.lam
            out_beta[s] = state.coeffs.flat
            out_pi[s] = state.pi
            out_lp[s] = lp
            out_it[s] = t
            s += 1

    meta = {
        "seed": int(schedule.seed), "chain": int(chain), "iters": schedule.iters,
        "burnin": schedule.burnin, "stride": schedule.stride,
        "priors": asdict(priors), "prior_hash": priors.digest(),
    }
    return PosteriorDraws(
        eta=out_eta, lam=out_lam, beta=out_beta, pi=out_pi, logpost=out_lp, iteration=out_it,
        X=X.copy(), sizes=data.sizes.copy(), T=data.T.copy(), ids=tuple(data.ids), meta=meta,
    )


def map_estimate(draws: PosteriorDraws) -> ParameterSnapshot:
    """The retained draw with the highest joint log posterior."""
    if draws.S == 0:
        raise ValidationError("no retained draws")
    return draws.snapshot(int(np.argmax(draws.logpost)))
