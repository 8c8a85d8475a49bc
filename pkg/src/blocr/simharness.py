"""Synthetic data generation and credible-interval coverage studies.

The generator follows the simulation design of the method: near-even random
partitions, ``eta`` drawn from the grid ``0.05, 0.10, ..., 1.5``,
``lambda_ij = 1/j``, standard-normal coefficients for all but the last
covariate, and ``beta_{p j l} = 2 * pi_jl`` with ``pi`` Bernoulli at a rate
calibrated to the requested sparsity of the last covariate's effect.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .covreg import CoefficientSet, build_delta, build_L, sensitivity_matrices
from .draws import PosteriorDraws
from .config import read_keyvalue_file
from .errors import ValidationError
from .gibbs import PriorConfig, Schedule, run_chain
from .partition import BlockPartition, validate_partition
from .sumstats import ParticipantSummary, SummaryBatch, stack_summaries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    n: int
    T: int
    M: int
    J: int
    seed: int
    sparsity: float = 0.8
    p: int = 3
    replicates: int = 1
    iters: int = 6000
    burnin: int = 1000
    stride: int = 1
    beta_p_value: float = 2.0
    null_effect: bool = False
    eta_min: float = 0.05
    eta_max: float = 1.5
    eta_step: float = 0.05
    level: float = 0.95

    REQUIRED = ("n", "T", "M", "J", "sparsity", "seed")

    def __post_init__(self):
        if self.J < 2 or self.M < self.J:
            raise ValidationError(f"need M >= J >= 2, got M={self.M}, J={self.J}")
        if self.M < 2 * self.J:
            raise ValidationError(f"M={self.M} too small for blocks of size >= 2 with J={self.J}")
        if self.n < 1 or self.T < 1 or self.p < 1 or self.replicates < 1:
            raise ValidationError("n, T, p and replicates must be positive")
        if not 0.0 < self.sparsity < 1.0:
            raise ValidationError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if not 0.0 < self.level < 1.0:
            raise ValidationError(f"level must lie in (0, 1), got {self.level}")
        Schedule(self.iters, self.burnin, self.stride, self.seed)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.iters, self.burnin, self.stride, self.seed)

    @property
    def eta_grid(self) -> np.ndarray:
        k = int(round((self.eta_max - self.eta_min) / self.eta_step))
        return self.eta_min + self.eta_step * np.arange(k + 1)

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        for key in cls.REQUIRED:
            if key not in values:
                raise ValidationError(f"missing config key: {key}")
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, raw in values.items():
            kind = types[key]
            try:
                if kind == "bool":
                    text = str(raw).strip().lower()
                    if text not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = text in ("true", "1", "yes")
                elif kind == "int":
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ValidationError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return asdict(self)


def read_sim_config(path) -> SimConfig:
    return SimConfig.from_mapping(read_keyvalue_file(path))


# -- sparsity calibration -----------------------------------------------------

def block_dependencies(J: int) -> list[tuple[int, int, tuple[int, ...]]]:
    """For every ordered block (j, l): the indicators its last-covariate effect depends on.

    Indicators are numbered in (j, l) row-major order over ``l < j``.  Block
    (j, l) with ``l <= j`` involves ``beta_{p j m}`` for ``m <= l`` (``m < j``)
    and ``beta_{p l m}`` for ``m < l``.
    """
    def pid(a, b):
        return a * (a - 1) // 2 + b

    out = []
    for j in range(J):
        for l in range(J):
            hi, lo = max(j, l), min(j, l)
            deps = {pid(hi, m) for m in range(lo + 1) if m < hi}
            deps |= {pid(lo, m) for m in range(lo)}
            out.append((j, l, tuple(sorted(deps))))
    return out


def expected_sparsity(J: int, prob: float) -> float:
    """Expected fraction of the J*J blocks with zero last-covariate effect."""
    counts = np.array([len(d) for _, _, d in block_dependencies(J)])
    return float(np.mean((1.0 - prob) ** counts))


def realized_sparsity(pi: np.ndarray, J: int) -> float:
    pi = np.asarray(pi)
    zero = [not np.any(pi[list(d)]) if d else True for _, _, d in block_dependencies(J)]
    return float(np.mean(zero))


def sparsity_calibrate(J: int, target: float) -> float:
    """Bernoulli rate for ``pi`` giving the target expected block sparsity."""
    if not 0.0 < target <= 1.0:
        raise ValidationError(f"sparsity target must lie in (0, 1], got {target}")
    if target >= 1.0:
        return 0.0
    floor = expected_sparsity(J, 1.0)
    if target < floor:
        raise ValidationError(
            f"sparsity {target} unreachable for J={J}: even with every indicator on, "
            f"{floor:.4f} of blocks have no dependence on the last covariate"
        )
    if target == floor:
        return 1.0
    return float(brentq(lambda s: expected_sparsity(J, s) - target, 0.0, 1.0, xtol=1e-14))


# -- data generation ----------------------------------------------------------

@dataclass
class SimTruth:
    X: np.ndarray            # (n, p)
    sizes: np.ndarray        # (n, J)
    eta: np.ndarray          # (n, J)
    lam: np.ndarray          # (n, J)
    coeffs: CoefficientSet
    pi: np.ndarray           # (J(J-1)/2,)
    pi_rate: float
    meta: dict = field(default_factory=dict)

    def delta(self, i: int) -> np.ndarray:
        return build_delta(build_L(self.X[i], self.coeffs), self.lam[i])

    def sensitivity(self, q: int | None = None, binary: bool = False) -> np.ndarray:
        q = self.X.shape[1] - 1 if q is None else q
        return sensitivity_matrices(self.X, self.coeffs.matrices(), self.lam, self.sizes, q, binary)

    def to_json(self) -> str:
        rec = {
            "X": self.X.tolist(), "sizes": self.sizes.tolist(), "eta": self.eta.tolist(),
            "lam": self.lam.tolist(), "beta": self.coeffs.flat.tolist(), "p": self.coeffs.p,
            "J": self.coeffs.J, "pi": [int(v) for v in self.pi], "pi_rate": self.pi_rate, "meta": self.meta,
        }
        return json.dumps(rec, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimTruth":
        rec = json.loads(text)
        return cls(
            X=np.asarray(rec["X"], float), sizes=np.asarray(rec["sizes"], np.int64),
            eta=np.asarray(rec["eta"], float), lam=np.asarray(rec["lam"], float),
            coeffs=CoefficientSet(rec["p"], rec["J"], np.asarray(rec["beta"], float)),
            pi=np.asarray(rec["pi"], np.int8), pi_rate=rec["pi_rate"], meta=rec["meta"],
        )


@dataclass
class SimDataset:
    summaries: list[ParticipantSummary]
    batch: SummaryBatch
    X: np.ndarray
    truth: SimTruth
    timeseries: list[np.ndarray] | None = None


def generate_partition(M: int, J: int, rng: np.random.Generator, max_tries: int = 10_000) -> BlockPartition:
    """Multinomial partition with equal cell probabilities, rejecting any block smaller than 2."""
    probs = np.full(J, 1.0 / J)
    for _ in range(max_tries):
        d = rng.multinomial(M, probs)
        if d.min() >= 2:
            return validate_partition(d)
    raise ValidationError(f"could not draw a partition of M={M} into J={J} blocks of size >= 2")


def generate_covariates(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Intercept, Bernoulli(0.5) middle covariates, and a Uniform(-0.5, 0.5) last covariate."""
    X = np.empty((n, p))
    X[:, 0] = 1.0
    if p >= 2:
        X[:, p - 1] = rng.uniform(-0.5, 0.5, size=n)
    if p >= 3:
        X[:, 1 : p - 1] = rng.binomial(1, 0.5, size=(n, p - 2))
    return X


def generate_truth(config: SimConfig, rng: np.random.Generator) -> SimTruth:
    n, J, p = config.n, config.J, config.p
    K = J * (J - 1) // 2
    rate = 0.0 if config.null_effect else sparsity_calibrate(J, config.sparsity)
    pi = (rng.random(K) < rate).astype(np.int8)
    coeffs = CoefficientSet(p, J)
    B = rng.standard_normal((p, J, J))
    pair = 0
    for j in range(1, J):
        for l in range(j):
            coeffs.set_pair(j, l, np.append(B[: p - 1, j, l], config.beta_p_value * pi[pair]))
            pair += 1
    X = generate_covariates(n, p, rng)
    grid = config.eta_grid
    eta = rng.choice(grid, size=(n, J), replace=True)
    lam = np.tile(1.0 / np.arange(1, J + 1), (n, 1))
    sizes = np.array([generate_partition(config.M, J, rng).d for _ in range(n)], dtype=np.int64)
    meta = {
        "eta_assignment": "iid draws with replacement from the grid",
        "eta_grid": [round(float(g), 10) for g in grid],
        "pi_rate": rate,
        "target_sparsity": config.sparsity,
        "realized_sparsity": realized_sparsity(pi, J),
    }
    return SimTruth(X, sizes, eta, lam, coeffs, pi, rate, meta)


def _block_stream(delta: np.ndarray, eta: np.ndarray, part: BlockPartition, T: int, rng: np.random.Generator):
    """Yield the T x d_j column blocks of draws from N(0, Sigma) without forming Sigma.

    ``y = nu_tilde chol(Delta) z1 + blockwise sqrt(eta_j) (z2 - mean(z2))``.
    """
    core = rng.standard_normal((T, part.J)) @ np.linalg.cholesky(delta).T
    for j in range(part.J):
        dj = part.d[j]
        z2 = rng.standard_normal((T, dj))
        z2 -= z2.mean(axis=1, keepdims=True)
        yield core[:, j : j + 1] / np.sqrt(dj) + np.sqrt(eta[j]) * z2


def simulate_participant(delta, eta, part: BlockPartition, T: int, rng: np.random.Generator,
                         keep_timeseries: bool = False):
    """Draw T observations and return (summary, Y or None), streaming block by block."""
    J = part.J
    Z = np.empty((T, J))
    trS = np.empty(J)
    oneSone = np.empty(J)
    kept = []
    for j, block in enumerate(_block_stream(delta, eta, part, T, rng)):
        rowsum = block.sum(axis=1)
        Z[:, j] = rowsum / np.sqrt(part.d[j])
        trS[j] = np.einsum("ij,ij->", block, block) / T
        oneSone[j] = rowsum @ rowsum / T
        if keep_timeseries:
            kept.append(block)
    A = Z.T @ Z / T
    summary = ParticipantSummary(part, T, trS, oneSone, 0.5 * (A + A.T))
    return summary, (np.hstack(kept) if keep_timeseries else None)


def generate_dataset(config: SimConfig, rng: np.random.SeedSequence | int | None = None,
                     keep_timeseries: bool = False, threads: int = 1) -> SimDataset:
    """Draw truth, then each participant's data from an independent substream.

    Raw series are discarded after summarizing unless ``keep_timeseries``.
    """
    ss = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(config.seed if rng is None else rng)
    truth_ss, data_ss = ss.spawn(2)
    truth = generate_truth(config, np.random.default_rng(truth_ss))
    children = data_ss.spawn(config.n)

    def one(i):
        part = validate_partition(truth.sizes[i])
        return simulate_participant(truth.delta(i), truth.eta[i], part, config.T,
                                    np.random.default_rng(children[i]), keep_timeseries)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(config.n)))
    else:
        results = [one(i) for i in range(config.n)]
    summaries = [r[0] for r in results]
    ids = [f"p{i:04d}" for i in range(config.n)]
    return SimDataset(
        summaries=summaries, batch=stack_summaries(summaries, ids), X=truth.X, truth=truth,
        timeseries=[r[1] for r in results] if keep_timeseries else None,
    )


# -- coverage -----------------------------------------------------------------

QUANTITIES = ("eta", "beta", "pi", "dsigma")


def _interval(values: np.ndarray, level: float, axis: int = 0):
    alpha = 1.0 - level
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2], axis=axis)
    return lo, hi


def _nonnull_block_mask(J: int) -> np.ndarray:
    """Lower-triangle blocks (l <= j) whose effect is not identically zero."""
    mask = np.zeros((J, J), dtype=bool)
    for j, l, deps in block_dependencies(J):
        if l <= j and deps:
            mask[j, l] = True
    return mask


def score_replicate(draws: PosteriorDraws, truth: SimTruth, level: float = 0.95, chunk: int = 8) -> dict:
    """Coverage rates of one replicate for eta, beta_{1:(p-1)}, pi and the last-covariate derivative."""
    if draws.eta.shape[1:] != truth.eta.shape or draws.beta.shape[1] != truth.coeffs.size:
        raise ValidationError("draws and truth have mismatched shapes")
    p, J = draws.p, draws.J
    lo, hi = _interval(draws.eta, level)
    eta_cov = np.mean((lo <= truth.eta) & (truth.eta <= hi))

    cs = CoefficientSet(p, J)
    idx = np.concatenate([cs._gather[q][np.tril_indices(J, -1)] for q in range(p - 1)]) if p > 1 else np.array([], int)
    if idx.size:
        lo, hi = _interval(draws.beta[:, idx], level)
        t = truth.coeffs.flat[idx]
        beta_cov = float(np.mean((lo <= t) & (t <= hi)))
    else:
        beta_cov = float("nan")

    med = np.round(np.median(draws.pi, axis=0))
    pi_cov = float(np.mean(med == truth.pi))

    mask = _nonnull_block_mask(J)
    true_sens = truth.sensitivity(p - 1)
    B = draws.beta_matrices()
    hits = 0
    total = 0
    for start in range(0, draws.n, chunk):
        sl = slice(start, start + chunk)
        sens = sensitivity_matrices(draws.X[sl], B, draws.lam[:, sl],
                                    draws.sizes[sl], p - 1)
        lo, hi = _interval(sens[..., mask], level)
        t = true_sens[sl][:, mask]
        hits += int(np.sum((lo <= t) & (t <= hi)))
        total += t.size
    return {"eta": float(eta_cov), "beta": beta_cov, "pi": pi_cov, "dsigma": hits / total}


@dataclass
class CoverageTable:
    """Mean coverage and across-replicate standard deviation per quantity."""

    rate: dict
    se: dict
    replicates: int
    per_replicate: list = field(default_factory=list)
    label: str = ""

    @classmethod
    def from_scores(cls, scores: list[dict], label: str = "") -> "CoverageTable":
        if len(scores) < 2:
            raise ValidationError("coverage needs at least 2 replicates")
        rate, se = {}, {}
        for key in QUANTITIES:
            vals = np.array([s[key] for s in scores], dtype=float)
            rate[key] = float(np.mean(vals))
            se[key] = float(np.std(vals, ddof=1))
        return cls(rate, se, len(scores), list(scores), label)

    def to_csv(self, path):
        header = "sparsity,eta,eta_se,beta,beta_se,pi,pi_se,dsigma,dsigma_se,replicates\n"
        vals = [self.label]
        for key in QUANTITIES:
            vals += [f"{self.rate[key]:.6f}", f"{self.se[key]:.6f}"]
        vals.append(str(self.replicates))
        Path(path).write_text(header + ",".join(vals) + "\n")

    def format(self) -> str:
        cells = [f"{key}={self.rate[key]:.3f} ({self.se[key]:.3f})" for key in QUANTITIES]
        return f"[{self.label}] " + "  ".join(cells)


def coverage_report(replicates, level: float = 0.95, label: str = "") -> CoverageTable:
    """Coverage table from an iterable of ``(draws, truth)`` pairs."""
    return CoverageTable.from_scores([score_replicate(d, t, level) for d, t in replicates], label)


def run_replicate(config: SimConfig, index: int, priors: PriorConfig | None = None, return_draws: bool = False):
    """Generate, fit and score replicate ``index``.  Each replicate owns a seed substream."""
    ss = np.random.SeedSequence(config.seed).spawn(config.replicates)[index]
    data_ss, chain_ss = ss.spawn(2)
    dataset = generate_dataset(config, data_ss)
    chain_seed = int(chain_ss.generate_state(1)[0])
    sched = Schedule(config.iters, config.burnin, config.stride, chain_seed)
    draws = run_chain(dataset.batch, dataset.X, priors or PriorConfig(), sched)
    scores = score_replicate(draws, dataset.truth, config.level)
    scores["replicate"] = index
    scores["realized_sparsity"] = dataset.truth.meta["realized_sparsity"]
    if return_draws:
        return scores, draws, dataset
    return scores


def _run_replicate_star(args):
    return run_replicate(*args)


def run_study(config: SimConfig, priors: PriorConfig | None = None, workers: int = 1) -> CoverageTable:
    """Coverage table over ``config.replicates`` replicates; identical for any ``workers``."""
    jobs = [(config, r, priors) for r in range(config.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            scores = list(pool.map(_run_replicate_star, jobs))
    else:
        scores = []
        for job in jobs:
            scores.append(_run_replicate_star(job))
            log.info("replicate %d: %s", job[1], scores[-1])
    return CoverageTable.from_scores(scores, label=f"{config.sparsity:g}")
