"""Covariate-dependent modified Cholesky parameterization of the block core.

For a participant with covariates ``x`` the core matrix is
``Delta = L diag(lambda) L^T`` where ``L`` is unit lower triangular with
``L[j, l] = x @ beta[j, l]`` for ``l < j``.  The full covariance adds
``eta_j`` times the within-block centering projector on each diagonal block.

Block indices are 0-based throughout the API.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NumericalError, ValidationError
from .partition import ORACLE_MAX_DIM, BlockPartition, build_basis


def _tril_pairs(J: int) -> list[tuple[int, int]]:
    """(j, l) pairs with l < j in row-major order."""
    return [(j, l) for j in range(1, J) for l in range(j)]


def block_offset(j: int, p: int) -> int:
    """Start of ``beta_j`` in the flat stacked coefficient vector."""
    return p * (j * (j - 1) // 2)


class CoefficientSet:
    """All regression coefficients, stored flat in stacked order.

    The flat vector is ``(beta_2, ..., beta_J)`` (1-based block labels) with
    ``beta_j = (beta[1, j, 1:j-1], ..., beta[p, j, 1:j-1])``, i.e. covariate
    major within each block row.  ``block(j)`` returns a writable view into
    that storage; ``pair(j, l)`` returns the length-``p`` vector ``beta_jl``.
    """

    def __init__(self, p: int, J: int, flat: np.ndarray | None = None):
        if p < 1 or J < 1:
            raise ValidationError(f"need p >= 1 and J >= 1, got p={p}, J={J}")
        self.p = int(p)
        self.J = int(J)
        size = self.p * self.J * (self.J - 1) // 2
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (size,):
            raise ValidationError(f"expected {size} coefficients for p={p}, J={J}, got shape {flat.shape}")
        self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.size

    def block(self, j: int) -> np.ndarray:
        """View of ``beta_j`` (length ``p*j``) for 0-based row ``j >= 1``."""
        if not 1 <= j < self.J:
            raise ValidationError(f"coefficient block {j} out of range 1..{self.J - 1}")
        start = block_offset(j, self.p)
        return self.flat[start : start + self.p * j]

    def block_matrix(self, j: int) -> np.ndarray:
        """``beta_j`` reshaped to ``(p, j)``; entry ``[q, l]`` is ``beta_{q j l}``."""
        return self.block(j).reshape(self.p, j)

    def pair(self, j: int, l: int) -> np.ndarray:
        """``beta_jl`` in R^p (a copy).  Zero on and above the diagonal."""
        j, l = int(j), int(l)
        if not (0 <= j < self.J and 0 <= l < self.J):
            raise ValidationError(f"block pair ({j}, {l}) out of range for J={self.J}")
        if l >= j:
            return np.zeros(self.p)
        return self.block_matrix(j)[:, l].copy()

    def set_pair(self, j: int, l: int, value):
        if not 0 <= l < j < self.J:
            raise ValidationError(f"only strictly lower pairs carry coefficients, got ({j}, {l})")
        self.block_matrix(j)[:, l] = value

    def matrices(self) -> np.ndarray:
        """Array ``B`` of shape (p, J, J) with ``B[q, j, l] = beta_{q j l}``."""
        if self.size == 0:
            return np.zeros((self.p, self.J, self.J))
        return self.flat[self._gather] * self._mask

    @cached_property
    def _gather(self) -> np.ndarray:
        idx = np.zeros((self.p, self.J, self.J), dtype=np.int64)
        for j in range(1, self.J):
            start = block_offset(j, self.p)
            for q in range(self.p):
                idx[q, j, :j] = start + q * j + np.arange(j)
        return idx

    @cached_property
    def _mask(self) -> np.ndarray:
        return np.broadcast_to(np.tril(np.ones((self.J, self.J)), -1), (self.p, self.J, self.J))

    @classmethod
    def from_matrices(cls, B: np.ndarray) -> "CoefficientSet":
        B = np.asarray(B, dtype=float)
        p, J, _ = B.shape
        out = cls(p, J)
        for j in range(1, J):
            out.block_matrix(j)[:] = B[:, j, :j]
        return out

    def copy(self) -> "CoefficientSet":
        return CoefficientSet(self.p, self.J, self.flat.copy())

    def pi_index(self) -> list[tuple[int, int]]:
        return _tril_pairs(self.J)

    def __repr__(self):
        return f"CoefficientSet(p={self.p}, J={self.J})"


@dataclass
class ParticipantParams:
    eta: np.ndarray
    lam: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if np.any(self.eta <= 0) or np.any(self.lam <= 0):
            raise ValidationError("eta and lambda must be strictly positive")


def build_L(x, coeffs: CoefficientSet) -> np.ndarray:
    """Unit lower triangular ``L`` with ``L[j, l] = x @ beta_jl``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (coeffs.p,):
        raise ValidationError(f"covariate vector has shape {x.shape}, expected ({coeffs.p},)")
    return np.eye(coeffs.J) + np.tensordot(x, coeffs.matrices(), axes=1)


def build_L_batch(X, B: np.ndarray) -> np.ndarray:
    """``L`` for every row of ``X`` (n, p) given coefficient matrices ``B`` (p, J, J)."""
    X = np.asarray(X, dtype=float)
    return np.eye(B.shape[1]) + np.tensordot(X, B, axes=1)


def forward_substitute_U(L: np.ndarray) -> np.ndarray:
    """Solve ``U L^T = I`` for unit upper triangular ``U``, column by column.

    ``U[l, j] = -L[j, l] - sum_{l < m < j} U[l, m] L[j, m]``.  Works on a single
    matrix or a stack with leading batch dimensions.
    """
    L = np.asarray(L, dtype=float)
    U = np.zeros_like(L)
    J = L.shape[-1]
    idx = np.arange(J)
    U[..., idx, idx] = 1.0
    refresh_U_columns(U, L, 1)
    return U


def refresh_U_columns(U: np.ndarray, L: np.ndarray, start: int, stop: int | None = None):
    """Recompute columns ``start..stop-1`` of ``U`` in place from ``L``.

    Column ``j`` needs only columns ``< j``, so refreshing from ``start``
    upward is valid whenever columns below ``start`` are already current.
    """
    J = L.shape[-1]
    stop = J if stop is None else stop
    for j in range(max(start, 1), stop):
        # U[:j, j] = -U[:j, :j] @ L[j, :j]
        U[..., :j, j] = -np.einsum("...ab,...b->...a", U[..., :j, :j], L[..., j, :j])


def build_delta(L: np.ndarray, lam) -> np.ndarray:
    """``Delta = L diag(lam) L^T``; entries ``sum_{m<=l} lam_m L[j,m] L[l,m]``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValidationError("lambda entries must be strictly positive")
    return np.einsum("...jm,...m,...lm->...jl", L, lam, L)


def _sorted_pair(j: int, l: int, J: int) -> tuple[int, int]:
    if not (0 <= j < J and 0 <= l < J):
        raise ValidationError(f"block pair ({j}, {l}) out of range for J={J}")
    return (j, l) if l <= j else (l, j)


def sigma_block(j: int, l: int, partition: BlockPartition, delta: np.ndarray, eta) -> np.ndarray:
    """The ``d_j x d_l`` block of the full covariance."""
    J = partition.J
    if not (0 <= j < J and 0 <= l < J):
        raise ValidationError(f"block pair ({j}, {l}) out of range for J={J}")
    dj, dl = partition.d[j], partition.d[l]
    block = np.full((dj, dl), delta[j, l] / np.sqrt(dj * dl))
    if j == l:
        eta_j = float(np.asarray(eta)[j])
        if eta_j <= 0:
            raise ValidationError("eta entries must be strictly positive")
        block += eta_j * (np.eye(dj) - 1.0 / dj)
    return block


def _check_core(partition: BlockPartition, delta, eta, max_dim: int):
    if partition.M > max_dim:
        raise ValidationError(f"M={partition.M} exceeds the dense threshold {max_dim}")
    delta = np.asarray(delta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if delta.shape != (partition.J, partition.J) or eta.shape != (partition.J,):
        raise ValidationError("Delta must be J x J and eta length J")
    return delta, eta


def assemble_sigma_full(partition: BlockPartition, delta, eta, max_dim: int = ORACLE_MAX_DIM) -> np.ndarray:
    """Dense ``Sigma = Q D Q^T`` (small problems only)."""
    delta, eta = _check_core(partition, delta, eta, max_dim)
    basis = build_basis(partition, max_dim=max_dim)
    Q = basis.materialize_q()
    tail = np.repeat(eta, partition.sizes - 1)
    D = np.zeros((partition.M, partition.M))
    D[: partition.J, : partition.J] = delta
    D[partition.J :, partition.J :] = np.diag(tail)
    return Q @ D @ Q.T


def assemble_sigma_blocks(partition: BlockPartition, delta, eta, max_dim: int = ORACLE_MAX_DIM) -> np.ndarray:
    """Dense covariance assembled block by block from :func:`sigma_block`."""
    delta, eta = _check_core(partition, delta, eta, max_dim)
    rows = [
        np.hstack([sigma_block(j, l, partition, delta, eta) for l in range(partition.J)])
        for j in range(partition.J)
    ]
    return np.vstack(rows)


def precision_full(partition: BlockPartition, delta, eta, max_dim: int = ORACLE_MAX_DIM) -> np.ndarray:
    """Dense inverse covariance from the canonical factors."""
    delta, eta = _check_core(partition, delta, eta, max_dim)
    try:
        delta_inv = np.linalg.inv(delta)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Delta is singular") from exc
    nu = build_basis(partition, max_dim=max_dim).nu_tilde
    out = nu @ delta_inv @ nu.T
    for j in range(partition.J):
        s = partition.block_slice(j)
        dj = partition.d[j]
        out[s, s] += (np.eye(dj) - 1.0 / dj) / eta[j]
    return out


def sensitivity_continuous(q: int, j: int, l: int, x, coeffs: CoefficientSet, lam, partition: BlockPartition) -> float:
    """Constant entry of the derivative of block (j, l) with respect to ``x[q]``.

    ``(1/sqrt(d_j d_l)) sum_{m<=l} lam_m (beta_qjm L_lm + beta_qlm L_jm)`` for
    ``l <= j``, where ``L`` has a unit diagonal so ``beta_qmm = 0``.
    """
    if not 0 <= q < coeffs.p:
        raise ValidationError(f"covariate index {q} out of range for p={coeffs.p}")
    j, l = _sorted_pair(j, l, coeffs.J)
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    L = build_L(x, coeffs)
    total = 0.0
    for m in range(l + 1):
        bj = coeffs.pair(j, m)[q]
        bl = coeffs.pair(l, m)[q]
        total += lam[m] * (bj * L[l, m] + bl * L[j, m])
    return total / np.sqrt(partition.d[j] * partition.d[l])


def sensitivity_binary(j: int, l: int, x, coeffs: CoefficientSet, lam, partition: BlockPartition, q: int | None = None) -> float:
    """Change of block (j, l) when binary covariate ``q`` switches from 0 to 1.

    ``q`` defaults to the last covariate; ``x[q]`` itself is ignored.
    ``(1/sqrt(d_j d_l)) sum_{m<=l} lam_m {b_jm b_lm + b_jm L0_lm + b_lm L0_jm}``
    with ``b = beta_q..`` and ``L0`` the Cholesky factor at ``x[q] = 0``.
    """
    q = coeffs.p - 1 if q is None else int(q)
    if not 0 <= q < coeffs.p:
        raise ValidationError(f"covariate index {q} out of range for p={coeffs.p}")
    j, l = _sorted_pair(j, l, coeffs.J)
    x0 = np.array(x, dtype=float)
    x0[q] = 0.0
    lam = np.asarray(lam, dtype=float)
    L0 = build_L(x0, coeffs)
    total = 0.0
    for m in range(l + 1):
        bj = coeffs.pair(j, m)[q]
        bl = coeffs.pair(l, m)[q]
        total += lam[m] * (bj * bl + bj * L0[l, m] + bl * L0[j, m])
    return total / np.sqrt(partition.d[j] * partition.d[l])


def sensitivity_matrices(X, B, lam, sizes, q: int, binary: bool = False) -> np.ndarray:
    """Vectorized sensitivities for every block and participant.

    Parameters
    ----------
    X : (n, p) covariates.
    B : (..., p, J, J) coefficient matrices (leading dims index draws).
    lam : (..., n, J) Cholesky scales.
    sizes : (n, J) block sizes.
    q : covariate index (0-based).
    binary : use the 0 -> 1 switch of ``x[q]`` instead of the derivative.

    Returns
    -------
    (..., n, J, J) symmetric array; entry ``[i, j, l]`` is the constant value
    of the block-(j, l) sensitivity for participant ``i``.
    """
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    J = B.shape[-1]
    dB = B[..., q, :, :]
    if binary:
        X = X.copy()
        X[:, q] = 0.0
    L = np.eye(J) + np.einsum("iq,...qjl->...ijl", X, B)
    # dDelta = dB Lam L^T + L Lam dB^T, plus dB Lam dB^T for the discrete switch
    left = np.einsum("...jm,...im,...ilm->...ijl", dB, lam, L)
    out = left + np.swapaxes(left, -1, -2)
    if binary:
        out = out + np.einsum("...jm,...im,...lm->...ijl", dB, lam, dB)
    scale = np.sqrt(np.asarray(sizes, dtype=float))
    return out / (scale[:, :, None] * scale[:, None, :])
