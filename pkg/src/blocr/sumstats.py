"""Per-participant sufficient statistics and the collapsed Gaussian likelihood.

Only ``tr(S_jj)``, ``1^T S_jj 1`` and the J x J matrix
``A = nu_tilde^T S nu_tilde`` are needed to evaluate the likelihood, so raw
time series are reduced once, block by block, and then discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .partition import BlockPartition, validate_partition

LOG_2PI = np.log(2.0 * np.pi)

BSUM_MAGIC = b"BSUM"
BSUM_VERSION = 1
_BSUM_HEADER = struct.Struct("<4sIIIQ")

BTSR_MAGIC = b"BTSR"
BTSR_VERSION = 1
_BTSR_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ParticipantSummary:
    """Sufficient statistics of one participant (divisor ``T``)."""

    partition: BlockPartition
    T: int
    trS: np.ndarray
    oneSone: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        J = self.partition.J
        if self.trS.shape != (J,) or self.oneSone.shape != (J,) or self.A.shape != (J, J):
            raise ValidationError("summary arrays do not match the partition's J")
        if self.T < 1:
            raise ValidationError(f"T must be >= 1, got {self.T}")

    @property
    def J(self) -> int:
        return self.partition.J

    @property
    def within_block_residual(self) -> np.ndarray:
        """``tr(S_jj) - 1^T S_jj 1 / d_j``, the data term of the eta conditional."""
        r = self.trS - self.oneSone / self.partition.sizes
        r[self.partition.sizes == 1] = 0.0
        return np.maximum(r, 0.0)


def _check_finite(block: np.ndarray, row_offset: int, col_offset: int, stride: int = 1):
    bad = ~np.isfinite(block)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(
            f"non-finite value at row {row_offset + r * stride + 1}, column {col_offset + c + 1}"
        )


def compute_summary(Y, partition: BlockPartition, center: bool = False, scale: bool = False,
                    thin: int = 1) -> ParticipantSummary:
    """Reduce a T x M series to its sufficient statistics.

    Works one block of columns at a time, so peak extra memory is
    ``O(T * max(d) + T * J)``.  ``Y`` may be a memory map.

    Parameters
    ----------
    Y : array_like, shape (T, M)
    partition : BlockPartition
    center, scale : per-column centering / unit-variance scaling applied
        before summarizing (population standard deviation; constant columns
        are left unscaled).
    thin : keep every ``thin``-th row, starting with the first.
    """
    if getattr(Y, "ndim", None) != 2:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2:
            raise ValidationError(f"time series must be 2-D, got shape {Y.shape}")
    if thin < 1:
        raise ValidationError(f"thin must be >= 1, got {thin}")
    if Y.shape[1] != partition.M:
        raise ValidationError(f"time series has {Y.shape[1]} columns but the partition has M={partition.M}")
    rows = Y[::thin] if thin > 1 else Y
    T = rows.shape[0]
    if T < 1:
        raise ValidationError("time series has no rows")
    J = partition.J
    Z = np.empty((T, J))
    trS = np.empty(J)
    oneSone = np.empty(J)
    for j in range(J):
        s = partition.block_slice(j)
        block = np.array(rows[:, s], dtype=float)
        _check_finite(block, 0, s.start, thin)
        if center:
            block -= block.mean(axis=0)
        if scale:
            sd = block.std(axis=0)
            sd[sd == 0] = 1.0
            block /= sd
        rowsum = block.sum(axis=1)
        Z[:, j] = rowsum / np.sqrt(partition.d[j])
        trS[j] = np.einsum("ij,ij->", block, block) / T
        oneSone[j] = rowsum @ rowsum / T
    A = Z.T @ Z / T
    A = 0.5 * (A + A.T)
    return ParticipantSummary(partition, T, trS, oneSone, A)


def quadratic_forms(A: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``U[:j+1, j]^T A[:j+1, :j+1] U[:j+1, j]`` for every column ``j``.

    Equal to ``diag(U^T A U)`` because ``U`` is upper triangular.  Accepts
    stacked inputs with a leading participant axis.
    """
    return np.einsum("...kj,...kl,...lj->...j", U, A, U)


def log_likelihood(summary: ParticipantSummary, eta, lam, U) -> float:
    """Normalized log density of all ``T`` observations of one participant.

    Costs ``O(J^3)`` and never touches ``M``-sized arrays.
    """
    eta = np.asarray(eta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(eta <= 0) or np.any(lam <= 0):
        raise ValidationError("eta and lambda must be strictly positive")
    d = summary.partition.sizes
    T = summary.T
    qf = quadratic_forms(summary.A, np.asarray(U, dtype=float))
    return float(
        -0.5 * T * summary.partition.M * LOG_2PI
        - 0.5 * T * np.sum(np.log(lam) + (d - 1) * np.log(eta))
        - 0.5 * T * np.sum(summary.within_block_residual / eta)
        - 0.5 * T * np.sum(qf / lam)
    )


@dataclass(frozen=True)
class SummaryBatch:
    """Summaries of ``n`` participants sharing ``J``, stacked for vectorized sampling."""

    ids: tuple[str, ...]
    T: np.ndarray         # (n,)
    sizes: np.ndarray     # (n, J)
    trS: np.ndarray       # (n, J)
    oneSone: np.ndarray   # (n, J)
    A: np.ndarray         # (n, J, J)

    @property
    def n(self) -> int:
        return self.T.shape[0]

    @property
    def J(self) -> int:
        return self.sizes.shape[1]

    @property
    def M(self) -> np.ndarray:
        return self.sizes.sum(axis=1)

    @property
    def resid(self) -> np.ndarray:
        r = self.trS - self.oneSone / self.sizes
        r[self.sizes == 1] = 0.0
        return np.maximum(r, 0.0)

    def log_likelihood(self, eta, lam, U) -> np.ndarray:
        """Per-participant normalized log-likelihoods, shape (n,)."""
        qf = quadratic_forms(self.A, U)
        T = self.T
        return (
            -0.5 * T * self.M * LOG_2PI
            - 0.5 * T * np.sum(np.log(lam) + (self.sizes - 1) * np.log(eta), axis=1)
            - 0.5 * T * np.sum(self.resid / eta, axis=1)
            - 0.5 * T * np.sum(qf / lam, axis=1)
        )

    def summary(self, i: int) -> ParticipantSummary:
        part = validate_partition(self.sizes[i])
        return ParticipantSummary(part, int(self.T[i]), self.trS[i].copy(), self.oneSone[i].copy(), self.A[i].copy())


def stack_summaries(summaries: Sequence[ParticipantSummary], ids: Sequence[str] | None = None) -> SummaryBatch:
    if len(summaries) == 0:
        raise ValidationError("no summaries given")
    Js = {s.J for s in summaries}
    if len(Js) != 1:
        raise ValidationError(f"summaries disagree on the number of blocks: J in {sorted(Js)}")
    if ids is None:
        ids = [f"p{i:04d}" for i in range(len(summaries))]
    return SummaryBatch(
        ids=tuple(str(v) for v in ids),
        T=np.array([s.T for s in summaries], dtype=float),
        sizes=np.array([s.partition.d for s in summaries], dtype=np.int64),
        trS=np.array([s.trS for s in summaries]),
        oneSone=np.array([s.oneSone for s in summaries]),
        A=np.array([s.A for s in summaries]),
    )


# -- BSUM files ---------------------------------------------------------------

def summary_to_bytes(summary: ParticipantSummary) -> bytes:
    p = summary.partition
    parts = [
        _BSUM_HEADER.pack(BSUM_MAGIC, BSUM_VERSION, p.J, summary.T, p.M),
        np.asarray(p.d, dtype="<u4").tobytes(),
        np.asarray(summary.trS, dtype="<f8").tobytes(),
        np.asarray(summary.oneSone, dtype="<f8").tobytes(),
        np.ascontiguousarray(summary.A, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def summary_from_bytes(buf: bytes, source: str = "<bytes>") -> ParticipantSummary:
    if len(buf) < _BSUM_HEADER.size:
        raise FormatError(f"{source}: truncated BSUM header")
    magic, version, J, T, M = _BSUM_HEADER.unpack_from(buf, 0)
    if magic != BSUM_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {BSUM_MAGIC!r}")
    if version != BSUM_VERSION:
        raise FormatError(f"{source}: unsupported BSUM version {version}")
    expected = _BSUM_HEADER.size + 4 * J + 8 * (2 * J + J * J)
    if len(buf) != expected:
        raise FormatError(f"{source}: expected {expected} bytes for J={J}, found {len(buf)}")
    off = _BSUM_HEADER.size
    d = np.frombuffer(buf, dtype="<u4", count=J, offset=off).astype(np.int64)
    off += 4 * J
    trS = np.frombuffer(buf, dtype="<f8", count=J, offset=off).astype(float)
    off += 8 * J
    oneSone = np.frombuffer(buf, dtype="<f8", count=J, offset=off).astype(float)
    off += 8 * J
    A = np.frombuffer(buf, dtype="<f8", count=J * J, offset=off).astype(float).reshape(J, J)
    part = validate_partition(d)
    if part.M != M:
        raise ValidationError(f"{source}: header M={M} disagrees with sum(d)={part.M}")
    return ParticipantSummary(part, int(T), trS, oneSone, A)


def write_summary_file(path, summary: ParticipantSummary):
    Path(path).write_bytes(summary_to_bytes(summary))


def read_summary_file(path) -> ParticipantSummary:
    path = Path(path)
    return summary_from_bytes(path.read_bytes(), str(path))


# -- raw time series ----------------------------------------------------------

def write_timeseries_binary(path, Y):
    Y = np.ascontiguousarray(Y, dtype="<f8")
    T, M = Y.shape
    with open(path, "wb") as fh:
        fh.write(_BTSR_HEADER.pack(BTSR_MAGIC, BTSR_VERSION, T, M))
        fh.write(Y.tobytes())


def read_timeseries_binary(path) -> np.ndarray:
    """Memory-map a BTSR file as a (T, M) float64 array."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_BTSR_HEADER.size)
    if len(head) < _BTSR_HEADER.size:
        raise FormatError(f"{path}: truncated BTSR header")
    magic, version, T, M = _BTSR_HEADER.unpack(head)
    if magic != BTSR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {BTSR_MAGIC!r}")
    if version != BTSR_VERSION:
        raise FormatError(f"{path}: unsupported BTSR version {version}")
    size = path.stat().st_size
    if size != _BTSR_HEADER.size + 8 * T * M:
        raise FormatError(f"{path}: expected {T}x{M} float64 payload, file has {size} bytes")
    if T * M == 0:
        return np.zeros((T, M))
    return np.memmap(path, dtype="<f8", mode="r", offset=_BTSR_HEADER.size, shape=(T, M))


def read_timeseries_csv(path) -> np.ndarray:
    """Read a headerless CSV (T rows x M columns)."""
    path = Path(path)
    try:
        Y = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: cannot parse CSV ({exc})") from exc
    _check_finite(Y, 0, 0)
    return Y


def read_timeseries(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BTSR_MAGIC:
        return read_timeseries_binary(path), "binary"
    return read_timeseries_csv(path), "csv"
