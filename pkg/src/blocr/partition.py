"""Block partitions and the orthonormal rotation basis of a block covariance.

A partition ``d = (d_1, ..., d_J)`` splits ``M = sum(d)`` coordinates into
``J`` contiguous blocks.  The rotation ``Q = (nu_tilde, nu_perp)`` sends a
block covariance matrix to its canonical block-diagonal form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

#: Largest dimension for which dense M x M objects may be built.
ORACLE_MAX_DIM = 200


@dataclass(frozen=True)
class BlockPartition:
    """Validated block sizes with derived offsets.

    Construct through :func:`validate_partition`.
    """

    d: tuple[int, ...]

    def __post_init__(self):
        if len(self.d) == 0:
            raise ValidationError("partition must contain at least one block")
        for j, dj in enumerate(self.d):
            if int(dj) != dj or dj < 1:
                raise ValidationError(f"block {j + 1} has invalid size {dj!r}; sizes must be >= 1")

    @property
    def J(self) -> int:
        return len(self.d)

    @property
    def M(self) -> int:
        return int(sum(self.d))

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.d, dtype=np.int64)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes)[:-1])).astype(np.int64)

    def block_slice(self, j: int) -> slice:
        """Column slice of block ``j`` (0-based)."""
        if not 0 <= j < self.J:
            raise ValidationError(f"block index {j} out of range for J={self.J}")
        start = int(self.offsets[j])
        return slice(start, start + self.d[j])

    def labels(self) -> np.ndarray:
        """Block index of every coordinate, length M."""
        return np.repeat(np.arange(self.J), self.sizes)


def validate_partition(d: Sequence[int]) -> BlockPartition:
    """Check block sizes and return the partition.

    >>> validate_partition([259, 129, 216, 178, 85]).M
    867
    """
    try:
        sizes = [int(v) for v in d]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"block sizes must be integers: {d!r}") from exc
    if any(int(v) != v for v in np.asarray(d, dtype=float).ravel()):
        raise ValidationError(f"block sizes must be integers: {d!r}")
    return BlockPartition(tuple(sizes))


def helmert_complement(d: int) -> np.ndarray:
    """Rows 2..d of the order-``d`` Helmert matrix, as a ``d x (d-1)`` matrix.

    Column ``k-1`` (for ``k = 2..d``) holds ``k-1`` entries ``1/sqrt(k(k-1))``
    followed by ``-(k-1)/sqrt(k(k-1))`` and zeros.  The columns are orthonormal
    and orthogonal to the all-ones vector.
    """
    if int(d) != d or d < 1:
        raise ValidationError(f"Helmert order must be a positive integer, got {d!r}")
    d = int(d)
    V = np.zeros((d, d - 1))
    for k in range(2, d + 1):
        c = 1.0 / np.sqrt(k * (k - 1.0))
        V[: k - 1, k - 2] = c
        V[k - 1, k - 2] = -(k - 1) * c
    return V


@dataclass(frozen=True)
class CanonicalBasis:
    partition: BlockPartition
    max_dim: int = ORACLE_MAX_DIM

    @cached_property
    def nu_tilde(self) -> np.ndarray:
        """M x J block-diagonal matrix of scaled one-vectors."""
        p = self.partition
        out = np.zeros((p.M, p.J))
        for j in range(p.J):
            out[p.block_slice(j), j] = 1.0 / np.sqrt(p.d[j])
        return out

    @cached_property
    def nu_perp(self) -> np.ndarray:
        """M x (M-J) block-diagonal matrix of Helmert complements."""
        p = self.partition
        self._check_dense()
        out = np.zeros((p.M, p.M - p.J))
        col = 0
        for j in range(p.J):
            dj = p.d[j]
            out[p.block_slice(j), col : col + dj - 1] = helmert_complement(dj)
            col += dj - 1
        return out

    def materialize_q(self) -> np.ndarray:
        self._check_dense()
        return np.hstack([self.nu_tilde, self.nu_perp])

    def _check_dense(self):
        if self.partition.M > self.max_dim:
            raise ValidationError(
                f"M={self.partition.M} exceeds the dense threshold {self.max_dim}; "
                "use the summary-statistic path instead"
            )


def build_basis(partition: BlockPartition, max_dim: int = ORACLE_MAX_DIM) -> CanonicalBasis:
    return CanonicalBasis(partition, max_dim=max_dim)


def read_partition_file(path) -> tuple[BlockPartition, dict]:
    """Read a partition JSON file; returns the partition and the raw record."""
    path = Path(path)
    try:
        rec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read partition JSON ({exc})") from exc
    if not isinstance(rec, dict) or "d" not in rec:
        raise FormatError(f"{path}: partition JSON needs a 'd' array")
    part = validate_partition(rec["d"])
    if "J" in rec and int(rec["J"]) != part.J:
        raise ValidationError(f"{path}: J={rec['J']} disagrees with len(d)={part.J}")
    return part, rec


def write_partition_file(path, partition: BlockPartition, participant_id: str, T: int | None = None):
    rec = {"participant_id": str(participant_id), "J": partition.J, "d": list(partition.d)}
    if T is not None:
        rec["T"] = int(T)
    Path(path).write_text(json.dumps(rec, sort_keys=True) + "\n")
