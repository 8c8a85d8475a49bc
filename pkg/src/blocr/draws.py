"""Posterior draw storage, the BDRW binary format and CSV export."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covreg import CoefficientSet, _tril_pairs
from .errors import FormatError, ValidationError

BDRW_MAGIC = b"BDRW"
BDRW_VERSION = 1
_BDRW_HEADER = struct.Struct("<4sIQ")


@dataclass
class ParameterSnapshot:
    """One state of the chain: the parameters of every participant."""

    eta: np.ndarray          # (n, J)
    lam: np.ndarray          # (n, J)
    coeffs: CoefficientSet
    pi: np.ndarray           # (J(J-1)/2,) indicators in (j, l) row-major order
    logpost: float = float("nan")
    iteration: int = -1


@dataclass
class PosteriorDraws:
    """Retained draws plus everything needed to evaluate posterior functionals."""

    eta: np.ndarray          # (S, n, J)
    lam: np.ndarray          # (S, n, J)
    beta: np.ndarray         # (S, p*J(J-1)/2) stacked order
    pi: np.ndarray           # (S, J(J-1)/2) int8
    logpost: np.ndarray      # (S,)
    iteration: np.ndarray    # (S,)
    X: np.ndarray            # (n, p)
    sizes: np.ndarray        # (n, J)
    T: np.ndarray            # (n,)
    ids: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return self.logpost.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def J(self) -> int:
        return self.sizes.shape[1]

    def coeffs(self, s: int) -> CoefficientSet:
        return CoefficientSet(self.p, self.J, self.beta[s].copy())

    def beta_matrices(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Coefficient matrices (S', p, J, J) for draws ``start:stop``."""
        cs = CoefficientSet(self.p, self.J)
        flat = self.beta[start:stop]
        if cs.size == 0:
            return np.zeros((flat.shape[0], self.p, self.J, self.J))
        return flat[:, cs._gather] * cs._mask

    def snapshot(self, s: int) -> ParameterSnapshot:
        return ParameterSnapshot(
            eta=self.eta[s].copy(), lam=self.lam[s].copy(), coeffs=self.coeffs(s),
            pi=self.pi[s].copy(), logpost=float(self.logpost[s]), iteration=int(self.iteration[s]),
        )


def _layout(n: int, J: int, p: int) -> list[tuple[str, int]]:
    K = J * (J - 1) // 2
    return [("logpost", 1), ("iteration", 1), ("eta", n * J), ("lam", n * J), ("beta", p * K), ("pi", K)]


def draws_to_bytes(draws: PosteriorDraws) -> bytes:
    n, J, p, S = draws.n, draws.J, draws.p, draws.S
    layout = _layout(n, J, p)
    header = {
        "n": n, "J": J, "p": p, "S": S,
        "layout": [[name, width] for name, width in layout],
        "ids": list(draws.ids),
        "X": draws.X.tolist(),
        "sizes": draws.sizes.tolist(),
        "T": [int(t) for t in draws.T],
        "meta": draws.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = np.hstack([
        draws.logpost.reshape(S, 1),
        draws.iteration.reshape(S, 1).astype(float),
        draws.eta.reshape(S, -1),
        draws.lam.reshape(S, -1),
        draws.beta.reshape(S, -1),
        draws.pi.reshape(S, -1).astype(float),
    ])
    return _BDRW_HEADER.pack(BDRW_MAGIC, BDRW_VERSION, len(head)) + head + np.ascontiguousarray(body, "<f8").tobytes()


def draws_from_bytes(buf: bytes, source: str = "<bytes>") -> PosteriorDraws:
    if len(buf) < _BDRW_HEADER.size:
        raise FormatError(f"{source}: truncated BDRW header")
    magic, version, hlen = _BDRW_HEADER.unpack_from(buf, 0)
    if magic != BDRW_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {BDRW_MAGIC!r}")
    if version != BDRW_VERSION:
        raise FormatError(f"{source}: unsupported BDRW version {version}")
    off = _BDRW_HEADER.size
    try:
        header = json.loads(buf[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt BDRW header") from exc
    off += hlen
    n, J, p, S = (int(header[k]) for k in ("n", "J", "p", "S"))
    layout = _layout(n, J, p)
    if [list(x) for x in layout] != header["layout"]:
        raise FormatError(f"{source}: unexpected draw layout {header['layout']}")
    width = sum(w for _, w in layout)
    if len(buf) - off != 8 * S * width:
        raise FormatError(f"{source}: expected {S} draws of width {width}, payload has {len(buf) - off} bytes")
    body = np.frombuffer(buf, dtype="<f8", count=S * width, offset=off).reshape(S, width).astype(float)
    cols = {}
    c = 0
    for name, w in layout:
        cols[name] = body[:, c : c + w]
        c += w
    return PosteriorDraws(
        eta=cols["eta"].reshape(S, n, J).copy(),
        lam=cols["lam"].reshape(S, n, J).copy(),
        beta=cols["beta"].copy(),
        pi=cols["pi"].astype(np.int8),
        logpost=cols["logpost"][:, 0].copy(),
        iteration=cols["iteration"][:, 0].astype(np.int64),
        X=np.asarray(header["X"], dtype=float).reshape(n, p),
        sizes=np.asarray(header["sizes"], dtype=np.int64).reshape(n, J),
        T=np.asarray(header["T"], dtype=float),
        ids=tuple(header["ids"]),
        meta=header["meta"],
    )


def write_draws(path, draws: PosteriorDraws):
    Path(path).write_bytes(draws_to_bytes(draws))


def read_draws(path) -> PosteriorDraws:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"draws file not found: {path}")
    return draws_from_bytes(path.read_bytes(), str(path))


def export_beta_pi_csv(path, draws: PosteriorDraws):
    """One row per retained draw; columns ``beta[q][j][l]`` and ``pi[j][l]`` (1-based)."""
    pairs = _tril_pairs(draws.J)
    names, cols = [], []
    cs = CoefficientSet(draws.p, draws.J)
    for j, l in pairs:
        for q in range(draws.p):
            names.append(f"beta[{q + 1}][{j + 1}][{l + 1}]")
            cols.append(cs._gather[q, j, l])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *names, *(f"pi[{j + 1}][{l + 1}]" for j, l in pairs)])
        for s in range(draws.S):
            row = [int(draws.iteration[s])]
            row += [repr(float(v)) for v in draws.beta[s, cols]]
            row += [int(v) for v in draws.pi[s]]
            w.writerow(row)
