"""Finite state spaces and validated CTMC rate matrices.

Rate matrices use the column convention throughout the package: entry
``(y, x)`` is the jump rate from state ``x`` to state ``y``, so marginal
laws evolve as ``dp/dt = Q p`` and every column sums to zero.  Off-diagonal
entries are nonnegative, diagonals are ``-(total exit rate)``.

Constructors are provided for the standard product spaces: the hypercube
{0,1}^d with unit flip rates, its asymmetric variant with biased per-bit
flip rates, and the lattice [0,S-1]^d with nearest-neighbour moves and
reflecting boundaries.  States are indexed 0-based in row-major order over
their lattice embedding.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    ColumnSumNonzero,
    NegativeOffDiagonal,
    NotSquare,
    POutOfRange,
    TooLarge,
)

COLUMN_SUM_TOL = 1e-12
SYMMETRY_TOL = 1e-12
DEFAULT_SIZE_CAP = 2**20


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StateSpace:
    """A finite set of states, optionally embedded in the lattice [0, S-1]^d.

    The embedding, when present, is an (size, d) integer array whose rows
    are distinct and cover [0, S-1]^d exactly (so size == S**d), listed in
    row-major order of the state index.
    """

    size: int
    embedding: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"state space needs size >= 2, got {self.size}")
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.int64)
            if emb.ndim != 2 or emb.shape[0] != self.size:
                raise ValueError(
                    f"embedding must be ({self.size}, d), got shape {emb.shape}"
                )
            side = int(emb.max()) + 1
            d = emb.shape[1]
            if emb.min() < 0 or side**d != self.size:
                raise ValueError(
                    "embedding must cover [0, S-1]^d exactly with S**d == size"
                )
            if len({tuple(row) for row in emb.tolist()}) != self.size:
                raise ValueError("embedding rows must be distinct")
            object.__setattr__(self, "embedding", _readonly(emb))
        if self.labels is not None and len(self.labels) != self.size:
            raise ValueError("labels length must equal size")

    @property
    def dim(self) -> int | None:
        return None if self.embedding is None else self.embedding.shape[1]

    @property
    def side(self) -> int | None:
        return None if self.embedding is None else int(self.embedding.max()) + 1

    def index_of(self, point: np.ndarray) -> np.ndarray:
        """Map lattice points (row-major digits) back to state indices."""
        if self.embedding is None:
            raise ValueError("state space has no embedding")
        side = self.side
        d = self.embedding.shape[1]
        strides = side ** np.arange(d - 1, -1, -1, dtype=np.int64)
        return np.asarray(point, dtype=np.int64) @ strides


@dataclass(frozen=True)
class RateMatrix:
    """A validated CTMC generator in column convention (dp/dt = Q p).

    max_rate is the largest off-diagonal entry; max_exit_rate and
    min_exit_rate bound the per-state total exit rates |Q(x,x)|.
    Instances are immutable; build them through validate_rate_matrix.
    """

    entries: np.ndarray
    max_rate: float
    max_exit_rate: float
    min_exit_rate: float
    symmetric: bool
    time_homogeneous: bool = True

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def validate_rate_matrix(
    entries: np.ndarray, *, time_homogeneous: bool = True
) -> RateMatrix:
    """Check generator axioms and record the rate bounds.

    Raises NotSquare, NegativeOffDiagonal (with the offending index), or
    ColumnSumNonzero (tolerance 1e-12).
    """
    q = np.asarray(entries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise NotSquare(f"rate matrix must be square 2-d, got shape {q.shape}")
    if q.shape[0] < 2:
        raise NotSquare(f"rate matrix must be at least 2x2, got {q.shape[0]}")
    off = q.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0):
        y, x = np.argwhere(off < 0)[0]
        raise NegativeOffDiagonal(
            f"negative rate {q[y, x]} at entry ({y}, {x})"
        )
    col_sums = q.sum(axis=0)
    bad = np.abs(col_sums) > COLUMN_SUM_TOL
    if np.any(bad):
        x = int(np.argmax(np.abs(col_sums)))
        raise ColumnSumNonzero(
            f"column {x} sums to {col_sums[x]:.3e} (tolerance {COLUMN_SUM_TOL})"
        )
    exit_rates = -np.diag(q)
    return RateMatrix(
        entries=_readonly(q),
        max_rate=float(off.max()),
        max_exit_rate=float(exit_rates.max()),
        min_exit_rate=float(exit_rates.min()),
        symmetric=bool(np.abs(q - q.T).max() <= SYMMETRY_TOL),
        time_homogeneous=time_homogeneous,
    )


def off_diagonal(q: RateMatrix | np.ndarray) -> np.ndarray:
    """Entries with the diagonal zeroed; entry (y, x) is the rate x -> y."""
    m = q.entries if isinstance(q, RateMatrix) else np.asarray(q, dtype=np.float64)
    out = m.copy()
    np.fill_diagonal(out, 0.0)
    return out


def _finish(off: np.ndarray) -> RateMatrix:
    q = off.copy()
    np.fill_diagonal(q, -off.sum(axis=0))
    return validate_rate_matrix(q)


def _check_cap(size: int, size_cap: int) -> None:
    if size > size_cap:
        raise TooLarge(f"state space of size {size} exceeds cap {size_cap}")


def _lattice_embedding(side: int, d: int) -> np.ndarray:
    """Row-major digits of 0..side**d-1 in base `side`, most significant first."""
    idx = np.arange(side**d, dtype=np.int64)
    digits = np.empty((side**d, d), dtype=np.int64)
    for k in range(d - 1, -1, -1):
        digits[:, k] = idx % side
        idx //= side
    return digits


def hypercube_rate_matrix(
    d: int, *, size_cap: int = DEFAULT_SIZE_CAP
) -> tuple[StateSpace, RateMatrix]:
    """Unit-rate single-bit flips on {0,1}^d.

    Every state has d neighbours at rate 1, so the recorded bounds are
    max_rate = 1 and exit rates d everywhere.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    n = 2**d
    _check_cap(n, size_cap)
    off = np.zeros((n, n))
    idx = np.arange(n)
    for b in range(d):
        off[idx ^ (1 << b), idx] = 1.0
    space = StateSpace(size=n, embedding=_lattice_embedding(2, d))
    return space, _finish(off)


def asymmetric_hypercube_rate_matrix(
    d: int, p: float, *, size_cap: int = DEFAULT_SIZE_CAP
) -> tuple[StateSpace, RateMatrix]:
    """Biased single-bit flips on {0,1}^d: 0 -> 1 at rate p, 1 -> 0 at rate 1-p.

    The stationary law is the product Bernoulli(p) distribution.
    """
    if not 0.0 < p < 1.0:
        raise POutOfRange(f"flip rate p must satisfy 0 < p < 1, got {p}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    n = 2**d
    _check_cap(n, size_cap)
    emb = _lattice_embedding(2, d)
    off = np.zeros((n, n))
    idx = np.arange(n)
    for b in range(d):
        coord = d - 1 - b  # bit b of the index is embedding column d-1-b
        target = idx ^ (1 << b)
        rate = np.where(emb[:, coord] == 0, p, 1.0 - p)
        off[target, idx] = rate
    space = StateSpace(size=n, embedding=emb)
    return space, _finish(off)


def grid_rate_matrix(
    side: int, d: int, *, size_cap: int = DEFAULT_SIZE_CAP
) -> tuple[StateSpace, RateMatrix]:
    """Nearest-neighbour moves at unit rate on the lattice [0, side-1]^d.

    Boundaries reflect (edge states simply lack the outward move); side = 2
    coincides with the hypercube.
    """
    if side < 2:
        raise ValueError(f"side must be >= 2, got {side}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    n = side**d
    _check_cap(n, size_cap)
    emb = _lattice_embedding(side, d)
    strides = side ** np.arange(d - 1, -1, -1, dtype=np.int64)
    off = np.zeros((n, n))
    idx = np.arange(n)
    for k in range(d):
        up = emb[:, k] < side - 1
        off[idx[up] + strides[k], idx[up]] = 1.0
        down = emb[:, k] > 0
        off[idx[down] - strides[k], idx[down]] = 1.0
    space = StateSpace(size=n, embedding=emb)
    return space, _finish(off)


def graph_of(q: RateMatrix) -> list[tuple[int, int, float]]:
    """Directed transition edges (src, dst, rate) with rate = entries[dst, src] > 0."""
    off = off_diagonal(q)
    dst, src = np.nonzero(off > 0)
    order = np.lexsort((dst, src))
    return [(int(src[i]), int(dst[i]), float(off[dst[i], src[i]])) for i in order]


# --- serialization ----------------------------------------------------------


def rate_matrix_to_json(q: RateMatrix, space: StateSpace | None = None) -> str:
    doc: dict = {"size": q.size, "entries": q.entries.tolist()}
    if space is not None and space.embedding is not None:
        doc["embedding"] = space.embedding.tolist()
    return json.dumps(doc)


def rate_matrix_from_json(text: str) -> tuple[StateSpace, RateMatrix]:
    doc = json.loads(text)
    q = validate_rate_matrix(np.asarray(doc["entries"], dtype=np.float64))
    emb = doc.get("embedding")
    space = StateSpace(
        size=int(doc["size"]),
        embedding=None if emb is None else np.asarray(emb, dtype=np.int64),
    )
    if space.size != q.size:
        raise ValueError(f"size field {space.size} != entries size {q.size}")
    return space, q


def edges_to_csv(q: RateMatrix) -> str:
    """Sparse edge-list form, header ``src,dst,rate``, floats via repr."""
    buf = io.StringIO()
    buf.write("src,dst,rate\n")
    for src, dst, rate in graph_of(q):
        buf.write(f"{src},{dst},{rate!r}\n")
    return buf.getvalue()


def edges_from_csv(text: str, size: int | None = None) -> RateMatrix:
    """Rebuild a generator from its edge list; diagonals are -(column sums)."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if lines[0] != "src,dst,rate":
        raise ValueError(f"expected header 'src,dst,rate', got {lines[0]!r}")
    rows = [ln.split(",") for ln in lines[1:]]
    src = np.array([int(r[0]) for r in rows], dtype=np.int64)
    dst = np.array([int(r[1]) for r in rows], dtype=np.int64)
    rate = np.array([float(r[2]) for r in rows])
    n = size if size is not None else int(max(src.max(), dst.max())) + 1
    off = np.zeros((n, n))
    off[dst, src] = rate
    return _finish(off)
