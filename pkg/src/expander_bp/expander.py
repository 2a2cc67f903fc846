"""Sparse binary expander matrices.

A :class:`BipartiteExpander` stores the left-``d``-regular bipartite graph as a
``(p, d)`` table of row indices: column ``c`` of the implied ``n x p`` 0/1
matrix has ones exactly at ``columns[c]``.  Products go through a cached
``scipy.sparse`` CSC view built on the same index buffer.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .block_model import GroupModel

MAGIC = b"EXPD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQQIQ")
MAX_ROWS = 2**32 - 1
EXHAUSTIVE_CAP = 10**6
EXPERIMENTAL_DEGREE_FACTOR = 22.0


class ExpanderError(ValueError):
    """Invalid expander parameters or shapes."""


class FormatError(ExpanderError):
    """Malformed serialized expander; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ExpansionCapError(ExpanderError):
    """Exhaustive enumeration would exceed the configured subset cap."""

    def __init__(self, count: int, cap: int):
        super().__init__(
            f"exhaustive check needs {count} subsets, above the cap of {cap}; "
            "use sampled mode or raise the cap")
        self.count = count
        self.cap = cap


@dataclass(frozen=True, eq=False)
class BipartiteExpander:
    """Left-regular bipartite graph with ``n_cols`` left and ``n_rows`` right nodes.

    ``columns`` has shape ``(n_cols, degree)`` and dtype ``uint32``; each row
    of the table holds the sorted, distinct neighbours of one left node.
    """

    n_rows: int
    n_cols: int
    degree: int
    columns: np.ndarray
    seed: int = 0

    def __post_init__(self):
        n, p, d = int(self.n_rows), int(self.n_cols), int(self.degree)
        if n < 1 or p < 1:
            raise ExpanderError(f"invalid shape ({n}, {p}): dimensions must be positive")
        if n > MAX_ROWS:
            raise ExpanderError(f"n_rows = {n} exceeds the 32-bit index range")
        if d < 1 or d > n:
            raise ExpanderError(f"invalid degree {d}: need 1 <= d <= n_rows = {n}")
        cols = np.ascontiguousarray(self.columns, dtype=np.int64)
        if cols.shape != (p, d):
            raise ExpanderError(f"columns table has shape {cols.shape}, expected {(p, d)}")
        if cols.min() < 0 or cols.max() >= n:
            raise ExpanderError(f"row index outside [0, {n})")
        if d > 1 and np.any(np.diff(cols, axis=1) <= 0):
            raise ExpanderError("each column must list strictly increasing row indices")
        cols = cols.astype(np.uint32)
        cols.setflags(write=False)
        object.__setattr__(self, "n_rows", n)
        object.__setattr__(self, "n_cols", p)
        object.__setattr__(self, "degree", d)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def shape(self) -> tuple:
        return (self.n_rows, self.n_cols)

    def __eq__(self, other):
        if not isinstance(other, BipartiteExpander):
            return NotImplemented
        return (self.shape == other.shape and self.degree == other.degree
                and np.array_equal(self.columns, other.columns))

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def csc(self) -> sp.csc_matrix:
        d, p = self.degree, self.n_cols
        indptr = np.arange(0, p * d + 1, d, dtype=np.int64)
        indices = self.columns.ravel().astype(np.int64)
        mat = sp.csc_matrix((np.ones(p * d), indices, indptr), shape=self.shape)
        mat.has_sorted_indices = True
        return mat

    @cached_property
    def csc_t(self) -> sp.csr_matrix:
        """Transpose view used for adjoint products."""
        return self.csc.T.tocsr()

    def row_counts(self) -> np.ndarray:
        """Number of ones in each row."""
        return np.bincount(self.columns.ravel(), minlength=self.n_rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.columns.astype(np.int64), np.arange(self.n_cols)[:, None]] = 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "format": "EXPD-json",
            "version": FORMAT_VERSION,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "degree": self.degree,
            "seed": self.seed,
            "columns": self.columns.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BipartiteExpander":
        return cls(int(data["n_rows"]), int(data["n_cols"]), int(data["degree"]),
                   np.asarray(data["columns"], dtype=np.int64).reshape(
                       int(data["n_cols"]), int(data["degree"])),
                   int(data.get("seed", 0)))


@dataclass(frozen=True, eq=False)
class TensorExpander:
    """Kronecker square ``base (x) base`` applied without materialization."""

    base: BipartiteExpander

    @property
    def n_rows(self) -> int:
        return self.base.n_rows ** 2

    @property
    def n_cols(self) -> int:
        return self.base.n_cols ** 2

    @property
    def degree(self) -> int:
        return self.base.degree ** 2

    @property
    def shape(self) -> tuple:
        return (self.n_rows, self.n_cols)

    def to_dense(self) -> np.ndarray:
        dense = self.base.to_dense()
        return np.kron(dense, dense)


class ExpansionReport(NamedTuple):
    set_size: int
    epsilon: float
    sets_checked: int
    exhaustive: bool
    worst_set: tuple
    k: int
    min_neighbours: int

    def to_dict(self) -> dict:
        out = self._asdict()
        out["worst_set"] = list(self.worst_set)
        return out


class MeasurementBudget(NamedTuple):
    n: int
    clamped: bool


# -- construction -----------------------------------------------------------

def construct_random(p: int, n: int, d: int, seed: int) -> BipartiteExpander:
    """Draw every column's ``d`` rows uniformly without replacement from ``[0, n)``.

    Uses a partial Fisher-Yates shuffle per column, vectorized across columns
    by recording only the swapped positions.  Identical arguments give a
    bit-identical matrix.
    """
    if p < 1 or n < 1:
        raise ExpanderError(f"invalid shape (n={n}, p={p}): dimensions must be positive")
    if d < 1 or d > n:
        raise ExpanderError(f"invalid degree {d}: need 1 <= d <= n = {n}")
    if n > MAX_ROWS:
        raise ExpanderError(f"n = {n} exceeds the 32-bit index range")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.default_rng(seed)
    # draw position i + U[0, n - i) for step i of the shuffle
    offsets = rng.integers(0, n - np.arange(d), size=(p, d), dtype=np.int64)
    targets = offsets + np.arange(d)
    keys = np.full((p, d), -1, dtype=np.int64)
    vals = np.empty((p, d), dtype=np.int64)
    out = np.empty((p, d), dtype=np.int64)
    rows = np.arange(p)
    for i in range(d):
        tgt = targets[:, i]
        here = _lookup(keys[:, :i], vals[:, :i], np.full(p, i, dtype=np.int64))
        there = _lookup(keys[:, :i], vals[:, :i], tgt)
        out[:, i] = there
        keys[rows, i] = tgt
        vals[rows, i] = here
    out.sort(axis=1)
    return BipartiteExpander(n, p, d, out, seed)


def _lookup(keys: np.ndarray, vals: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Current content of virtual array slot ``pos`` (identity if never written)."""
    if keys.shape[1] == 0:
        return pos.copy()
    hit = keys == pos[:, None]
    any_hit = hit.any(axis=1)
    # latest write wins
    last = keys.shape[1] - 1 - np.argmax(hit[:, ::-1], axis=1)
    return np.where(any_hit, vals[np.arange(len(pos)), last], pos)


def experimental_degree(M: int, g: int) -> int:
    """``ceil(22 * ln(M) / g)``, the degree rule used in the benchmark runs."""
    if M < 2 or g < 1:
        raise ExpanderError(f"need M >= 2 and g >= 1, got M={M}, g={g}")
    return max(1, math.ceil(EXPERIMENTAL_DEGREE_FACTOR * math.log(M) / g))


def required_degree(M: int, k: int | None = None, g: int = 1, epsilon: float | None = None,
                    eta: float | None = None, *, constant: float = 1.0,
                    rule: str = "theory", eta_placement: str = "inside-log") -> int:
    """Left degree sufficient for model expansion with probability ``1 - eta``.

    ``rule="theory"`` returns ``ceil(C * ln(k M / eta) / (g * epsilon))``; with
    ``eta_placement="denominator"`` the alternative ``ln(k M) / (g eta epsilon)``
    form is used instead.  ``rule="experimental"`` ignores ``k``, ``epsilon``
    and ``eta`` and returns :func:`experimental_degree`.  The constant is not
    known in closed form and defaults to 1.
    """
    if rule == "experimental":
        return experimental_degree(M, g)
    if rule != "theory":
        raise ExpanderError(f"unknown degree rule {rule!r}")
    if k is None or epsilon is None or eta is None:
        raise ExpanderError("theory rule needs k, epsilon and eta")
    if M < 2 or not 1 <= k <= M or g < 1:
        raise ExpanderError(f"need M >= 2, 1 <= k <= M, g >= 1; got M={M}, k={k}, g={g}")
    if not 0 < epsilon < 0.5:
        raise ExpanderError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    if not 0 < eta < 1:
        raise ExpanderError(f"eta must lie in (0, 1), got {eta}")
    if constant <= 0:
        raise ExpanderError("constant must be positive")
    if eta_placement == "inside-log":
        value = constant * math.log(k * M / eta) / (g * epsilon)
    elif eta_placement == "denominator":
        value = constant * math.log(k * M) / (g * eta * epsilon)
    else:
        raise ExpanderError(f"unknown eta placement {eta_placement!r}")
    return max(1, math.ceil(value))


def required_measurements(d: int, k: int, g: int, epsilon: float, *,
                          constant: float = 1.0, p: int | None = None) -> MeasurementBudget:
    """``ceil(C * d * k * g / epsilon)`` rows, clamped to ``p`` when given."""
    if d < 1 or k < 1 or g < 1 or constant <= 0:
        raise ExpanderError("d, k, g and the constant must be positive")
    if not 0 < epsilon < 0.5:
        raise ExpanderError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    n = math.ceil(constant * d * k * g / epsilon)
    if p is not None and n >= p:
        warnings.warn(f"required measurements {n} >= p = {p}; clamped to p", stacklevel=2)
        return MeasurementBudget(int(p), True)
    return MeasurementBudget(n, False)


# -- products ---------------------------------------------------------------

def _as_vector(x, length: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (length,):
        raise ExpanderError(f"{what} must have shape ({length},), got {x.shape}")
    return x


def matvec(X: BipartiteExpander, beta) -> np.ndarray:
    """``X @ beta``."""
    return X.csc @ _as_vector(beta, X.n_cols, "beta")


def adjoint_matvec(X: BipartiteExpander, v) -> np.ndarray:
    """``X.T @ v``: column ``c`` sums ``v`` over its ``d`` rows."""
    return X.csc_t @ _as_vector(v, X.n_rows, "v")


def _square_side(length: int, side: int, what: str) -> None:
    if length != side * side:
        raise ExpanderError(f"{what} of length {length} is not {side}^2")


def tensor_matvec(T: TensorExpander, beta) -> np.ndarray:
    """``(B (x) B) vec(Z) = vec(B Z B^T)`` with column-major ``vec``."""
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1:
        raise ExpanderError("beta must be one-dimensional")
    q = T.base.n_cols
    _square_side(beta.size, q, "beta")
    Z = beta.reshape(q, q, order="F")
    B = T.base.csc
    left = B @ Z                       # (sqrt n, sqrt p)
    out = (B @ left.T).T               # B Z B^T
    return np.asarray(out).ravel(order="F")


def tensor_adjoint_matvec(T: TensorExpander, v) -> np.ndarray:
    """``(B (x) B)^T vec(W) = vec(B^T W B)``."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ExpanderError("v must be one-dimensional")
    r = T.base.n_rows
    _square_side(v.size, r, "v")
    W = v.reshape(r, r, order="F")
    Bt = T.base.csc_t
    left = Bt @ W
    out = (Bt @ left.T).T
    return np.asarray(out).ravel(order="F")


# -- expansion certification --------------------------------------------------

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def _group_bitsets(X: BipartiteExpander, model: GroupModel) -> np.ndarray:
    """Packed neighbourhood bitset of every group, shape ``(M, ceil(n/8))``."""
    if model.p != X.n_cols:
        raise ExpanderError(f"model dimension {model.p} != expander columns {X.n_cols}")
    rows = X.columns[model.groups].reshape(model.M, -1).astype(np.int64)
    mask = np.zeros((model.M, X.n_rows), dtype=bool)
    mask[np.arange(model.M)[:, None], rows] = True
    return np.packbits(mask, axis=1)


def _union_sizes(bits: np.ndarray, combos: np.ndarray) -> np.ndarray:
    acc = bits[combos[:, 0]].copy()
    for j in range(1, combos.shape[1]):
        np.bitwise_or(acc, bits[combos[:, j]], out=acc)
    return _POPCOUNT[acc].sum(axis=1)


def _combination_chunks(M: int, k: int, chunk: int):
    it = itertools.combinations(range(M), k)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int64)


def block_seed(seed: int, block: int) -> np.random.Generator:
    """Generator for a fixed-size block of trials; independent of worker count."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, block]))


def _sampled_combos(M: int, k: int, trials: int, seed: int, block: int = 4096):
    for b, start in enumerate(range(0, trials, block)):
        size = min(block, trials - start)
        rng = block_seed(seed, b)
        # k smallest of M uniform keys = uniform k-subset
        keys = rng.random((size, M))
        yield np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1)


def check_expansion(X: BipartiteExpander, model: GroupModel, k: int, mode: str = "exhaustive",
                    trials: int = 10000, seed: int = 0, cap: int = EXHAUSTIVE_CAP,
                    chunk: int = 65536) -> ExpansionReport:
    """Worst expansion over unions of ``k`` groups.

    For every checked ``k``-subset ``S`` of groups the ratio
    ``|Gamma(S)| / (d * k * g)`` is computed; the report's ``epsilon`` is one
    minus the smallest ratio.  ``mode="exhaustive"`` enumerates all
    ``C(M, k)`` subsets and certifies the constant; ``mode="sampled"`` draws
    ``trials`` uniform subsets and only estimates it.
    """
    if not 1 <= k <= model.M:
        raise ExpanderError(f"k = {k} outside [1, M = {model.M}]")
    bits = _group_bitsets(X, model)
    set_size = k * model.g
    edges = X.degree * set_size
    if mode == "exhaustive":
        count = math.comb(model.M, k)
        if count > cap:
            raise ExpansionCapError(count, cap)
        combos = _combination_chunks(model.M, k, chunk)
    elif mode == "sampled":
        if trials < 1:
            raise ExpanderError("sampled mode needs trials >= 1")
        count = trials
        combos = _sampled_combos(model.M, k, trials, seed)
    else:
        raise ExpanderError(f"unknown mode {mode!r}")
    best = None
    best_set: tuple = ()
    for block in combos:
        sizes = _union_sizes(bits, block)
        i = int(np.argmin(sizes))
        if best is None or sizes[i] < best:
            best = int(sizes[i])
            best_set = tuple(int(j) for j in block[i])
    eps = 1.0 - best / edges
    return ExpansionReport(set_size, min(1.0, max(0.0, eps)), count, mode == "exhaustive",
                           best_set, k, best)


def certified_epsilon(X: BipartiteExpander, model: GroupModel, max_groups: int,
                      cap: int = EXHAUSTIVE_CAP) -> float:
    """Largest exhaustive expansion deficit over unions of 1..max_groups groups."""
    max_groups = min(max_groups, model.M)
    total = sum(math.comb(model.M, t) for t in range(1, max_groups + 1))
    if total > cap:
        raise ExpansionCapError(total, cap)
    return max(check_expansion(X, model, t, cap=cap).epsilon for t in range(1, max_groups + 1))


# -- serialization ----------------------------------------------------------

def to_bytes(X: BipartiteExpander) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, X.n_rows, X.n_cols, X.degree, X.seed)
    return header + X.columns.astype("<u4").tobytes()


def from_bytes(data: bytes) -> BipartiteExpander:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, n, p, d, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n < 1 or n > MAX_ROWS:
        raise FormatError(f"invalid n_rows {n}", 6)
    if p < 1:
        raise FormatError(f"invalid n_cols {p}", 14)
    if d < 1 or d > n:
        raise FormatError(f"invalid degree {d} for n_rows {n}", 22)
    body = p * d * 4
    end = _HEADER.size + body
    if len(data) < end:
        raise FormatError(f"truncated body: expected {body} index bytes", len(data))
    if len(data) > end:
        raise FormatError("trailing bytes after index table", end)
    cols = np.frombuffer(data, dtype="<u4", count=p * d, offset=_HEADER.size).astype(np.int64)
    bad = np.flatnonzero(cols >= n)
    if bad.size:
        raise FormatError(f"row index {cols[bad[0]]} >= n_rows {n}", _HEADER.size + 4 * int(bad[0]))
    table = cols.reshape(p, d)
    if d > 1:
        steps = np.diff(table, axis=1)
        bad = np.flatnonzero((steps <= 0).ravel())
        if bad.size:
            c, j = divmod(int(bad[0]), d - 1)
            raise FormatError(f"column {c} indices not strictly ascending",
                              _HEADER.size + 4 * (c * d + j + 1))
    return BipartiteExpander(n, p, d, table, seed)


def serialize(X: BipartiteExpander, path) -> None:
    """Write the binary ``EXPD`` format (``.json`` suffix selects the debug form)."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(X.to_dict()))
    else:
        path.write_bytes(to_bytes(X))


def deserialize(path) -> BipartiteExpander:
    path = Path(path)
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
            return BipartiteExpander.from_dict(data)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed JSON expander: {exc}", 0) from exc
    return from_bytes(path.read_bytes())
