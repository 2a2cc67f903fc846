"""Non-overlapping block-sparse models and the l2,1 geometry on top of them.

A :class:`GroupModel` partitions ``[0, p)`` into ``M`` disjoint groups of equal
size ``g``.  Everything here works on the ``(M, g)`` index table, so a vector
``beta`` is viewed group-wise as ``beta[model.groups]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for malformed group models or mismatched shapes."""


@dataclass(frozen=True)
class GroupModel:
    """Partition of ``[0, p)`` into ``M`` equal-size groups.

    Parameters
    ----------
    p : int
        Ambient dimension.
    groups : array_like, shape (M, g)
        Index lists, one row per group.  Must form an exact partition.
    weights : array_like, shape (M,), optional
        Strictly positive group weights.  Defaults to all ones.
    """

    p: int
    groups: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        rows = self.groups
        if not isinstance(rows, np.ndarray):
            rows = list(rows)
            sizes = {len(r) for r in rows}
            if len(sizes) > 1:
                ref = len(rows[0])
                bad = next(i for i, r in enumerate(rows) if len(r) != ref)
                raise ModelError(
                    f"group {bad} has size {len(rows[bad])}, expected {ref}; "
                    "only equal-size groups are supported")
        groups = np.array(rows, dtype=np.int64)
        if groups.ndim != 2 or groups.shape[0] == 0 or groups.shape[1] == 0:
            raise ModelError("groups must be a non-empty (M, g) table")
        M, g = groups.shape
        p = int(self.p)
        if M * g != p:
            raise ModelError(f"M*g = {M}*{g} = {M * g} does not equal p = {p}")
        flat = groups.ravel()
        if flat.min() < 0 or flat.max() >= p:
            raise ModelError(f"group indices must lie in [0, {p})")
        counts = np.bincount(flat, minlength=p)
        if np.any(counts != 1):
            dup = int(np.flatnonzero(counts > 1)[0]) if np.any(counts > 1) else None
            miss = int(np.flatnonzero(counts == 0)[0])
            if dup is not None:
                raise ModelError(f"index {dup} appears in more than one group")
            raise ModelError(f"index {miss} is not covered by any group")
        if self.weights is None:
            weights = np.ones(M)
        else:
            weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if weights.shape != (M,):
                raise ModelError(f"expected {M} weights, got {weights.size}")
            if not np.all(weights > 0):
                raise ModelError("group weights must be strictly positive")
        groups.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def consecutive(cls, p: int, g: int, weights=None) -> "GroupModel":
        """``p // g`` blocks of ``g`` consecutive indices."""
        if g < 1 or p < 1 or p % g:
            raise ModelError(f"p = {p} is not a positive multiple of g = {g}")
        return cls(p, np.arange(p).reshape(p // g, g), weights)

    @property
    def M(self) -> int:
        return self.groups.shape[0]

    @property
    def g(self) -> int:
        return self.groups.shape[1]

    @property
    def unit_weights(self) -> bool:
        return bool(np.all(self.weights == 1.0))

    def group_of(self) -> np.ndarray:
        """Array mapping each coordinate to its group index."""
        owner = np.empty(self.p, dtype=np.int64)
        owner[self.groups.ravel()] = np.repeat(np.arange(self.M), self.g)
        return owner

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "g": self.g,
            "M": self.M,
            "groups": self.groups.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroupModel":
        if "groups" not in data:
            return cls.consecutive(int(data["p"]), int(data["g"]), data.get("weights"))
        model = cls(int(data["p"]), data["groups"], data.get("weights"))
        for key in ("g", "M"):
            if key in data and int(data[key]) != getattr(model, key):
                raise ModelError(f"declared {key}={data[key]} disagrees with groups")
        return model

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "GroupModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BlockSupport:
    """Sorted set of group indices."""

    group_indices: tuple

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.group_indices))
        if len(set(idx)) != len(idx):
            raise ModelError("duplicate group index in support")
        if idx and idx[0] < 0:
            raise ModelError("negative group index in support")
        object.__setattr__(self, "group_indices", idx)

    def __len__(self):
        return len(self.group_indices)

    def __iter__(self):
        return iter(self.group_indices)

    def complement(self, M: int) -> "BlockSupport":
        chosen = set(self.group_indices)
        return BlockSupport(tuple(i for i in range(M) if i not in chosen))


def _check_vector(model: GroupModel, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.p,):
        raise ModelError(f"expected vector of length {model.p}, got shape {beta.shape}")
    return beta


def _check_k(model: GroupModel, k: int) -> int:
    if k < 0 or k > model.M:
        raise ModelError(f"k = {k} outside [0, M = {model.M}]")
    return int(k)


def _row_norms(blocks: np.ndarray) -> np.ndarray:
    # scale by the row maximum: avoids underflow and gives |x| exactly when g == 1
    top = np.max(np.abs(blocks), axis=1)
    safe = np.where(top > 0, top, 1.0)
    return top * np.sqrt(np.sum((blocks / safe[:, None]) ** 2, axis=1))


def group_norms(model: GroupModel, beta) -> np.ndarray:
    """Unweighted Euclidean norm of every group, shape ``(M,)``."""
    beta = _check_vector(model, beta)
    return _row_norms(beta[model.groups])


def l21_norm(model: GroupModel, beta) -> float:
    """Weighted sum of group Euclidean norms."""
    # np.sum keeps the g == 1 case bitwise equal to np.abs(beta).sum()
    return float(np.sum(model.weights * group_norms(model, beta)))


def best_k_block_support(model: GroupModel, beta, k: int) -> BlockSupport:
    """The ``k`` groups with the largest weighted norms.

    Because groups are disjoint, this minimizes ``||beta - beta_S||_{2,1}``
    over all ``k``-group supports ``S``.  Ties go to the lower group index.
    """
    k = _check_k(model, k)
    scores = model.weights * group_norms(model, beta)
    # stable sort on -score keeps lower indices first among equals
    order = np.argsort(-scores, kind="stable")
    return BlockSupport(tuple(order[:k].tolist()))


def support_mask(model: GroupModel, S: Iterable[int]) -> np.ndarray:
    idx = list(S.group_indices if isinstance(S, BlockSupport) else S)
    if idx and (min(idx) < 0 or max(idx) >= model.M):
        raise ModelError(f"support index outside [0, {model.M})")
    mask = np.zeros(model.p, dtype=bool)
    if idx:
        mask[model.groups[idx].ravel()] = True
    return mask


def restrict(model: GroupModel, beta, S) -> np.ndarray:
    """Copy of ``beta`` zeroed outside the union of the groups in ``S``."""
    beta = _check_vector(model, beta)
    return np.where(support_mask(model, S), beta, 0.0)


def group_soft_threshold(model: GroupModel, beta, tau: float) -> np.ndarray:
    """Proximal operator of ``tau * ||.||_{2,1}``.

    Each group is scaled by ``max(0, 1 - tau * w / ||beta_G||)``; groups whose
    norm does not exceed ``tau * w`` (including all-zero groups) map to zero.
    """
    if tau < 0:
        raise ModelError(f"threshold must be nonnegative, got {tau}")
    beta = _check_vector(model, beta)
    return _group_shrink(beta, model.groups, tau * model.weights)


def _group_shrink(beta: np.ndarray, groups: np.ndarray, thresh) -> np.ndarray:
    blocks = beta[groups]
    norms = _row_norms(blocks)
    keep = norms > thresh
    scale = np.zeros_like(norms)
    scale[keep] = 1.0 - (np.broadcast_to(thresh, norms.shape)[keep] / norms[keep])
    out = np.empty_like(beta)
    out[groups] = blocks * scale[:, None]
    return out


def soft_threshold(beta, tau: float) -> np.ndarray:
    """Scalar soft-thresholding, the prox of ``tau * ||.||_1``."""
    if tau < 0:
        raise ModelError(f"threshold must be nonnegative, got {tau}")
    beta = np.asarray(beta, dtype=float)
    mag = np.abs(beta)
    keep = mag > tau
    scale = np.zeros_like(mag)
    # same shrink formula as the group prox, so g == 1 agrees bit for bit
    scale[keep] = 1.0 - tau / mag[keep]
    return beta * scale


def is_k_block_sparse(model: GroupModel, beta, k: int) -> bool:
    """True iff at most ``k`` groups carry a nonzero entry."""
    beta = _check_vector(model, beta)
    active = np.any(beta[model.groups] != 0, axis=1)
    return int(active.sum()) <= k


def tail_l21(model: GroupModel, beta, k: int) -> float:
    """``||beta - beta_{best k groups}||_{2,1}``."""
    S = best_k_block_support(model, beta, k)
    return l21_norm(model, beta - restrict(model, beta, S))


def random_block_sparse(model: GroupModel, k: int, rng: np.random.Generator,
                        kind: str = "gaussian", normalize: bool = True) -> np.ndarray:
    """Plant a ``k``-block-sparse vector on uniformly random groups.

    ``kind`` is ``"gaussian"`` for N(0,1) entries or ``"sign"`` for +-1
    entries.  With ``normalize`` the result has unit Euclidean norm.
    """
    k = _check_k(model, k)
    chosen = np.sort(rng.choice(model.M, size=k, replace=False))
    beta = np.zeros(model.p)
    idx = model.groups[chosen].ravel()
    if kind == "gaussian":
        beta[idx] = rng.standard_normal(idx.size)
    elif kind in ("sign", "bernoulli"):
        beta[idx] = rng.choice([-1.0, 1.0], size=idx.size)
    else:
        raise ModelError(f"unknown signal kind {kind!r}")
    if normalize and k:
        beta /= np.linalg.norm(beta)
    return beta


__all__: Sequence[str] = [
    "BlockSupport",
    "GroupModel",
    "ModelError",
    "best_k_block_support",
    "group_norms",
    "group_soft_threshold",
    "is_k_block_sparse",
    "l21_norm",
    "random_block_sparse",
    "restrict",
    "soft_threshold",
    "support_mask",
    "tail_l21",
]
