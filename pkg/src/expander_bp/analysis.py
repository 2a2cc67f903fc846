"""Closed-form recovery bounds and Monte Carlo checks of the underlying theory.

The bounds concern an expander ``X`` whose unions of ``k`` groups expand
with constant ``eps`` (``|Gamma(S)| >= (1 - eps) d |S|``):

* recovery constant ``C1 = 2 / (1 - 4 eps g / (1 - 2 eps))``,
* noise constant ``1 / (1 - 4 eps g / (1 - 2 eps))`` multiplying the l1
  residual ``gamma = ||X (beta* - beta_hat)||_1``,
* kernel inequality: for ``X z = 0`` the best ``k`` groups of ``z`` carry at
  most ``2 eps g / (1 - 2 eps)`` of its l2,1 mass,
* the l1 route, ``2 sqrt(g) / (1 - 4 eps / (1 - 2 eps))``, for comparison.

Bounds are finite only for ``eps < 1 / (2 (1 + 2 g))`` (group bound) or
``eps < 1/6`` (l1 route); outside that range they are reported as
:data:`INFEASIBLE` (``math.inf``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .block_model import GroupModel, best_k_block_support, group_norms, l21_norm, tail_l21
from .expander import (EXHAUSTIVE_CAP, BipartiteExpander, ExpansionCapError, check_expansion,
                       construct_random)

INFEASIBLE = math.inf


class DomainError(ValueError):
    """Parameter outside the range where a bound is defined."""


def _check_eps(epsilon: float, g: int) -> Fraction:
    if not 0 < epsilon < 0.5:
        raise DomainError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    if g < 1:
        raise DomainError(f"g must be >= 1, got {g}")
    return Fraction(epsilon)


def feasibility_region(g: int) -> tuple:
    """Largest admissible ``eps`` for the group bound and the l1 route, as exact fractions."""
    if g < 1:
        raise DomainError(f"g must be >= 1, got {g}")
    return Fraction(1, 2 * (1 + 2 * g)), Fraction(1, 6)


def _group_denominator(eps: Fraction, g: int) -> Fraction:
    # 1 - 4 eps g / (1 - 2 eps), kept exact so the sign test is reliable
    return 1 - 4 * eps * g / (1 - 2 * eps)


def theorem1_constant(epsilon: float, g: int) -> float:
    """``2 / (1 - 4 eps g / (1 - 2 eps))`` or :data:`INFEASIBLE`."""
    den = _group_denominator(_check_eps(epsilon, g), g)
    return float(2 / den) if den > 0 else INFEASIBLE


def noise_constant(epsilon: float, g: int) -> float:
    """``1 / (1 - 4 eps g / (1 - 2 eps))`` or :data:`INFEASIBLE`."""
    den = _group_denominator(_check_eps(epsilon, g), g)
    return float(1 / den) if den > 0 else INFEASIBLE


def naive_l1_constant(epsilon: float, g: int) -> float:
    """``2 sqrt(g) / (1 - 4 eps / (1 - 2 eps))`` or :data:`INFEASIBLE` for ``eps >= 1/6``."""
    den = _group_denominator(_check_eps(epsilon, g), 1)
    return 2.0 * math.sqrt(g) * float(1 / den) if den > 0 else INFEASIBLE


def kernel_lemma_bound(epsilon: float, g: int) -> float:
    """``2 eps g / (1 - 2 eps)``; :data:`INFEASIBLE` when ``eps`` is outside ``(0, 1/2)``."""
    if not 0 <= epsilon < 0.5:
        return INFEASIBLE
    return 2.0 * epsilon * g / (1.0 - 2.0 * epsilon)


@dataclass
class BoundCertificate:
    """Outcome of checking one recovery against the group bound."""

    epsilon: float
    g: int
    k: int
    feasible: bool
    constant_c1: float
    noise_constant: float
    tail: float
    gamma: float
    predicted_error: float
    measured_error: float
    satisfied: bool
    certified: bool = True

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("constant_c1", "noise_constant", "predicted_error"):
            if math.isinf(out[key]):
                out[key] = "infeasible"
        return out


def verify_theorem1(model: GroupModel, k: int, epsilon_certified: float, beta_star, beta_hat,
                    gamma: float = 0.0, *, certified: bool = True,
                    atol: Optional[float] = None) -> BoundCertificate:
    """Compare ``||beta* - beta_hat||_{2,1}`` with ``C1 * tail + noise * gamma``.

    Parameters
    ----------
    model : GroupModel
    k : int
        Group sparsity level used for the best-``k`` tail.
    epsilon_certified : float
        Expansion constant of the operator.  Pass ``certified=False`` when it
        was only estimated; such certificates carry no pass/fail weight.
    beta_star, beta_hat : ndarray
        Reference vector and recovered vector.
    gamma : float
        ``||X (beta* - beta_hat)||_1`` for the unscaled 0/1 matrix; zero for
        exact equality constraints.
    atol : float, optional
        Absolute slack for numerical solver error.  Defaults to
        ``1e-9 * max(1, ||beta*||_{2,1})``.

    Returns
    -------
    BoundCertificate
        ``satisfied`` is true when the bound is infeasible (vacuous) or
        ``measured <= predicted + atol``.
    """
    if gamma < 0:
        raise DomainError("gamma must be nonnegative")
    beta_star = np.asarray(beta_star, dtype=float)
    beta_hat = np.asarray(beta_hat, dtype=float)
    measured = l21_norm(model, beta_star - beta_hat)
    tail = tail_l21(model, beta_star, k)
    if 0 < epsilon_certified < 0.5:
        c1 = theorem1_constant(epsilon_certified, model.g)
        nc = noise_constant(epsilon_certified, model.g)
    elif epsilon_certified == 0:
        # perfect expansion: limit of the constants
        c1, nc = 2.0, 1.0
    else:
        c1 = nc = INFEASIBLE
    feasible = not math.isinf(c1)
    if feasible:
        predicted = c1 * tail + nc * gamma
    else:
        predicted = INFEASIBLE
    if atol is None:
        atol = 1e-9 * max(1.0, l21_norm(model, beta_star))
    satisfied = (not feasible) or measured <= predicted + atol
    return BoundCertificate(float(epsilon_certified), model.g, int(k), feasible, c1, nc, tail,
                            float(gamma), predicted, measured, bool(satisfied), certified)


def kernel_basis(A, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``ker(A)``, shape ``(p, p - rank)``.

    Row reduction with partial pivoting finds the pivot columns; each free
    column yields one kernel vector by back substitution.  The vectors are
    then orthonormalized with QR.
    """
    A = np.array(A, dtype=float)
    n, p = A.shape
    R = A.copy()
    pivots = []
    row = 0
    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    for col in range(p):
        if row == n:
            break
        i = row + int(np.argmax(np.abs(R[row:, col])))
        if abs(R[i, col]) <= tol * scale:
            continue
        R[[row, i]] = R[[i, row]]
        R[row] /= R[row, col]
        others = np.arange(n) != row
        R[others] -= np.outer(R[others, col], R[row])
        pivots.append(col)
        row += 1
    free = [c for c in range(p) if c not in set(pivots)]
    if not free:
        return np.zeros((p, 0))
    basis = np.zeros((p, len(free)))
    for j, c in enumerate(free):
        basis[c, j] = 1.0
        for r, pc in enumerate(pivots):
            basis[pc, j] = -R[r, c]
    q, _ = np.linalg.qr(basis)
    return q


@dataclass
class KernelLemmaReport:
    kernel_dim: int
    trials: int
    bound: float
    max_ratio: float
    violations: int
    max_residual: float
    vacuous: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        if math.isinf(out["bound"]):
            out["bound"] = "infeasible"
        return out


def verify_kernel_lemma(X, model: GroupModel, k: int, epsilon_certified: float,
                        trials: int = 1000, seed: int = 0) -> KernelLemmaReport:
    """Sample kernel vectors of ``X`` and test the best-``k`` mass inequality.

    ``X`` is a :class:`BipartiteExpander` or a dense array (at most a few
    hundred columns).  Each sample ``z`` is a Gaussian combination of an
    orthonormal kernel basis; its residual ``||X z||_2 / ||z||_2`` must stay
    below ``1e-10``.  The report is vacuous when the kernel is trivial or the
    bound is not finite.
    """
    A = X.to_dense().astype(float) if isinstance(X, BipartiteExpander) else np.asarray(X, float)
    if A.shape[1] != model.p:
        raise DomainError(f"matrix has {A.shape[1]} columns, model expects {model.p}")
    bound = kernel_lemma_bound(epsilon_certified, model.g)
    basis = kernel_basis(A)
    dim = basis.shape[1]
    if dim == 0:
        return KernelLemmaReport(0, 0, bound, 0.0, 0, 0.0, True)
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((dim, trials))
    Z = basis @ coeffs
    Z /= np.linalg.norm(Z, axis=0)
    residual = float(np.max(np.linalg.norm(A @ Z, axis=0)))
    if residual > 1e-10:
        raise ArithmeticError(f"kernel residual {residual:.3e} exceeds 1e-10")
    norms = np.linalg.norm(Z[model.groups], axis=1)  # (M, trials)
    top = np.sort(norms, axis=0)[::-1][:k].sum(axis=0)
    ratios = top / norms.sum(axis=0)
    violations = int(np.sum(ratios > bound + 1e-12))
    return KernelLemmaReport(dim, trials, bound, float(ratios.max()), violations, residual,
                             math.isinf(bound))


def kernel_ratio(model: GroupModel, z, k: int) -> float:
    """Fraction of ``||z||_{2,1}`` (unit weights) held by the best ``k`` groups."""
    norms = group_norms(model, z)
    total = norms.sum()
    if total == 0:
        return 0.0
    S = best_k_block_support(GroupModel(model.p, model.groups), z, k)
    return float(norms[list(S)].sum() / total)


@dataclass
class ExpansionProbabilityEstimate:
    M: int
    k: int
    g: int
    d: int
    n: int
    epsilon: float
    mode: str
    trials: int
    successes: int
    sets_per_trial: int
    estimate: float
    target: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def trial_seed(seed: int, trial: int) -> int:
    """64-bit seed for one Monte Carlo trial, independent of worker layout."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, trial]).generate_state(
        1, np.uint64)[0])


def estimate_expansion_probability(M: int, k: int, g: int, d: int, n: int, epsilon: float,
                                   trials: int, seed: int = 0,
                                   mode: str = "per-matrix-exhaustive", *,
                                   samples: int = 1000, eta: Optional[float] = None,
                                   cap: int = EXHAUSTIVE_CAP) -> ExpansionProbabilityEstimate:
    """Fraction of random expanders in which every union of ``t <= k`` groups expands.

    A union ``S`` expands when ``|Gamma(S)| >= (1 - epsilon) d |S|``.  The
    exhaustive mode checks all ``sum_t C(M, t)`` unions per matrix; the
    sampled mode checks ``samples`` random unions per ``t``.

    The analytic argument bounds the failure probability by a union bound,
    ``sum_t exp(psi(d, t, eps))`` with
    ``psi = M H(t/M) - eps d t g log(mu eps n / (d t g))`` and ``H`` the
    natural entropy (``H(x) < -x log x + x``).  The constants ``mu`` and
    ``C~`` are unspecified, so ``psi`` only serves as a plotting aid
    (:func:`psi`); it is not used here.
    """
    if not 1 <= k <= M:
        raise DomainError(f"k = {k} outside [1, M = {M}]")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if not 0 <= epsilon < 1:
        raise DomainError("epsilon must lie in [0, 1)")
    model = GroupModel.consecutive(M * g, g)
    if mode == "per-matrix-exhaustive":
        sets = sum(math.comb(M, t) for t in range(1, k + 1))
        if sets > cap:
            raise ExpansionCapError(sets, cap)
    elif mode == "per-matrix-sampled":
        sets = k * samples
    else:
        raise DomainError(f"unknown mode {mode!r}")
    successes = 0
    for trial in range(trials):
        X = construct_random(M * g, n, d, trial_seed(seed, trial))
        ok = True
        for t in range(1, k + 1):
            if mode == "per-matrix-exhaustive":
                rep = check_expansion(X, model, t, "exhaustive", cap=cap)
            else:
                rep = check_expansion(X, model, t, "sampled", trials=samples,
                                      seed=trial_seed(seed, trial))
            # integer form of |Gamma| >= (1 - eps) d t g, robust to rounding
            if rep.min_neighbours < (1.0 - epsilon) * d * t * g - 1e-9:
                ok = False
                break
        successes += ok
    return ExpansionProbabilityEstimate(M, k, g, d, n, float(epsilon), mode, trials, successes,
                                        sets, successes / trials,
                                        None if eta is None else 1.0 - eta)


def entropy(x: float) -> float:
    """Natural-log binary entropy."""
    if x <= 0 or x >= 1:
        return 0.0
    return -x * math.log(x) - (1 - x) * math.log(1 - x)


def psi(d: int, t: int, epsilon: float, M: int, g: int, n: int, mu: float = 1.0) -> float:
    """Exponent of the per-level failure term in the union bound."""
    return M * entropy(t / M) - epsilon * d * t * g * math.log(mu * epsilon * n / (d * t * g))


FEASIBILITY_COLUMNS = ("epsilon", "g", "ours_feasible", "c1", "naive_c", "psi_value")


def feasibility_grid(epsilons, gs, *, d: int = 8, t: int = 1, M: int = 100, n: int = 1000,
                     mu: float = 1.0) -> list:
    """Rows comparing the group constant with the l1-route constant over a grid.

    ``psi_value`` is evaluated at ``(d, t, M, n, mu)``.  Infeasible constants
    are written as ``inf``.
    """
    rows = []
    for g in gs:
        for eps in epsilons:
            c1 = theorem1_constant(eps, g)
            rows.append({
                "epsilon": eps,
                "g": g,
                "ours_feasible": int(not math.isinf(c1)),
                "c1": c1,
                "naive_c": naive_l1_constant(eps, g),
                "psi_value": psi(d, t, eps, M, g, n, mu),
            })
    return rows


def feasibility_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FEASIBILITY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: repr(float(v)) if isinstance(v, float) else v
                         for key, v in row.items()})
    return buf.getvalue()
