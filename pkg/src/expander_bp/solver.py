"""Matvec-only primal-dual solver for l1 / l2,1 basis pursuit.

Solves::

    minimize    ||beta||_{2,1}   (or ||beta||_1 when no model is given)
    subject to  X beta in C

where ``C`` is ``{y}``, the l2 ball ``{u : ||u - y||_2 <= sigma}`` or the l1
ball ``{u : ||u - y||_1 <= gamma}``.  The iteration is the first-order
primal-dual scheme of Chambolle and Pock with over-relaxation 1::

    v      <- prox_{s F*}(v + s X beta_bar)
    beta+  <- prox_{t G}(beta - t X^T v)
    beta_bar <- 2 beta+ - beta

``F`` is the indicator of ``C`` and ``G`` the norm.  Only ``X`` and ``X^T``
applications are needed, so sparse expanders keep their cheap products.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .block_model import GroupModel, l21_norm
from .expander import BipartiteExpander, TensorExpander, tensor_adjoint_matvec, tensor_matvec

OPNORM_SAFETY = 1.01
WEIGHT_START = 64
KINDS = ("expander", "tensor-expander", "dense-gaussian", "explicit-dense")


class InputError(ValueError):
    """Invalid problem data (shapes, radii, non-finite observations)."""


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """``X`` and ``X^T`` as callables plus a kind tag."""

    shape: tuple
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint_apply: Callable[[np.ndarray], np.ndarray]
    kind: str
    matrix: Optional[object] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown operator kind {self.kind!r}")

    def to_dense(self) -> np.ndarray:
        """Materialize column by column; small operators only."""
        n, p = self.shape
        out = np.empty((n, p))
        e = np.zeros(p)
        for c in range(p):
            e[c] = 1.0
            out[:, c] = self.apply(e)
            e[c] = 0.0
        return out


def expander_operator(X: BipartiteExpander, scale: float = 1.0) -> LinearOperator:
    """Operator for ``scale * X``; use ``scale=1/d`` for the normalized convention."""
    fwd = X.csc if scale == 1.0 else X.csc * scale
    bwd = X.csc_t if scale == 1.0 else X.csc_t * scale
    return LinearOperator(X.shape, fwd.dot, bwd.dot, "expander", fwd)


def tensor_operator(T: TensorExpander, scale: float = 1.0) -> LinearOperator:
    if scale == 1.0:
        return LinearOperator(T.shape, lambda b: tensor_matvec(T, b),
                              lambda v: tensor_adjoint_matvec(T, v), "tensor-expander")
    return LinearOperator(T.shape, lambda b: scale * tensor_matvec(T, b),
                          lambda v: scale * tensor_adjoint_matvec(T, v), "tensor-expander")


def dense_operator(A, kind: str = "explicit-dense") -> LinearOperator:
    A = np.ascontiguousarray(A, dtype=float)
    if A.ndim != 2:
        raise InputError("dense operator needs a 2-D array")
    At = A.T
    return LinearOperator(A.shape, A.dot, At.dot, kind, A)


def make_gaussian(shape, seed: int) -> LinearOperator:
    """Dense ``n x p`` matrix with i.i.d. ``N(0, 1/n)`` entries."""
    n, p = (int(s) for s in shape)
    if n < 1 or p < 1:
        raise InputError(f"invalid shape {(n, p)}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    try:
        A = rng.standard_normal((n, p))
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate dense {n}x{p} Gaussian matrix") from exc
    A *= 1.0 / math.sqrt(n)
    return dense_operator(A, "dense-gaussian")


@dataclass(frozen=True)
class Constraint:
    kind: str = "equality"
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("equality", "l1_ball", "l2_ball"):
            raise InputError(f"unknown constraint {self.kind!r}")
        if not self.radius >= 0 or not math.isfinite(self.radius):
            raise InputError(f"ball radius must be finite and nonnegative, got {self.radius}")
        if self.kind == "equality" and self.radius != 0:
            raise InputError("equality constraint takes no radius")

    @classmethod
    def equality(cls) -> "Constraint":
        return cls("equality", 0.0)

    @classmethod
    def l1_ball(cls, gamma: float) -> "Constraint":
        return cls("l1_ball", float(gamma))

    @classmethod
    def l2_ball(cls, sigma: float) -> "Constraint":
        return cls("l2_ball", float(sigma))


@dataclass(frozen=True, eq=False)
class RecoveryProblem:
    op: LinearOperator
    y: np.ndarray
    model: Optional[GroupModel] = None
    constraint: Constraint = field(default_factory=Constraint.equality)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        n, p = self.op.shape
        if y.shape != (n,):
            raise InputError(f"y has shape {y.shape}, operator expects ({n},)")
        if not np.all(np.isfinite(y)):
            raise InputError("observations contain non-finite values")
        if self.model is not None and self.model.p != p:
            raise InputError(f"model dimension {self.model.p} != operator columns {p}")
        object.__setattr__(self, "y", y)

    def objective(self, beta) -> float:
        if self.model is None:
            return float(np.abs(beta).sum())
        return l21_norm(self.model, beta)


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 50000
    rel_tol: float = 1e-6
    step_ratio: float = 1.0
    norm_estimate_iters: int = 100
    record_trace: bool = False
    time_limit: Optional[float] = None
    seed: int = 0
    adapt_weight: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if not self.rel_tol > 0 or not self.step_ratio > 0:
            raise InputError("rel_tol and step_ratio must be positive")
        if self.norm_estimate_iters < 1:
            raise InputError("norm_estimate_iters must be >= 1")
        if self.time_limit is not None and not self.time_limit > 0:
            raise InputError("time_limit must be positive")


@dataclass
class SolverReport:
    beta_hat: np.ndarray
    iterations: int
    converged: bool
    residual_l2: float
    residual_l1: float
    objective: float
    wall_time: float
    step_change: float
    opnorm: float
    timed_out: bool = False
    dual: Optional[np.ndarray] = None
    trace: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_l2": self.residual_l2,
            "residual_l1": self.residual_l1,
            "objective": self.objective,
            "wall_time": self.wall_time,
            "step_change": self.step_change,
            "opnorm": self.opnorm,
            "timed_out": self.timed_out,
            "trace": self.trace,
        }


def estimate_opnorm(op: LinearOperator, iters: int = 100, seed: int = 0) -> float:
    """Power iteration on ``X^T X``; returns an estimate of ``||X||_2``."""
    if iters < 1:
        raise InputError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        w = op.adjoint_apply(op.apply(x))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        x = w / lam
    return math.sqrt(lam)


def residuals(problem: RecoveryProblem, beta_hat) -> tuple:
    """``(||X beta - y||_1, ||X beta - y||_2)``."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    if beta_hat.shape != (problem.op.shape[1],):
        raise InputError(f"beta has shape {beta_hat.shape}, expected ({problem.op.shape[1]},)")
    r = problem.op.apply(beta_hat) - problem.y
    return float(np.abs(r).sum()), float(np.linalg.norm(r))


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` by sorting."""
    v = np.asarray(v, dtype=float)
    if radius < 0:
        raise InputError("radius must be nonnegative")
    mag = np.abs(v)
    if mag.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = np.sort(mag)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, u.size + 1)
    # difference first: css - radius can round back to css for tiny radii
    hits = np.nonzero((u * ks - css) + radius > 0)[0]
    rho = hits[-1] if hits.size else 0
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(mag - theta, 0.0)


def _constraint_projection(constraint: Constraint, y: np.ndarray) -> Callable:
    r = constraint.radius
    if constraint.kind == "equality":
        return lambda u: y
    if constraint.kind == "l2_ball":
        def proj(u):
            diff = u - y
            nd = np.linalg.norm(diff)
            return u if nd <= r else y + diff * (r / nd)
        return proj
    return lambda u: y + project_l1_ball(u - y, r)


def _zero_feasible(constraint: Constraint, y: np.ndarray) -> bool:
    if constraint.kind == "equality":
        return not np.any(y)
    if constraint.kind == "l2_ball":
        return float(np.linalg.norm(y)) <= constraint.radius
    return float(np.abs(y).sum()) <= constraint.radius


def _prox_factory(model: Optional[GroupModel], p: int) -> Callable:
    """``(b, t) -> prox_{t ||.||}(b)`` for the problem's norm."""
    if model is None or (model.g == 1 and model.unit_weights
                         and np.array_equal(model.groups.ravel(), np.arange(p))):
        def prox(b, t):
            mag = np.abs(b)
            keep = mag > t
            scale = np.zeros_like(mag)
            scale[keep] = 1.0 - t / mag[keep]
            return b * scale
        return prox
    weights = np.asarray(model.weights)
    unit = model.unit_weights
    contiguous = np.array_equal(model.groups.ravel(), np.arange(p))
    M, g = model.M, model.g
    groups = model.groups

    def prox(b, t):
        blocks = b.reshape(M, g) if contiguous else b[groups]
        norms = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))
        thresh = t if unit else t * weights
        keep = norms > thresh
        scale = np.zeros(M)
        scale[keep] = 1.0 - (thresh if unit else thresh[keep]) / norms[keep]
        shrunk = blocks * scale[:, None]
        if contiguous:
            return shrunk.reshape(p)
        out = np.empty(p)
        out[groups] = shrunk
        return out
    return prox


def solve(problem: RecoveryProblem, config: SolverConfig = SolverConfig()) -> SolverReport:
    """Minimize the problem's norm over its constraint set.

    Step sizes are ``tau = r s / L`` and ``sigma = 1 / (r s L)`` where ``L`` is
    1.01 times the power-iteration estimate of ``||X||``, ``r`` is
    ``config.step_ratio`` and ``s = ||y||_2 / sqrt(#groups)`` puts primal and
    dual variables on a common scale (the iterates are then equivariant under
    rescaling ``y`` or ``X``).  With ``adapt_weight`` the ratio ``sigma / tau``
    is re-estimated from the distances travelled by both variables after 64,
    192, 448, ... iterations (geometric mean with the previous value), which
    matters when the dual solution is much larger than the primal one, as
    under l1-ball constraints.  Iteration stops once
    ``||beta+ - beta|| <= rel_tol * ||beta+||`` and the dual step satisfies
    ``||v+ - v|| / sigma <= rel_tol * ||y||``, after ``max_iter`` steps or
    when ``time_limit`` seconds have elapsed.  Non-convergence is reported,
    never raised.
    """
    start = time.perf_counter()
    op, y, model = problem.op, problem.y, problem.model
    n, p = op.shape
    norm = problem.objective

    if _zero_feasible(problem.constraint, y):
        beta = np.zeros(p)
        l1, l2 = float(np.abs(y).sum()), float(np.linalg.norm(y))
        return SolverReport(beta, 0, True, l2, l1, 0.0, time.perf_counter() - start, 0.0,
                            float("nan"), dual=np.zeros(n), trace=[] if config.record_trace else None)

    L = estimate_opnorm(op, config.norm_estimate_iters, config.seed) * OPNORM_SAFETY
    if L == 0.0:
        # X = 0 and 0 is infeasible: nothing can be done
        l1, l2 = float(np.abs(y).sum()), float(np.linalg.norm(y))
        return SolverReport(np.zeros(p), 0, False, l2, l1, 0.0, time.perf_counter() - start,
                            float("inf"), 0.0, dual=np.zeros(n))
    n_groups = model.M if model is not None else p
    scale = float(np.linalg.norm(y)) / math.sqrt(n_groups)
    tau = config.step_ratio * scale / L
    sigma = 1.0 / (config.step_ratio * scale * L)

    prox = _prox_factory(model, p)
    project = _constraint_projection(problem.constraint, y)
    tol = config.rel_tol
    deadline = None if config.time_limit is None else start + config.time_limit
    trace = [] if config.record_trace else None
    # the primal can stall on clamped groups while the dual still moves
    gap_tol = tol * float(np.linalg.norm(y))

    beta = np.zeros(p)
    Xbeta = np.zeros(n)
    Xbar = np.zeros(n)
    v = np.zeros(n)
    # primal weight omega = sigma * L: re-estimated from distances moved at
    # geometrically spaced checkpoints, so it settles after a few updates
    omega = sigma * L
    next_update, interval = WEIGHT_START, WEIGHT_START
    beta_ref, v_ref = beta.copy(), v.copy()
    converged = timed_out = False
    step = float("inf")
    it = 0
    for it in range(1, config.max_iter + 1):
        w = v + sigma * Xbar
        v_new = w - sigma * project(w / sigma)
        dv = v_new - v
        gap = float(np.sqrt(dv @ dv)) / sigma
        v = v_new
        beta_new = prox(beta - tau * op.adjoint_apply(v), tau)
        Xnew = op.apply(beta_new)
        diff = beta_new - beta
        step_abs = float(np.sqrt(diff @ diff))
        nb = float(np.sqrt(beta_new @ beta_new))
        step = step_abs / nb if nb > 0 else float("inf")
        Xbar = 2.0 * Xnew - Xbeta
        beta, Xbeta = beta_new, Xnew
        if config.adapt_weight and it == next_update:
            db, dvv = float(np.linalg.norm(beta - beta_ref)), float(np.linalg.norm(v - v_ref))
            if db > 0 and dvv > 0:
                omega = math.exp(0.5 * math.log(dvv / db) + 0.5 * math.log(omega))
                tau, sigma = 1.0 / (omega * L), omega / L
            beta_ref, v_ref = beta.copy(), v.copy()
            interval *= 2
            next_update += interval
        if trace is not None:
            trace.append((norm(beta), float(np.linalg.norm(Xbeta - y)), step))
        if nb > 0 and step <= tol and gap <= gap_tol:
            converged = True
            break
        if deadline is not None and time.perf_counter() > deadline:
            timed_out = True
            break

    r = Xbeta - y
    return SolverReport(
        beta_hat=beta,
        iterations=it,
        converged=converged,
        residual_l2=float(np.linalg.norm(r)),
        residual_l1=float(np.abs(r).sum()),
        objective=norm(beta),
        wall_time=time.perf_counter() - start,
        step_change=step,
        opnorm=L / OPNORM_SAFETY,
        timed_out=timed_out,
        dual=v,
        trace=trace,
    )


def kkt_violation(problem: RecoveryProblem, report: SolverReport) -> float:
    """Relative distance of ``-X^T v`` from the norm's subdifferential at ``beta_hat``.

    Active groups must satisfy ``-(X^T v)_G = w_G beta_G / ||beta_G||``;
    inactive groups need ``||(X^T v)_G|| <= w_G``.  Returns the largest
    violation divided by the largest weight.
    """
    model = problem.model
    beta = report.beta_hat
    z = -problem.op.adjoint_apply(report.dual)
    if model is None:
        groups = np.arange(beta.size)[:, None]
        weights = np.ones(beta.size)
    else:
        groups, weights = model.groups, model.weights
    bz, zz = beta[groups], z[groups]
    norms = np.linalg.norm(bz, axis=1)
    active = norms > 0
    worst = 0.0
    if np.any(active):
        target = weights[active, None] * bz[active] / norms[active, None]
        worst = float(np.max(np.linalg.norm(zz[active] - target, axis=1)))
    if np.any(~active):
        excess = np.linalg.norm(zz[~active], axis=1) - weights[~active]
        worst = max(worst, float(np.max(np.maximum(excess, 0.0))))
    return worst / float(np.max(weights))
