import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from expander_bp.analysis import (FEASIBILITY_COLUMNS, INFEASIBLE, DomainError,
                                  estimate_expansion_probability, feasibility_csv,
                                  feasibility_grid, feasibility_region, kernel_basis,
                                  kernel_lemma_bound, kernel_ratio, naive_l1_constant,
                                  noise_constant, theorem1_constant, trial_seed, verify_kernel_lemma,
                                  verify_theorem1)
from expander_bp.block_model import GroupModel
from expander_bp.expander import (ExpansionCapError, certified_epsilon, check_expansion,
                                  construct_random)


def test_theorem1_constant_examples():
    assert theorem1_constant(0.02, 10) == pytest.approx(12.0, rel=1e-12)
    assert noise_constant(0.02, 10) == pytest.approx(6.0, rel=1e-12)
    assert theorem1_constant(0.05, 10) == INFEASIBLE
    assert noise_constant(0.05, 10) == INFEASIBLE
    # boundary itself is infeasible
    assert theorem1_constant(1 / 42, 10) == INFEASIBLE or theorem1_constant(1 / 42, 10) > 1e12
    with pytest.raises(DomainError):
        theorem1_constant(0.0, 10)
    with pytest.raises(DomainError):
        theorem1_constant(0.5, 10)


def test_feasibility_region_exact():
    assert feasibility_region(1) == (Fraction(1, 6), Fraction(1, 6))
    assert feasibility_region(10) == (Fraction(1, 42), Fraction(1, 6))
    assert all(isinstance(v, Fraction) for v in feasibility_region(3))
    with pytest.raises(DomainError):
        feasibility_region(0)


def test_naive_constant_limit_and_g1_agreement():
    assert naive_l1_constant(1e-12, 4) == pytest.approx(4.0, rel=1e-9)
    assert naive_l1_constant(0.2, 4) == INFEASIBLE
    for eps in (0.01, 0.05, 0.1, 0.15):
        assert theorem1_constant(eps, 1) == pytest.approx(naive_l1_constant(eps, 1), rel=1e-14)


@given(st.integers(1, 50), st.floats(1e-6, 0.999999))
def test_constant_grows_towards_boundary(g, frac):
    edge = float(feasibility_region(g)[0])
    a, b = frac * edge * 0.5, frac * edge
    ca, cb = theorem1_constant(a, g), theorem1_constant(b, g)
    assert 2.0 <= ca <= cb
    assert kernel_lemma_bound(b, g) < 0.5


def test_constant_blows_up_near_boundary():
    edge = float(feasibility_region(10)[0])
    assert theorem1_constant(edge * (1 - 1e-9), 10) > 1e8


def test_kernel_lemma_bound_values():
    assert kernel_lemma_bound(0.0, 3) == 0.0
    assert kernel_lemma_bound(0.1, 2) == pytest.approx(0.5)
    assert kernel_lemma_bound(0.5, 2) == INFEASIBLE


def test_verify_theorem1_exact_recovery():
    model = GroupModel.consecutive(12, 3)
    beta = np.zeros(12)
    beta[:3] = [1.0, -2.0, 0.5]
    cert = verify_theorem1(model, 1, 0.02, beta, beta + 1e-12)
    assert cert.feasible and cert.satisfied and cert.tail == 0.0
    bad = verify_theorem1(model, 1, 0.02, beta, beta + 1e-3)
    assert not bad.satisfied
    vac = verify_theorem1(model, 1, 0.3, beta, beta + 1.0)
    assert vac.satisfied and not vac.feasible
    assert vac.to_dict()["constant_c1"] == "infeasible"


def test_verify_theorem1_noise_term():
    model = GroupModel.consecutive(6, 2)
    beta = np.ones(6)
    cert = verify_theorem1(model, 3, 0.05, beta, beta + 0.01, gamma=1.0)
    assert cert.predicted_error == pytest.approx(noise_constant(0.05, 2))
    assert cert.satisfied
    with pytest.raises(DomainError):
        verify_theorem1(model, 3, 0.05, beta, beta, gamma=-1.0)


@pytest.mark.parametrize("seed", range(5))
def test_kernel_basis_oracle(seed):
    rng = np.random.default_rng(seed)
    A = rng.integers(0, 2, (6, 15)).astype(float)
    A[5] = A[0] + A[1]  # rank deficiency
    K = kernel_basis(A)
    rank = np.linalg.matrix_rank(A)
    assert K.shape == (15, 15 - rank)
    np.testing.assert_allclose(A @ K, 0, atol=1e-12)
    np.testing.assert_allclose(K.T @ K, np.eye(K.shape[1]), atol=1e-12)


def test_kernel_lemma_full_rank_is_vacuous():
    model = GroupModel.consecutive(4, 2)
    rep = verify_kernel_lemma(np.eye(4), model, 1, 0.01, trials=10)
    assert rep.kernel_dim == 0 and rep.vacuous and rep.violations == 0


def test_kernel_ratio():
    model = GroupModel.consecutive(6, 2)
    assert kernel_ratio(model, np.zeros(6), 1) == 0.0
    assert kernel_ratio(model, [3, 4, 0, 0, 0, 0], 1) == 1.0
    assert kernel_ratio(model, [1, 0, 1, 0, 1, 0], 2) == pytest.approx(2 / 3)


def test_kernel_lemma_small_config():
    X = construct_random(40, 20, 4, 0)
    model = GroupModel.consecutive(40, 4)
    eps = check_expansion(X, model, 2).epsilon
    rep = verify_kernel_lemma(X, model, 2, eps, trials=1000, seed=1)
    assert rep.kernel_dim >= 20 and rep.trials == 1000
    assert rep.violations == 0
    assert rep.max_residual <= 1e-10
    assert 0 < rep.max_ratio <= 1


def test_kernel_lemma_report_consistency():
    # nontrivial kernels force overlapping columns, so eps lands outside the finite range
    X = construct_random(16, 12, 6, 1)
    model = GroupModel.consecutive(16, 2)
    eps = certified_epsilon(X, model, 2)
    rep = verify_kernel_lemma(X, model, 1, eps, trials=500)
    assert rep.kernel_dim == 16 - np.linalg.matrix_rank(X.to_dense())
    assert rep.vacuous == math.isinf(kernel_lemma_bound(eps, 2))
    assert rep.violations == 0 and rep.max_ratio <= 1


def test_expansion_probability_set_count():
    est = estimate_expansion_probability(5, 2, 2, 2, 40, 0.15, trials=3, seed=0)
    assert est.sets_per_trial == 15 == math.comb(5, 1) + math.comb(5, 2)
    assert est.trials == 3
    sampled = estimate_expansion_probability(5, 2, 2, 2, 40, 0.15, trials=3, seed=0,
                                             mode="per-matrix-sampled", samples=50)
    assert sampled.sets_per_trial == 100


def test_expansion_probability_saturation_and_errors():
    # d == n: every column hits every row, so unions never expand beyond n
    full = estimate_expansion_probability(5, 2, 2, 6, 6, 0.15, trials=5, seed=0)
    assert full.successes == 0
    easy = estimate_expansion_probability(5, 1, 2, 1, 10**6, 0.15, trials=5, seed=0)
    assert easy.estimate == 1.0
    with pytest.raises(DomainError):
        estimate_expansion_probability(5, 6, 2, 2, 40, 0.15, trials=1)
    with pytest.raises(DomainError):
        estimate_expansion_probability(5, 2, 2, 2, 40, 0.15, trials=1, mode="bogus")
    with pytest.raises(ExpansionCapError):
        estimate_expansion_probability(40, 10, 2, 2, 40, 0.15, trials=1, cap=1000)


def test_expansion_probability_frozen_values():
    # regression data computed with this estimator
    got = [estimate_expansion_probability(5, 2, 2, d, 800, 0.15, 200, seed=1).successes
           for d in (1, 2, 4, 8, 16)]
    assert got == [194, 199, 200, 200, 200]
    assert got == sorted(got)
    by_n = [estimate_expansion_probability(5, 2, 2, 2, n, 0.15, 200, seed=1).successes
            for n in (100, 200, 400, 800)]
    assert by_n == [155, 176, 195, 199]


def test_expansion_probability_matches_direct_check():
    M, g, k, d, n, eps = 5, 2, 2, 3, 30, 0.2
    est = estimate_expansion_probability(M, k, g, d, n, eps, trials=20, seed=7)
    model = GroupModel.consecutive(M * g, g)
    direct = 0
    for t in range(20):
        X = construct_random(M * g, n, d, trial_seed(7, t))
        dense = X.to_dense()
        ok = True
        for size in range(1, k + 1):
            for S in itertools.combinations(range(M), size):
                cols = model.groups[list(S)].ravel()
                if np.count_nonzero(dense[:, cols].any(axis=1)) < (1 - eps) * d * size * g:
                    ok = False
        direct += ok
    assert est.successes == direct


def test_trial_seed_is_stable():
    assert trial_seed(1, 0) == trial_seed(1, 0)
    assert trial_seed(1, 0) != trial_seed(1, 1)
    assert 0 <= trial_seed(2**70, 3) < 2**64


def test_feasibility_grid_csv():
    rows = feasibility_grid([0.01, 0.05, 0.2], [1, 10])
    text = feasibility_csv(rows)
    header = text.splitlines()[0].split(",")
    assert tuple(header) == FEASIBILITY_COLUMNS
    assert len(text.splitlines()) == 7
    by_key = {(r["epsilon"], r["g"]): r for r in rows}
    assert by_key[(0.01, 10)]["ours_feasible"] == 1
    assert by_key[(0.05, 10)]["ours_feasible"] == 0
    assert by_key[(0.2, 1)]["naive_c"] == INFEASIBLE
    assert "inf" in text
