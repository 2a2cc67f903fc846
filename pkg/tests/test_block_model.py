import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expander_bp.block_model import (BlockSupport, GroupModel, ModelError, best_k_block_support,
                                     group_norms, group_soft_threshold, is_k_block_sparse,
                                     l21_norm, random_block_sparse, restrict, soft_threshold,
                                     support_mask, tail_l21)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_l21_norm_examples():
    model = GroupModel.consecutive(6, 2)
    assert l21_norm(model, [3, 4, 0, 0, 0, 0]) == 5.0
    assert l21_norm(model, np.zeros(6)) == 0.0


def test_weighted_norm():
    model = GroupModel.consecutive(4, 2, weights=[2.0, 0.5])
    assert l21_norm(model, [3, 4, 0, 1]) == pytest.approx(10.5)


@given(arrays(float, 12, elements=finite))
def test_g1_norm_equals_l1_exactly(beta):
    model = GroupModel.consecutive(12, 1)
    assert l21_norm(model, beta) == float(np.abs(beta).sum())


@given(arrays(float, 12, elements=finite), st.floats(0, 100))
def test_g1_prox_equals_scalar_soft_threshold_exactly(beta, tau):
    model = GroupModel.consecutive(12, 1)
    np.testing.assert_array_equal(group_soft_threshold(model, beta, tau), soft_threshold(beta, tau))


@given(arrays(float, 12, elements=finite), arrays(float, 12, elements=finite), finite)
def test_l21_is_a_norm(a, b, c):
    model = GroupModel.consecutive(12, 3)
    na, nb = l21_norm(model, a), l21_norm(model, b)
    assert l21_norm(model, a + b) <= na + nb + 1e-9 * (1 + na + nb)
    assert l21_norm(model, c * a) == pytest.approx(abs(c) * na, rel=1e-12, abs=1e-12)


@given(arrays(float, 12, elements=finite))
def test_l21_sandwich(beta):
    model = GroupModel.consecutive(12, 3)
    top = np.abs(beta).max()
    if top == 0:
        assert l21_norm(model, beta) == 0
        return
    beta = beta / top  # compare on a common scale to keep squares representable
    l2 = np.linalg.norm(beta)
    val = l21_norm(model, beta)
    assert l2 <= val * (1 + 1e-12)
    assert val <= np.sqrt(model.M) * l2 * (1 + 1e-12)


def test_partition_errors():
    with pytest.raises(ModelError, match="more than one group"):
        GroupModel(4, [[0, 1], [1, 2]])
    with pytest.raises(ModelError, match="does not equal"):
        GroupModel(5, [[0, 1], [2, 3]])
    with pytest.raises(ModelError, match="group 1 has size 1"):
        GroupModel(3, [[0, 1], [2]])
    with pytest.raises(ModelError, match="positive"):
        GroupModel.consecutive(4, 2, weights=[1.0, 0.0])


def test_non_contiguous_groups_and_json(tmp_path):
    model = GroupModel(4, [[0, 2], [1, 3]], weights=[1.0, 2.0])
    path = tmp_path / "m.json"
    model.save_json(path)
    back = GroupModel.load_json(path)
    np.testing.assert_array_equal(back.groups, model.groups)
    np.testing.assert_array_equal(back.weights, model.weights)
    short = GroupModel.from_dict({"p": 6, "g": 3})
    assert (short.M, short.g) == (2, 3)
    np.testing.assert_array_equal(model.group_of(), [0, 1, 0, 1])


def test_best_k_tie_and_full():
    model = GroupModel.consecutive(6, 2)
    beta = np.array([3.0, 4.0, 0, 0, 0, 5.0])
    assert best_k_block_support(model, beta, 1).group_indices == (0,)
    assert best_k_block_support(model, beta, 3).group_indices == (0, 1, 2)
    with pytest.raises(ModelError):
        best_k_block_support(model, beta, 4)


@pytest.mark.parametrize("seed", range(20))
def test_best_k_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    model = GroupModel.consecutive(18, 3)
    beta = rng.standard_normal(18) * rng.integers(0, 2, 18)
    best = min(itertools.combinations(range(6), 2),
               key=lambda S: l21_norm(model, beta - restrict(model, beta, S)))
    S = best_k_block_support(model, beta, 2)
    assert l21_norm(model, beta - restrict(model, beta, S)) == pytest.approx(
        l21_norm(model, beta - restrict(model, beta, best)), abs=1e-15)
    assert tail_l21(model, beta, 2) == pytest.approx(
        l21_norm(model, beta - restrict(model, beta, best)), abs=1e-15)


def test_restrict_and_complement():
    model = GroupModel.consecutive(9, 3)
    beta = np.arange(9.0)
    S = BlockSupport((2, 0))
    assert S.group_indices == (0, 2)
    np.testing.assert_array_equal(restrict(model, beta, range(3)), beta)
    np.testing.assert_array_equal(restrict(model, beta, []), np.zeros(9))
    np.testing.assert_array_equal(
        restrict(model, beta, S) + restrict(model, beta, S.complement(3)), beta)
    assert support_mask(model, S).sum() == 6
    with pytest.raises(ModelError):
        BlockSupport((1, 1))


def test_group_soft_threshold_examples():
    model = GroupModel.consecutive(4, 2)
    beta = np.array([3.0, 4.0, 0.0, 0.0])
    np.testing.assert_array_equal(group_soft_threshold(model, beta, 0.0), beta)
    np.testing.assert_allclose(group_soft_threshold(model, beta, 1.0), [2.4, 3.2, 0, 0])
    np.testing.assert_array_equal(group_soft_threshold(model, beta, 5.0), np.zeros(4))
    with pytest.raises(ModelError):
        group_soft_threshold(model, beta, -1.0)


@pytest.mark.parametrize("seed", range(5))
def test_group_soft_threshold_is_prox(seed):
    rng = np.random.default_rng(seed)
    model = GroupModel.consecutive(12, 3, weights=rng.uniform(0.5, 2.0, 4))
    beta = rng.standard_normal(12)
    tau = 0.7
    x = group_soft_threshold(model, beta, tau)

    def obj(z):
        return 0.5 * np.sum((z - beta) ** 2) + tau * l21_norm(model, z)

    base = obj(x)
    for scale in (1e-1, 1e-3, 1e-6):
        pert = x + scale * rng.standard_normal((1000 // 3, 12))
        assert min(obj(z) for z in pert) >= base - 1e-12


def test_is_k_block_sparse():
    model = GroupModel.consecutive(9, 3)
    assert is_k_block_sparse(model, np.zeros(9), 0)
    e = np.zeros(9)
    e[4] = 1.0
    assert is_k_block_sparse(model, e, 1)
    assert not is_k_block_sparse(model, e, 0)
    assert not is_k_block_sparse(model, np.ones(9), 2)


def test_random_block_sparse():
    model = GroupModel.consecutive(40, 4)
    rng = np.random.default_rng(0)
    beta = random_block_sparse(model, 3, rng)
    assert is_k_block_sparse(model, beta, 3) and not is_k_block_sparse(model, beta, 2)
    assert np.linalg.norm(beta) == pytest.approx(1.0)
    signs = random_block_sparse(model, 2, rng, kind="sign", normalize=False)
    assert set(np.unique(signs)) <= {-1.0, 0.0, 1.0}
    assert np.count_nonzero(group_norms(model, signs)) == 2
