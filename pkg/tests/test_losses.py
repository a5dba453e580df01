import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clipreid.errors import ConfigError, ContractError
from clipreid.losses import (
    loss_i2t,
    loss_i2tce,
    loss_id,
    loss_stage1,
    loss_stage2,
    loss_t2i,
    loss_t2i_multipos,
    loss_t2ice_averaged,
    loss_triplet,
    smoothed_target,
    triplet_margin,
)

from harness import oracle_multipos, oracle_smoothed_ce, oracle_triplet_exhaustive

T = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731


# --- contrastive losses ------------------------------------------------------------

def test_i2t_single_pair_is_zero():
    assert loss_i2t(T([[3.7]])).item() == 0.0


def test_i2t_uniform():
    assert loss_i2t(torch.full((4, 4), 0.3, dtype=torch.float64)).item() == pytest.approx(math.log(4), abs=1e-12)


def test_i2t_identity_matrix():
    assert loss_i2t(T([[1, 0], [0, 1]])).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.31326, abs=1e-5)


def test_t2i_values():
    assert loss_t2i(torch.full((3, 3), -1.0, dtype=torch.float64)).item() == pytest.approx(math.log(3))
    assert loss_t2i(T([[2, 0], [0, 2]])).item() == pytest.approx(0.12693, abs=1e-5)


def test_t2i_symmetric_equals_i2t():
    A = torch.randn(5, 5, dtype=torch.float64)
    S = A + A.T
    assert loss_t2i(S).item() == pytest.approx(loss_i2t(S).item(), abs=1e-12)


def test_contrastive_rejects_non_square():
    with pytest.raises(ContractError):
        loss_i2t(torch.zeros(2, 3))
    with pytest.raises(ContractError):
        loss_t2i(torch.zeros(3, 2))


def test_multipos_uniform_pairs():
    S = torch.zeros(4, 4, dtype=torch.float64)
    assert loss_t2i_multipos(S, torch.tensor([0, 0, 1, 1])).item() == pytest.approx(math.log(2))


def test_multipos_collapses_to_t2i_when_ids_unique():
    S = torch.randn(6, 6, dtype=torch.float64)
    labels = torch.tensor([5, 2, 0, 9, 3, 1])
    assert loss_t2i_multipos(S, labels).item() == pytest.approx(loss_t2i(S).item(), abs=1e-12)


def test_multipos_matches_bruteforce_three_images():
    # ids [0, 0, 1]; text anchor of id 0 scores (1, 1, 0), anchor of id 1 scores (0, 0, 1)
    labels = [0, 0, 1]
    col0, col1 = [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]
    S = np.array([col0, col0, col1]).T  # S[a, j] = s(V_a, T_{y_j})
    expected = oracle_multipos(S, labels)
    # hand value: id0: -log(2e/(2e+1)), id1: -log(e/(e+2)); mean of the two
    hand = 0.5 * (-math.log(2 * math.e / (2 * math.e + 1)) - math.log(math.e / (math.e + 2)))
    assert expected == pytest.approx(hand, abs=1e-12)
    assert loss_t2i_multipos(T(S), torch.tensor(labels)).item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=8), st.integers(0, 2 ** 31 - 1))
def test_multipos_random_vs_oracle(labels, seed):
    rng = np.random.default_rng(seed)
    B = len(labels)
    text = rng.normal(size=(4, 3))
    img = rng.normal(size=(B, 3))
    S = img @ text[labels].T
    got = loss_t2i_multipos(T(S), torch.tensor(labels)).item()
    assert got == pytest.approx(oracle_multipos(S, labels), abs=1e-10)


def test_stage1_values():
    assert loss_stage1(T([[0.7]]), torch.tensor([3])).item() == 0.0
    S = torch.zeros(4, 4, dtype=torch.float64)
    assert loss_stage1(S, torch.arange(4)).item() == pytest.approx(2 * math.log(4))
    S = torch.randn(4, 4, dtype=torch.float64)
    labels = torch.tensor([0, 1, 0, 2])
    assert loss_stage1(S, labels).item() == pytest.approx(
        loss_i2t(S).item() + oracle_multipos(S.numpy(), labels.tolist()), abs=1e-12)


# --- ID / i2tce ----------------------------------------------------------------------

def test_smoothed_target_sums_to_one():
    q = smoothed_target(torch.tensor([0, 3, 9]), 10, 0.1)
    assert torch.allclose(q.sum(1), torch.ones(3, dtype=torch.float64), atol=1e-12)
    assert q[1, 3].item() == pytest.approx(0.9 + 0.01)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_id_uniform_scores(eps):
    assert loss_id(torch.zeros(10, dtype=torch.float64), 4, eps).item() == pytest.approx(math.log(10))


def test_id_direct_values():
    scores = torch.log(T([0.9, 0.1]))
    assert loss_id(scores, 0, 0.0).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert -math.log(0.9) == pytest.approx(0.10536, abs=1e-5)
    assert loss_id(torch.zeros(2, dtype=torch.float64), 1, 0.1).item() == pytest.approx(math.log(2))


def test_id_epsilon_range():
    with pytest.raises(ConfigError):
        loss_id(torch.zeros(3), 0, 1.0)
    with pytest.raises(ConfigError):
        loss_id(torch.zeros(3), 0, -0.1)


def test_smoothing_keeps_true_class_first():
    # minimising the smoothed CE over free scores yields log q up to a constant
    N, y, eps = 6, 2, 0.3
    z = torch.zeros(N, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([z], max_iter=200)

    def closure():
        opt.zero_grad()
        loss = loss_id(z, y, eps)
        loss.backward()
        return loss

    opt.step(closure)
    assert int(z.argmax()) == y


def test_i2tce_values():
    assert loss_i2tce(torch.zeros(3, dtype=torch.float64), 1, 3, 0.0).item() == pytest.approx(math.log(3))
    assert loss_i2tce(T([20.0, 0.0, 0.0]), 0, 3, 0.0).item() < 1e-8
    expected = oracle_smoothed_ce([2.0, 0.0, 0.0], 0, 0.1)
    assert loss_i2tce(T([2.0, 0.0, 0.0]), 0, 3, 0.1).item() == pytest.approx(expected, abs=1e-12)


def test_i2tce_length_mismatch():
    with pytest.raises(ContractError):
        loss_i2tce(torch.zeros(4), 0, 5)


# --- triplet -------------------------------------------------------------------------

def test_triplet_margin_arithmetic():
    assert triplet_margin(0.2, 0.5, 0.3).item() == pytest.approx(0.0, abs=1e-12)
    assert triplet_margin(0.5, 0.2, 0.3).item() == pytest.approx(0.6)


def test_triplet_four_points_vs_exhaustive():
    X = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.2], [3.0, 1.0]]
    ids = [0, 0, 1, 1]
    got = loss_triplet(T(X), torch.tensor(ids), 0.3).item()
    assert got == pytest.approx(oracle_triplet_exhaustive(X, ids, 0.3), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(2, 3), st.integers(0, 2 ** 31 - 1))
def test_triplet_batch_hard_equals_enumeration(P, K, seed):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(P), K)
    rng.shuffle(ids)
    X = rng.normal(size=(len(ids), 3))
    got = loss_triplet(T(X), torch.tensor(ids), 0.3).item()
    assert got == pytest.approx(oracle_triplet_exhaustive(X, ids.tolist(), 0.3), abs=1e-9)


def test_triplet_requires_positive_and_negative():
    with pytest.raises(ContractError):
        loss_triplet(torch.randn(3, 2), torch.tensor([0, 1, 2]))
    with pytest.raises(ContractError):
        loss_triplet(torch.randn(3, 2), torch.tensor([0, 0, 0]))


# --- stage totals and the averaged variant --------------------------------------------

def test_stage2_weighting():
    assert loss_stage2(1.0, 2.0, 3.0, (1, 1, 1)) == 6
    assert loss_stage2(4.0, 0.0, 0.0, (0.25, 1, 1)) == 1
    with pytest.raises(ConfigError):
        loss_stage2(1.0, 1.0, 1.0, (1, -1, 1))


def test_stage2_zero_weight_has_zero_gradient():
    a = torch.tensor(2.0, requires_grad=True)
    b = torch.tensor(3.0, requires_grad=True)
    c = torch.tensor(5.0, requires_grad=True)
    loss_stage2(a * a, b * b, c * c, (0.0, 1.0, 1.0)).backward()
    assert a.grad.item() == 0.0 and b.grad.item() == 6.0


def test_t2ice_averaged_values():
    assert loss_t2ice_averaged(T([1.3]), 0).item() == 0.0
    assert loss_t2ice_averaged(torch.zeros(5, dtype=torch.float64), 2).item() == pytest.approx(math.log(5))
    col = [0.4, 2.0, -1.0]
    expected = -math.log(math.exp(col[1]) / sum(math.exp(v) for v in col))
    assert loss_t2ice_averaged(T(col), 1).item() == pytest.approx(expected, abs=1e-12)


def test_t2ice_averaged_length_mismatch():
    with pytest.raises(ContractError):
        loss_t2ice_averaged(torch.zeros(3, 2), torch.tensor([0]))


# --- invariants ------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_losses_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ids = torch.tensor([0, 0, 1, 1, 2, 2])
    V = torch.from_numpy(rng.normal(size=(6, 4)))
    text = torch.from_numpy(rng.normal(size=(3, 4)))
    perm = torch.from_numpy(rng.permutation(6))

    def all_losses(V, ids):
        S = V @ text[ids].T
        return [loss_i2t(S), loss_t2i(S), loss_t2i_multipos(S, ids), loss_stage1(S, ids),
                loss_triplet(V, ids), loss_id(V[:, :3], ids), loss_i2tce(V @ text.T, ids, 3)]

    base = all_losses(V, ids)
    permuted = all_losses(V[perm], ids[perm])
    for a, b in zip(base, permuted):
        assert a.item() >= 0
        assert a.item() == pytest.approx(b.item(), abs=1e-10)
