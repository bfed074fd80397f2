import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asemoe import tensor as tt
from asemoe.losses import (
    RoutingStats,
    mutual_information,
    mutual_information_loss,
    routing_stats,
    task_loss,
    total_loss,
)
from asemoe.tensor import ShapeError, Tensor


def mi_oracle(p_cond, prior=None):
    """Plain-loop mutual information, 0 log 0 = 0."""
    T, N = len(p_cond), len(p_cond[0])
    prior = prior if prior is not None else [1.0 / T] * T
    p_e = [sum(prior[t] * p_cond[t][e] for t in range(T)) for e in range(N)]
    total = 0.0
    for t in range(T):
        for e in range(N):
            joint = prior[t] * p_cond[t][e]
            if joint > 0:
                total += joint * math.log(joint / (prior[t] * p_e[e]))
    return total


def test_task_loss_examples():
    assert task_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert task_loss([0.0, 0.0], [1.0, 1.0]).item() == 1.0
    assert task_loss([1.0, 2.0], [2.0, 4.0]).item() == 2.5
    with pytest.raises(ShapeError):
        task_loss([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        task_loss([1.0], [1.0], kind="bce")


def test_mi_identical_rows_is_zero():
    p = np.array([[0.2, 0.5, 0.3]] * 3)
    assert mutual_information_loss(RoutingStats(p)).item() == pytest.approx(0.0, abs=1e-15)


def test_mi_disjoint_deterministic():
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert mutual_information_loss(RoutingStats(p)).item() == pytest.approx(-math.log(2), abs=1e-15)


def test_mi_binary_example():
    # I = log 2 - H(0.8), H(0.8) = -(0.8 log 0.8 + 0.2 log 0.2)
    h = -(0.8 * math.log(0.8) + 0.2 * math.log(0.2))
    assert h == pytest.approx(0.500402, abs=1e-6)
    loss = mutual_information_loss(RoutingStats(np.array([[0.8, 0.2], [0.2, 0.8]]))).item()
    assert loss == pytest.approx(-(math.log(2) - h), abs=1e-12)
    assert loss == pytest.approx(-0.192745, abs=1e-5)


def test_mi_matches_oracle_with_prior():
    r = np.random.default_rng(0)
    for _ in range(50):
        p = r.dirichlet(np.ones(5), size=3)
        p[0, 2] = 0.0
        p[0] /= p[0].sum()
        prior = r.dirichlet(np.ones(3))
        got = mutual_information(RoutingStats(p, prior)).item()
        assert got == pytest.approx(mi_oracle(p.tolist(), prior.tolist()), abs=1e-12)


def _random_stats(seed, n_tasks, n_experts):
    r = np.random.default_rng(seed)
    # mix of dense and sparse rows, including exact zeros
    logits = r.normal(0, 3, size=(n_tasks, n_experts))
    keep = r.random(size=logits.shape) < 0.6
    keep[np.arange(n_tasks), r.integers(0, n_experts, n_tasks)] = True
    p = np.where(keep, np.exp(logits), 0.0)
    return p / p.sum(axis=1, keepdims=True)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 8))
def test_mi_bounds(seed, n_tasks, n_experts):
    p = _random_stats(seed, n_tasks, n_experts)
    stats = RoutingStats(p)
    stats.check()
    mi = -mutual_information_loss(stats).item()
    assert -1e-12 <= mi <= min(math.log(n_tasks), math.log(n_experts)) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(6)))
def test_mi_invariant_to_expert_relabeling(seed, perm):
    p = _random_stats(seed, 3, 6)
    a = mutual_information_loss(RoutingStats(p)).item()
    b = mutual_information_loss(RoutingStats(p[:, list(perm)])).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_mi_gradient_matches_finite_differences():
    r = np.random.default_rng(1)
    n_tasks, tokens, n_experts = 3, 5, 4
    z0 = r.normal(size=(n_tasks, tokens, n_experts))

    def loss_of(z: Tensor) -> Tensor:
        # rows of z are (task, token) pairs: softmax, then each task averages its tokens
        weights = [tt.softmax(tt.gather_rows(z, list(range(t * tokens, (t + 1) * tokens))))
                   for t in range(n_tasks)]
        return mutual_information_loss(routing_stats(weights))

    z = Tensor(z0.reshape(-1, n_experts), requires_grad=True)
    tt.backward(loss_of(z))
    fd = tt.finite_difference_grad(loss_of, Tensor(z0.reshape(-1, n_experts))).data
    np.testing.assert_allclose(z.grad, fd, rtol=1e-4, atol=1e-9)


def test_routing_stats_renormalizes_rows():
    w = [Tensor([[0.2, 0.3, 0.0], [0.1, 0.0, 0.4]]), Tensor([[0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])]
    stats = routing_stats(w)
    stats.check()
    np.testing.assert_allclose(stats.p_expert_given_task.data[1], [1.0, 0.0, 0.0])


def test_total_loss_examples():
    assert total_loss([Tensor(1.0), Tensor(3.0)], 0.0, 0.0).item() == 2.0
    assert total_loss([1.0, 3.0], Tensor(-0.5), 0.1).item() == pytest.approx(1.95, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss([1.0], 0.0, -1.0)


def test_total_loss_gradient_flows_to_each_task():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(4.0, requires_grad=True)
    m = Tensor(1.0, requires_grad=True)
    tt.backward(total_loss([tt.multiply(a, a), b], m, 0.5))
    assert a.grad == pytest.approx(2.0)  # d/da (a^2 / 2)
    assert b.grad == pytest.approx(0.5)
    assert m.grad == pytest.approx(0.5)
