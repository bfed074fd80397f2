import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asemoe import tensor as tt
from asemoe.moe import (
    ConfigError,
    ExpertConfig,
    GatingDecision,
    LoraExpert,
    MoeLayer,
    Router,
    Variant,
    batch_gate,
    gate,
    gate_ase,
    gate_baseline,
    gate_naive_shared,
    layer_forward,
    lora_forward,
    moe_layer_forward,
    top_k_mask,
    top_k_select,
)
from asemoe.tensor import Tensor


def brute_top_k(z, k):
    return [i for _, i in sorted((-v, i) for i, v in enumerate(z))[:k]]


def router_from(w_sparse, w_shared=None, d=None):
    w_sparse = np.asarray(w_sparse, dtype=float)
    d = w_sparse.shape[1]
    w_shared = np.zeros((0, d)) if w_shared is None else np.asarray(w_shared, dtype=float)
    return Router(Tensor(w_sparse), Tensor(w_shared))


def logit_router(z, zs=()):
    """Router whose logits equal z / zs for input x = [1]."""
    z = np.asarray(z, dtype=float).reshape(-1, 1)
    zs = np.asarray(zs, dtype=float).reshape(-1, 1)
    return Router(Tensor(z), Tensor(zs))


# ---------------------------------------------------------------- LoRA

def test_lora_zero_a_gives_zero():
    e = LoraExpert(np.zeros((2, 5)), np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_array_equal(lora_forward(e, np.arange(5.0)), 0.0)


def test_lora_hand_example():
    # A x = 1 + 2 = 3, B * 3 = [6, 9]
    e = LoraExpert([[1.0, 1.0]], [[2.0], [3.0]])
    np.testing.assert_array_equal(lora_forward(e, [1.0, 2.0]), [6.0, 9.0])


def test_lora_associativity():
    r = np.random.default_rng(1)
    for _ in range(20):
        e = LoraExpert(r.normal(size=(3, 7)), r.normal(size=(6, 3)))
        x = r.normal(size=7)
        np.testing.assert_allclose(lora_forward(e, x), e.delta() @ x, atol=1e-12)


def test_lora_param_count_and_rank_bound():
    e = LoraExpert(np.zeros((4, 10)), np.zeros((12, 4)))
    assert e.num_params == 4 * (10 + 12)
    with pytest.raises(ConfigError):
        LoraExpert(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ConfigError):
        LoraExpert(np.zeros((2, 5)), np.zeros((5, 3)))


def test_lora_dimension_mismatch():
    e = LoraExpert(np.zeros((1, 4)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        lora_forward(e, np.zeros(3))


# ---------------------------------------------------------------- top-k

def test_top_k_examples():
    assert sorted(top_k_select([1, 1, 1], 2)) == [0, 1]
    assert sorted(top_k_select([0.1, 3.0, 2.0, 2.5], 2)) == [1, 3]


def test_top_k_range():
    with pytest.raises(ValueError):
        top_k_select([1, 2], 0)
    with pytest.raises(ValueError):
        top_k_select([1, 2], 3)


@pytest.mark.parametrize("m", range(1, 8))
def test_top_k_exhaustive_short_vectors(m):
    for z in itertools.product((-1, 0, 1), repeat=m):
        for k in range(1, m + 1):
            assert top_k_select(z, k).tolist() == brute_top_k(z, k)


def test_top_k_random_vectors_and_mask():
    r = np.random.default_rng(2)
    z = r.normal(size=(200, 9))
    for k in range(1, 10):
        mask = top_k_mask(z, k)
        for row, m in zip(z, mask):
            assert set(np.flatnonzero(m)) == set(brute_top_k(row, k))


# ---------------------------------------------------------------- gating

def test_config_validation():
    ExpertConfig(16, 3, 1, 4).validate(Variant.ASE)
    ExpertConfig(16, 4, 0, 4).validate(Variant.BASELINE)
    with pytest.raises(ConfigError):
        ExpertConfig(16, 1, 1, 4).validate(Variant.ASE)  # k - S must be >= 1
    with pytest.raises(ConfigError):
        ExpertConfig(4, 4, 4, 1).validate()
    with pytest.raises(ConfigError):
        ExpertConfig(16, 3, 1, 4).validate(Variant.BASELINE)
    with pytest.raises(ConfigError):
        ExpertConfig(16, 3, 0, 4).validate(Variant.NAIVE)


def test_baseline_equal_logits():
    d = gate_baseline([1.0], logit_router([0, 0, 0]), ExpertConfig(3, 2, 0, 1))
    assert d.sparse_indices.tolist() == [0, 1]
    np.testing.assert_allclose(d.sparse_weights, [1 / 3, 1 / 3])
    assert d.total_weight == pytest.approx(2 / 3)


def test_baseline_full_k_sums_to_one():
    d = gate_baseline([1.0], logit_router([0.3, -2.0]), ExpertConfig(2, 2, 0, 1))
    assert d.total_weight == pytest.approx(1.0, abs=1e-15)


def test_baseline_hand_softmax():
    e = np.exp([2.0, 1.0, 0.0])
    d = gate_baseline([1.0], logit_router([2, 1, 0]), ExpertConfig(3, 2, 0, 1))
    np.testing.assert_allclose(d.sparse_weights, e[:2] / e.sum(), atol=1e-15)
    np.testing.assert_allclose(d.sparse_weights, [0.6652, 0.2447], atol=1e-4)


def test_baseline_rejects_shared():
    with pytest.raises(ConfigError):
        gate_baseline([1.0], logit_router([0, 0]), ExpertConfig(3, 1, 1, 1))


def test_naive_shared_weights_are_one():
    cfg = ExpertConfig(5, 2, 1, 1)
    d = gate_naive_shared([1.0], logit_router([0, 0, 0, 0]), cfg)
    assert d.shared_weights.tolist() == [1.0]
    assert d.total_weight == pytest.approx(1.5)  # 1 + 2/4
    with pytest.raises(ConfigError):
        gate_naive_shared([1.0], logit_router([0, 0]), ExpertConfig(2, 1, 0, 1))


def test_ase_all_zero_logits():
    d = gate_ase([1.0], logit_router([0, 0, 0], [0]), ExpertConfig(4, 2, 1, 1))
    assert d.sparse_indices.tolist() == [0]
    np.testing.assert_allclose(d.sparse_weights, [0.5])
    np.testing.assert_allclose(d.shared_weights, [0.5])


def test_ase_hand_example():
    d = gate_ase([1.0], logit_router([2, 1, 0], [1]), ExpertConfig(4, 2, 1, 1))
    assert d.sparse_indices.tolist() == [0]
    np.testing.assert_allclose(d.sparse_weights, [1 / (1 + np.exp(-1))], atol=1e-15)
    np.testing.assert_allclose([d.sparse_weights[0], d.shared_weights[0]], [0.7311, 0.2689], atol=1e-4)


def test_ase_errors():
    with pytest.raises(ConfigError):
        gate_ase([1.0], logit_router([0, 0]), ExpertConfig(2, 1, 0, 1))
    with pytest.raises(ConfigError):
        gate_ase([1.0], logit_router([0, 0], [0]), ExpertConfig(3, 1, 1, 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(16, 3, 1, 4), (32, 6, 2, 2), (64, 12, 4, 1), (6, 3, 1, 2)]))
def test_ase_weights_sum_to_one(seed, nksr):
    cfg = ExpertConfig(*nksr)
    r = np.random.default_rng(seed)
    d_in = 8
    router = Router(Tensor(r.normal(0, 3, size=(cfg.n_sparse, d_in))), Tensor(r.normal(0, 3, size=(cfg.n_shared, d_in))))
    d = gate_ase(r.normal(size=d_in), router, cfg)
    assert abs(d.total_weight - 1.0) <= 1e-9
    assert d.sparse_indices.size == cfg.top_k - cfg.n_shared


# ---------------------------------------------------------------- layer forward

def make_layer(r, d, cfg, variant, zero_a=False):
    nr = cfg.n_total * cfg.rank
    a = np.zeros((nr, d)) if zero_a else r.normal(size=(nr, d))
    return MoeLayer(r.normal(size=(d, d)), a, r.normal(size=(d, nr)), cfg, variant)


@pytest.mark.parametrize("variant,nksr", [("baseline", (4, 2, 0, 1)), ("pure", (4, 2, 0, 1)),
                                          ("naive", (4, 2, 1, 1)), ("ase", (4, 2, 1, 1))])
def test_zero_experts_and_base_give_identity(variant, nksr):
    r = np.random.default_rng(3)
    cfg = ExpertConfig(*nksr)
    layer = make_layer(r, 3, cfg, variant, zero_a=True)
    layer.w0.data[...] = 0.0
    router = Router.zeros(cfg, 3, variant)
    router.w_sparse.data[...] = r.normal(size=router.w_sparse.shape)
    x = r.normal(size=3)
    np.testing.assert_allclose(moe_layer_forward(layer, x, gate(x, router, cfg, variant)), x)


def test_ase_layer_hand_evaluation():
    # d = 2, r = 1, one shared + three sparse experts; x = [1, 0] so router logits are column 0
    cfg = ExpertConfig(4, 2, 1, 1)
    w0 = np.array([[0.5, 0.0], [0.0, -1.0]])
    a = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])  # expert i: A_i x = (i + 1)
    b = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    layer = MoeLayer(w0, a, b, cfg, Variant.ASE)
    router = Router(Tensor([[2.0, 0.0], [1.0, 0.0], [0.0, 0.0]]), Tensor([[1.0, 0.0]]))
    x = np.array([1.0, 0.0])
    d = gate_ase(x, router, cfg)
    # selected sparse expert is z-index 0 (layer expert 1); weights softmax over logits {2, 1}
    g_sparse = np.e**2 / (np.e**2 + np.e)
    g_shared = np.e / (np.e**2 + np.e)
    # y = x + W0 x + g_sparse * B_1 A_1 x + g_shared * B_0 A_0 x
    expected0 = 1.0 + 0.5 + g_sparse * 1.0 * 2.0 + g_shared * 1.0 * 1.0
    expected1 = 0.0 + 0.0 + 0.0 + 0.0
    np.testing.assert_allclose(moe_layer_forward(layer, x, d), [expected0, expected1], atol=1e-14)


def test_shared_scaling_is_linear():
    r = np.random.default_rng(4)
    cfg = ExpertConfig(5, 3, 2, 1)
    layer = make_layer(r, 3, cfg, "ase")
    router = Router(Tensor(r.normal(size=(3, 3))), Tensor(r.normal(size=(2, 3))))
    x = r.normal(size=3)
    d = gate_ase(x, router, cfg)
    y = moe_layer_forward(layer, x, d)
    shared_term = sum(g * lora_forward(layer.expert(i), x) for i, g in enumerate(d.shared_weights))
    layer.b.data[:, :2] *= 3.0  # rank 1: first two columns are the shared experts' B
    y3 = moe_layer_forward(layer, x, d)
    np.testing.assert_allclose(y3 - y, 2.0 * shared_term, atol=1e-12)


def test_variant_mismatch_rejected():
    r = np.random.default_rng(5)
    cfg = ExpertConfig(4, 2, 1, 1)
    layer = make_layer(r, 3, cfg, "ase")
    d = GatingDecision(np.array([0]), np.array([1.0]), np.array([1.0]), Variant.NAIVE)
    with pytest.raises(ConfigError):
        moe_layer_forward(layer, np.zeros(3), d)


def test_non_square_base_rejected():
    with pytest.raises(ConfigError):
        MoeLayer(np.zeros((3, 4)), np.zeros((4, 4)), np.zeros((3, 4)), ExpertConfig(4, 2, 1, 1), "ase")


@pytest.mark.parametrize("variant,nksr", [("baseline", (6, 3, 0, 2)), ("pure", (6, 2, 0, 2)),
                                          ("naive", (6, 2, 1, 2)), ("ase", (6, 3, 2, 2))])
def test_batch_path_matches_per_token_path(variant, nksr):
    r = np.random.default_rng(6)
    cfg = ExpertConfig(*nksr)
    d = 5
    layer = make_layer(r, d, cfg, variant)
    router = Router.zeros(cfg, d, variant)
    for p in router.parameters():
        p.data[...] = r.normal(size=p.shape)
    h = r.normal(size=(7, d))
    g = batch_gate(Tensor(h), router, cfg, variant)
    y = layer_forward(layer, Tensor(h), g).data
    for i in range(h.shape[0]):
        dec = gate(h[i], router, cfg, variant)
        np.testing.assert_allclose(y[i], moe_layer_forward(layer, h[i], dec), atol=1e-12)
        np.testing.assert_array_equal(np.flatnonzero(g.active[i]), np.sort(dec.expert_indices()))
        np.testing.assert_allclose(g.weights.data[i][dec.expert_indices()], dec.expert_weights(), atol=1e-14)


def _stable_selection(z, k, margin):
    s = np.sort(z, axis=-1)[:, ::-1]
    return k >= z.shape[-1] or np.all(s[:, k - 1] - s[:, k] > margin)


@pytest.mark.parametrize("variant,nksr", [("ase", (6, 3, 1, 2)), ("baseline", (6, 3, 0, 2)), ("naive", (6, 2, 1, 2))])
def test_router_gradients_match_finite_differences(variant, nksr):
    cfg = ExpertConfig(*nksr)
    d = 4
    r = np.random.default_rng(7)
    layer = make_layer(r, d, cfg, variant)
    k_sparse = cfg.top_k - cfg.n_shared if variant == "ase" else cfg.top_k
    target = r.normal(size=(5, d))
    checked = 0
    while checked < 5:
        h = r.normal(size=(5, d))
        router = Router.zeros(cfg, d, variant)
        for p in router.parameters():
            p.data[...] = r.normal(size=p.shape)
            p.requires_grad = True
        if not _stable_selection(h @ router.w_sparse.data.T, k_sparse, 1e-3):
            continue
        checked += 1

        def loss_fn(ws, wsh):
            rt = Router(ws, wsh)
            y = layer_forward(layer, Tensor(h), batch_gate(Tensor(h), rt, cfg, variant))
            diff = tt.subtract(y, Tensor(target))
            return tt.mean(tt.multiply(diff, diff))

        tt.backward(loss_fn(router.w_sparse, router.w_shared))
        fd = tt.finite_difference_grad(lambda w: loss_fn(w, Tensor(router.w_shared.data)), Tensor(router.w_sparse.data)).data
        np.testing.assert_allclose(router.w_sparse.grad, fd, rtol=1e-4, atol=1e-8)
        if router.w_shared.size:
            fd_s = tt.finite_difference_grad(lambda w: loss_fn(Tensor(router.w_sparse.data), w), Tensor(router.w_shared.data)).data
            np.testing.assert_allclose(router.w_shared.grad, fd_s, rtol=1e-4, atol=1e-8)


def test_naive_dominance_arithmetic():
    r = np.random.default_rng(8)
    for s in (1, 2, 4):
        cfg = ExpertConfig(16, 3, s, 2)
        for _ in range(50):
            router = Router(Tensor(r.normal(size=(cfg.n_sparse, 4))), Tensor(np.zeros((0, 4))))
            d = gate_naive_shared(r.normal(size=4), router, cfg)
            assert d.shared_weights.sum() == s
            assert d.sparse_weights.sum() <= 1.0
            assert d.total_weight > s
