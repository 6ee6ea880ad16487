import math

import numpy as np
import pytest

from fedrec.data import AttributeSchema
from fedrec.model import (
    FROZEN,
    GATE_COMMON,
    GATE_UNIFORM,
    Arch,
    ParamSet,
    ShapeError,
    backward_batch,
    bce_loss,
    count_params,
    embed_item,
    embed_user,
    forward_batch,
    init_params,
    load_params,
    predict,
    save_params,
    sgd_step,
)
from fedrec.model import _layer_branches
from helpers import max_rel_error, numeric_grad, randomized_params


def small_arch(**kw):
    us = AttributeSchema(("ua0", "ua1"), (3, 2))
    it = AttributeSchema(("ia0", "ia1"), (4, 3))
    defaults = dict(embed_dim=4, mlp_hidden=(6, 3), adapter_rank=2, gate_hidden=3,
                    group_attrs=("ua0",))
    defaults.update(kw)
    return Arch(us, it, **defaults)


def random_batch(arch, n, seed, single_user=True):
    rng = np.random.default_rng(seed)
    UA = rng.integers(0, arch.user_schema.cards, size=(n, len(arch.user_schema)))
    VA = rng.integers(0, arch.item_schema.cards, size=(n, len(arch.item_schema)))
    if single_user:
        UA[:] = UA[0]
    y = rng.integers(0, 2, size=n).astype(float)
    groups = {a: int(UA[0, arch.user_schema.index(a)]) for a in arch.group_attrs}
    return UA, VA, y, (groups or None)


class TestEmbedding:
    def test_single_lookup(self):
        us = AttributeSchema(("a",), (1,))
        it = AttributeSchema(("b",), (1,))
        ps = init_params(Arch(us, it, embed_dim=2, mlp_hidden=(), gate_mode="none"), 0)
        ps = ps.with_tensors({"user_emb/a": np.array([[0.1, 0.2]])})
        assert np.allclose(embed_user(ps, [0]), [0.1, 0.2])

    def test_concat_order(self):
        us = AttributeSchema(("a", "b"), (2, 2))
        it = AttributeSchema(("c",), (1,))
        ps = init_params(Arch(us, it, embed_dim=2, mlp_hidden=(), gate_mode="none"), 0)
        v = embed_user(ps, [1, 0])
        expected = np.concatenate([ps.tensors["user_emb/a"][1], ps.tensors["user_emb/b"][0]])
        assert v.shape == (4,)
        assert np.array_equal(v, expected)

    def test_out_of_range_value(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        with pytest.raises(Exception):
            embed_user(ps, [3, 0])
        with pytest.raises(Exception):
            embed_item(ps, [0, 3])


class TestLayerForward:
    def fixture_ps(self, gate_mode="learned"):
        # d=2, k=2, r=1, B=3 one-layer-under-test fixture
        us = AttributeSchema(("ua",), (3,))
        it = AttributeSchema(("ia",), (3,))
        arch = Arch(us, it, embed_dim=1, mlp_hidden=(2,), adapter_rank=1, gate_hidden=2,
                    group_attrs=("ua",), gate_mode=gate_mode)
        ps = init_params(arch, 0)
        fix = {
            "mlp/0/W": np.array([[0.5, -0.2], [0.1, 0.7]]),
            "mlp/0/b": np.array([0.05, -0.1]),
            "adapter/user/0/A": np.array([[0.6], [-0.3]]),
            "adapter/user/0/B": np.array([[0.2, 0.4]]),
            "adapter/group/ua/0/0/A": np.array([[-0.5], [0.8]]),
            "adapter/group/ua/0/0/B": np.array([[0.3, -0.1]]),
        }
        if gate_mode == "learned":
            fix["gate/0/W1"] = np.array([[0.4, 0.2], [-0.6, 0.5]])
            fix["gate/0/W2"] = np.array([[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]])
        return ps.with_tensors(fix)

    def test_hand_computed_three_branch_fusion(self):
        # pinned values computed once with a scalar-loop oracle over the
        # branch/gate equations
        ps = self.fixture_ps()
        X = np.array([[0.3, -0.4]])
        Z, cache = _layer_branches(ps, 0, X, {"ua": 0})
        assert np.allclose(cache.G[0], [0.3377763879921221, 0.33508495696657087,
                                        0.3271386550413071], atol=1e-15)
        assert np.allclose(Z[0], [0.053208278642114984, -0.07414676696394966], atol=1e-15)
        # oracle recomputation, element by element
        x = X[0]
        c = ps.tensors["mlp/0/W"] @ x + ps.tensors["mlp/0/b"]
        u = ps.tensors["adapter/user/0/A"] @ (ps.tensors["adapter/user/0/B"] @ x)
        g = ps.tensors["adapter/group/ua/0/0/A"] @ (ps.tensors["adapter/group/ua/0/0/B"] @ x)
        s = np.maximum(ps.tensors["gate/0/W1"] @ x, 0.0)
        a = ps.tensors["gate/0/W2"] @ s
        w = np.exp(a - a.max()); w /= w.sum()
        assert np.allclose(Z[0], w[0] * c + w[1] * u + w[2] * g, atol=1e-14)

    def test_zero_adapters_uniform_gate_scales_common(self):
        # W_b = 0 and W_2 = 0 kill the personalization branches and make the
        # gate uniform: fused pre-activation is exactly common / B
        ps = self.fixture_ps()
        ps = ps.with_tensors({
            "adapter/user/0/B": np.zeros((1, 2)),
            "adapter/group/ua/0/0/B": np.zeros((1, 2)),
            "gate/0/W2": np.zeros((3, 2)),
        })
        X = np.array([[0.3, -0.4], [1.0, 2.0]])
        Z, cache = _layer_branches(ps, 0, X, {"ua": 0})
        common = X @ ps.tensors["mlp/0/W"].T + ps.tensors["mlp/0/b"]
        assert np.array_equal(Z, common * (1.0 / 3.0))
        assert np.allclose(cache.G, 1.0 / 3.0, atol=1e-15)

    def test_one_hot_common_gate_reduces_to_base_layer(self):
        ps = self.fixture_ps(gate_mode=GATE_COMMON)
        X = np.array([[0.3, -0.4]])
        Z, _ = _layer_branches(ps, 0, X, {"ua": 0})
        common = X @ ps.tensors["mlp/0/W"].T + ps.tensors["mlp/0/b"]
        assert np.array_equal(Z, common)


class TestPredict:
    def test_all_zero_weights_gives_half(self):
        arch = small_arch(gate_mode="none", use_user_adapter=False, group_attrs=())
        ps = init_params(arch, 0)
        ps = ps.with_tensors({n: np.zeros_like(t) for n, t in ps.tensors.items()})
        assert predict(ps, [0, 0], [0, 0]) == 0.5

    def test_output_in_unit_interval(self):
        arch = small_arch()
        ps = randomized_params(init_params(arch, 0), 7, scale=0.5)
        UA, VA, _, groups = random_batch(arch, 50, 3)
        probs, _ = forward_batch(ps, UA, VA, groups)
        assert np.all((probs > 0) & (probs < 1))

    def test_monotone_in_positive_path_weight(self):
        # 1-layer net: raising the weight on a positive input raises the output
        us = AttributeSchema(("a",), (1,))
        it = AttributeSchema(("b",), (1,))
        arch = Arch(us, it, embed_dim=1, mlp_hidden=(), gate_mode="none")
        ps = init_params(arch, 0)
        ps = ps.with_tensors({"user_emb/a": np.array([[1.0]]),
                              "item_emb/b": np.array([[1.0]]),
                              "mlp/0/W": np.array([[0.5, 0.5]])})
        lo = predict(ps, [0], [0])
        hi = predict(ps.with_tensors({"mlp/0/W": np.array([[1.5, 0.5]])}), [0], [0])
        assert hi > lo


class TestBceLoss:
    def test_half_prediction(self):
        assert bce_loss([0.5], [1.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_exact_prediction_clamped(self):
        assert bce_loss([1.0, 0.0], [1.0, 0.0]) <= 2.9e-11

    def test_mean_of_two(self):
        a = bce_loss([0.8], [1.0])
        b = bce_loss([0.3], [0.0])
        assert bce_loss([0.8, 0.3], [1.0, 0.0]) == pytest.approx((a + b) / 2, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ShapeError):
            bce_loss([], [])


class TestBackward:
    def test_matches_finite_differences(self):
        arch = small_arch()
        for seed in (0, 1, 2):
            ps = randomized_params(init_params(arch, seed), seed + 10)
            UA, VA, y, groups = random_batch(arch, 5, seed)
            probs, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
            grads = backward_batch(ps, cache, y)
            for name, g in grads.items():
                num = numeric_grad(ps, name, UA, VA, groups, y)
                assert max_rel_error(g, num) < 1e-4, name

    def test_frozen_tensor_absent(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        tags = dict(ps.tags)
        for n in ps.names("item_emb/*"):
            tags[n] = FROZEN
        ps = ParamSet(arch, ps.tensors, tags)
        UA, VA, y, groups = random_batch(arch, 4, 1)
        _, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
        grads = backward_batch(ps, cache, y)
        assert not any(n.startswith("item_emb/") for n in grads)
        assert any(n.startswith("user_emb/") for n in grads)

    def test_zero_adapter_factor_gradients(self):
        # W_b = 0 makes grad(W_a) zero through the chain rule while grad(W_b)
        # stays generally nonzero
        arch = small_arch()
        ps = init_params(arch, 3)  # W_b is zero at init
        UA, VA, y, groups = random_batch(arch, 4, 2)
        _, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
        grads = backward_batch(ps, cache, y)
        assert np.allclose(grads["adapter/user/0/A"], 0.0)
        assert np.any(grads["adapter/user/0/B"] != 0.0)


class TestSgdStep:
    def test_single_step(self):
        arch = small_arch(gate_mode="none", use_user_adapter=False, group_attrs=())
        ps = init_params(arch, 0)
        ps = ps.with_tensors({"mlp/1/b": np.array([1.0, 1.0, 1.0])})
        out = sgd_step(ps, {"mlp/1/b": np.array([0.5, 0.0, 0.0])}, 0.1)
        assert np.allclose(out.tensors["mlp/1/b"], [0.95, 1.0, 1.0])

    def test_untouched_tensors_bit_identical(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        out = sgd_step(ps, {"mlp/0/b": np.ones_like(ps.tensors["mlp/0/b"])}, 0.1)
        for n in ps.tensors:
            if n != "mlp/0/b":
                assert out.tensors[n] is ps.tensors[n] or np.array_equal(out.tensors[n], ps.tensors[n])

    def test_zero_gradient_noop(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        zeros = {n: np.zeros_like(t) for n, t in ps.tensors.items()}
        out = sgd_step(sgd_step(ps, zeros, 0.1), zeros, 0.1)
        for n in ps.tensors:
            assert np.array_equal(out.tensors[n], ps.tensors[n])

    def test_nonpositive_lr(self):
        ps = init_params(small_arch(), 0)
        with pytest.raises(ShapeError):
            sgd_step(ps, {}, 0.0)


class TestCountParams:
    def test_single_table(self):
        us = AttributeSchema(("a",), (10,))
        it = AttributeSchema(("b",), (1,))
        arch = Arch(us, it, embed_dim=4, mlp_hidden=(), gate_mode="none")
        ps = init_params(arch, 0)
        assert count_params(ps, pattern="user_emb/*") == 40

    def test_adapter_pair_size(self):
        # r (k + d) with d=8, k=4, r=2
        us = AttributeSchema(("a",), (2,))
        it = AttributeSchema(("b",), (2,))
        arch = Arch(us, it, embed_dim=4, mlp_hidden=(4,), adapter_rank=2,
                    adapter_layers="hidden", group_attrs=())
        ps = init_params(arch, 0)
        assert count_params(ps, pattern="adapter/user/0/*") == 2 * (4 + 8)

    def test_closed_form_enumeration(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        d_emb = arch.embed_dim
        expected = sum(p * d_emb for p in arch.user_schema.cards)
        expected += sum(p * d_emb for p in arch.item_schema.cards)
        dims = arch.layer_dims
        for l in range(arch.n_layers):
            expected += dims[l + 1] * dims[l] + dims[l + 1]
        n_adapters = 1 + sum(arch.group_cards().values())
        for l in arch.adapter_layer_ids:
            r = arch.layer_rank(l)
            expected += n_adapters * r * (dims[l + 1] + dims[l])
            expected += arch.gate_hidden * dims[l] + arch.n_branches * arch.gate_hidden
        assert count_params(ps) == expected


class TestInitParams:
    def test_adapter_b_zero(self):
        ps = init_params(small_arch(), 0)
        for n in ps.names("adapter/*/B") + ps.names("adapter/*/*/*/B"):
            assert np.all(ps.tensors[n] == 0.0)

    def test_gate_uniform_at_init(self):
        arch = small_arch()
        ps = init_params(arch, 0)
        UA, VA, _, groups = random_batch(arch, 8, 5)
        _, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
        for layer in cache.layers:
            if layer.gated:
                assert np.allclose(layer.G, 1.0 / arch.n_branches, atol=1e-15)

    def test_deterministic(self):
        a = init_params(small_arch(), 42)
        b = init_params(small_arch(), 42)
        for n in a.tensors:
            assert np.array_equal(a.tensors[n], b.tensors[n])


class TestProperties:
    def test_gate_weights_sum_to_one(self):
        arch = small_arch()
        ps = randomized_params(init_params(arch, 0), 8, scale=0.8)
        UA, VA, _, groups = random_batch(arch, 1000, 6)
        _, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
        for layer in cache.layers:
            if layer.gated:
                assert np.all(layer.G >= 0.0) and np.all(layer.G <= 1.0)
                assert np.max(np.abs(layer.G.sum(axis=1) - 1.0)) < 1e-12

    def test_zero_adapter_one_hot_gate_equals_base(self):
        # zero-init adapters + forced common gate reproduce the plain model
        arch = small_arch(gate_mode=GATE_COMMON)
        base_arch = arch.base()
        ps = init_params(arch, 9)
        base = init_params(base_arch, 9)
        shared = {n: ps.tensors[n] for n in base.tensors}
        base = base.with_tensors(shared)
        UA, VA, _, groups = random_batch(arch, 100, 9)
        full_probs, _ = forward_batch(ps, UA, VA, groups)
        base_probs, _ = forward_batch(base, UA, VA)
        assert np.array_equal(full_probs, base_probs)

    def test_loss_decreases_under_sgd(self):
        arch = small_arch()
        ps = init_params(arch, 4)
        UA, VA, y, groups = random_batch(arch, 20, 4)
        losses = []
        for _ in range(100):
            probs, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
            losses.append(bce_loss(probs, y))
            grads = backward_batch(ps, cache, y)
            ps = sgd_step(ps, grads, 0.1)
        decreasing = sum(b < a for a, b in zip(losses, losses[1:]))
        assert decreasing >= 95

    def test_finite_after_training(self):
        arch = small_arch()
        ps = init_params(arch, 4)
        UA, VA, y, groups = random_batch(arch, 20, 4)
        for _ in range(50):
            probs, cache = forward_batch(ps, UA, VA, groups, want_cache=True)
            ps = sgd_step(ps, backward_batch(ps, cache, y), 0.2)
        ps.check_finite()

    def test_uniform_gate_mode_has_no_gate_tensors(self):
        ps = init_params(small_arch(gate_mode=GATE_UNIFORM), 0)
        assert ps.names("gate/*") == []


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        ps = randomized_params(init_params(small_arch(), 5), 5)
        path = str(tmp_path / "ckpt.npz")
        save_params(ps, path)
        back = load_params(path)
        assert back.arch == ps.arch
        assert back.tags == ps.tags
        assert set(back.tensors) == set(ps.tensors)
        for n in ps.tensors:
            assert np.array_equal(back.tensors[n], ps.tensors[n])
