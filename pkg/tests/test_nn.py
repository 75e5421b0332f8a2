"""
Tests for the differentiable primitives, the parameter store and the
finite-difference checker.
"""
import numpy as np
import pytest

from src.errors import ConfigError, GradientCheckError, ShapeError
from src.nn import (
    AttentionConfig, ParamStore, gelu, gelu_grad, grad_check, grad_check_report,
    init_attention_params, layer_norm, layer_norm_backward, linear, linear_backward,
    mh_cross_attention, mh_cross_attention_backward, sigmoid, softmax,
)


def _attention_store(cfg, rng, prefix="attn"):
    store = ParamStore()
    for name, value in init_attention_params(cfg, rng).items():
        store.add(f"{prefix}.{name}", value)
        # non-zero biases so their gradients are exercised
        if name.startswith("b"):
            store[f"{prefix}.{name}"][...] = rng.normal(scale=0.1, size=value.shape)
    return store


def _params(store, prefix="attn"):
    return {k.split(".")[-1]: store[k] for k in store.names(prefix + ".")}


def _brute_force_attention(q_tokens, k_tokens, v_tokens, cfg, p):
    B, T, d = q_tokens.shape
    e = cfg.head_dim
    out = np.zeros((B, T, d))
    for b in range(B):
        q = q_tokens[b] @ p["wq"] + p["bq"]
        k = k_tokens[b] @ p["wk"] + p["bk"]
        v = v_tokens[b] @ p["wv"] + p["bv"]
        ctx = np.zeros((T, d))
        for h in range(cfg.num_heads):
            cols = slice(h * e, (h + 1) * e)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(e)
            weights = np.exp(scores - scores.max(axis=1, keepdims=True))
            weights /= weights.sum(axis=1, keepdims=True)
            ctx[:, cols] = weights @ v[:, cols]
        out[b] = (ctx.reshape(-1) @ p["wo"] + p["bo"]).reshape(T, d)
    return out


class TestLinear:
    def test_identity(self):
        y, _ = linear(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_zero_input_passes_bias(self, rng):
        y, _ = linear(np.zeros((1, 2)), rng.normal(size=(2, 2)), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(y, [[3.0, 4.0]])

    def test_matches_dot_products(self, rng):
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        y, _ = linear(x, W, b)
        expected = np.array([[sum(x[i, k] * W[k, j] for k in range(4)) + b[j] for j in range(5)] for i in range(3)])
        np.testing.assert_allclose(y, expected, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            linear(np.zeros((2, 3)), rng.normal(size=(4, 2)))

    def test_backward_shapes(self, rng):
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), np.zeros(2)
        y, cache = linear(x, W, b)
        dx, dW, db = linear_backward(np.ones_like(y), cache)
        assert dx.shape == x.shape and dW.shape == W.shape and db.shape == b.shape
        np.testing.assert_allclose(db, [3.0, 3.0])


class TestActivations:
    def test_gelu_values(self):
        assert gelu(0.0) == 0.0
        assert abs(gelu(10.0) - 10.0) < 1e-9
        assert gelu_grad(0.0) == pytest.approx(0.5, abs=1e-15)

    def test_gelu_monotone_on_positive_grid(self):
        grid = np.linspace(-0.5, 6, 200)
        assert np.all(np.diff(gelu(grid)) > 0)

    def test_sigmoid_values(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(np.log(3.0)) == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_symmetry_and_range(self, rng):
        x = rng.normal(scale=5, size=100)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)
        extreme = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(extreme > 0.0) and np.all(extreme < 1.0)
        assert np.all(np.diff(sigmoid(np.linspace(-20, 20, 101))) >= 0)

    def test_softmax_values(self):
        np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
        np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_softmax_shift_invariance_and_sum(self, rng):
        x = rng.normal(size=(10, 7))
        s = softmax(x, axis=1)
        np.testing.assert_allclose(s, softmax(x + 3.7, axis=1), atol=1e-15)
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        y, _ = layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(y, np.zeros((1, 4)))

    def test_normalized_row(self):
        y, _ = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-14)
        np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-12)

    def test_moments(self, rng):
        y, _ = layer_norm(rng.normal(loc=2.0, scale=3.0, size=(1, 50)), np.ones(50), np.zeros(50), eps=1e-12)
        assert abs(y.mean()) < 1e-10
        assert abs(y.var() - 1.0) < 1e-6

    def test_needs_two_features(self):
        with pytest.raises(ShapeError):
            layer_norm(np.ones((2, 1)), np.ones(1), np.zeros(1))

    def test_gradient(self, rng):
        store = ParamStore()
        store.add("ln.gain", rng.normal(size=5))
        store.add("ln.bias", rng.normal(size=5))
        store.add("input.x", rng.normal(size=(3, 5)))
        r = rng.normal(size=(3, 5))

        def computation(s):
            s.zero_grad()
            y, cache = layer_norm(s["input.x"], s["ln.gain"], s["ln.bias"])
            dx, dg, db = layer_norm_backward(r, cache)
            s.accumulate({"ln.gain": dg, "ln.bias": db, "input.x": dx})
            return float(np.sum(y * r))

        assert grad_check(computation, store) < 1e-4


class TestAttention:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AttentionConfig(num_heads=2, num_tokens=3, token_dim=4, model_dim=16)
        with pytest.raises(ConfigError):
            AttentionConfig(num_heads=3, num_tokens=4, token_dim=4, model_dim=16)
        # D need not be divisible by the head count, only d is
        assert AttentionConfig(num_heads=2, num_tokens=3, token_dim=2, model_dim=6).head_dim == 1

    def test_single_key_token(self, rng):
        cfg = AttentionConfig(num_heads=2, num_tokens=3, token_dim=4, model_dim=12)
        store = _attention_store(cfg, rng)
        p = _params(store)
        q = rng.normal(size=(2, 3, 4))
        kv = rng.normal(size=(2, 1, 4))
        out, cache = mh_cross_attention(q, kv, kv, cfg, p)
        np.testing.assert_array_equal(cache["attn"], np.ones((2, 2, 3, 1)))
        v_proj = kv[:, 0] @ p["wv"] + p["bv"]
        expected = np.tile(v_proj, (1, 3)) @ p["wo"] + p["bo"]
        np.testing.assert_allclose(out.reshape(2, 12), expected, atol=1e-12)

    def test_zero_queries_attend_uniformly(self, rng):
        cfg = AttentionConfig(num_heads=2, num_tokens=2, token_dim=4, model_dim=8)
        p = _params(_attention_store(cfg, rng))
        p["wq"] = np.zeros_like(p["wq"])
        p["bq"] = np.zeros_like(p["bq"])
        kv = rng.normal(size=(1, 5, 4))
        out, cache = mh_cross_attention(rng.normal(size=(1, 2, 4)), kv, kv, cfg, p)
        np.testing.assert_allclose(cache["attn"], 0.2, atol=1e-15)
        v_mean = (kv[0] @ p["wv"] + p["bv"]).mean(axis=0)
        expected = np.tile(v_mean, 2) @ p["wo"] + p["bo"]
        np.testing.assert_allclose(out.reshape(-1), expected, atol=1e-12)

    def test_matches_brute_force(self, rng):
        cfg = AttentionConfig(num_heads=2, num_tokens=2, token_dim=4, model_dim=8)
        p = _params(_attention_store(cfg, rng))
        q, k, v = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
        out, cache = mh_cross_attention(q, k, v, cfg, p)
        np.testing.assert_allclose(out, _brute_force_attention(q, k, v, cfg, p), atol=1e-12)
        np.testing.assert_allclose(cache["attn"].sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_errors(self, rng):
        cfg = AttentionConfig(num_heads=2, num_tokens=2, token_dim=4, model_dim=8)
        p = _params(_attention_store(cfg, rng))
        with pytest.raises(ShapeError):
            mh_cross_attention(np.zeros((1, 3, 4)), np.zeros((1, 2, 4)), np.zeros((1, 2, 4)), cfg, p)
        with pytest.raises(ShapeError):
            mh_cross_attention(np.zeros((1, 2, 4)), np.zeros((1, 2, 4)), np.zeros((1, 3, 4)), cfg, p)

    def test_gradient(self, rng):
        cfg = AttentionConfig(num_heads=2, num_tokens=2, token_dim=4, model_dim=8)
        store = _attention_store(cfg, rng)
        store.add("tokens.q", rng.normal(size=(2, 2, 4)))
        store.add("tokens.k", rng.normal(size=(2, 3, 4)))
        store.add("tokens.v", rng.normal(size=(2, 3, 4)))
        r = rng.normal(size=(2, 2, 4))

        def computation(s):
            s.zero_grad()
            out, cache = mh_cross_attention(s["tokens.q"], s["tokens.k"], s["tokens.v"], cfg, _params(s))
            dq, dk, dv, grads = mh_cross_attention_backward(r, cache)
            s.accumulate({f"attn.{k}": g for k, g in grads.items()})
            s.accumulate({"tokens.q": dq, "tokens.k": dk, "tokens.v": dv})
            return float(np.sum(out * r))

        assert grad_check(computation, store) < 1e-4


class TestParamStore:
    def test_groups_and_freeze(self):
        store = ParamStore()
        store.add("cggm.fl_to_t1c.wq", np.ones((2, 2)))
        store.add("cggm.t1c_to_fl.wq", np.ones((2, 2)))
        store.add("head.idh.w", np.ones((2, 2)))
        assert store.group("cggm.fl_to_t1c.wq") == "cggm.fl_to_t1c"
        store.freeze("cggm")
        assert store.is_frozen("cggm.t1c_to_fl.wq")
        assert store.trainable_names() == ["head.idh.w"]
        store.accumulate({"cggm.fl_to_t1c.wq": np.ones((2, 2)), "head.idh.w": np.ones((2, 2))})
        assert store.grad("cggm.fl_to_t1c.wq") is None
        np.testing.assert_array_equal(store.grads["cggm.fl_to_t1c.wq"], np.zeros((2, 2)))
        np.testing.assert_array_equal(store.grad("head.idh.w"), np.ones((2, 2)))

    def test_errors(self):
        store = ParamStore()
        store.add("a.w", np.zeros(3))
        with pytest.raises(ConfigError):
            store.add("a.w", np.zeros(3))
        with pytest.raises(ConfigError):
            store.freeze("nothing")
        with pytest.raises(ShapeError):
            store.accumulate({"a.w": np.zeros(4)})
        with pytest.raises(ConfigError):
            store.load_state_dict({"b.w": np.zeros(3)})

    def test_state_round_trip(self, rng):
        store = ParamStore()
        store.add("a.w", rng.normal(size=(2, 3)))
        copy = store.copy()
        copy["a.w"][...] = 0.0
        assert not np.array_equal(store["a.w"], copy["a.w"])
        copy.load_state_dict(store.state_dict())
        np.testing.assert_array_equal(store["a.w"], copy["a.w"])
        assert store.num_parameters() == 6


class TestGradCheck:
    def test_linear_sum_exact(self, rng):
        store = ParamStore()
        store.add("lin.W", rng.normal(size=(3, 2)))
        x = rng.normal(size=(4, 3))

        def computation(s):
            s.zero_grad()
            y, cache = linear(x, s["lin.W"])
            _, dW, _ = linear_backward(np.ones_like(y), cache)
            s.accumulate({"lin.W": dW})
            return float(y.sum())

        assert grad_check(computation, store) < 1e-8

    def test_gelu_linear_composition(self, rng):
        store = ParamStore()
        store.add("lin.W", rng.normal(size=(3, 2)))
        store.add("lin.b", rng.normal(size=2))
        x = rng.normal(size=(4, 3))

        def computation(s):
            s.zero_grad()
            h, cache = linear(x, s["lin.W"], s["lin.b"])
            _, dW, db = linear_backward(gelu_grad(h), cache)
            s.accumulate({"lin.W": dW, "lin.b": db})
            return float(gelu(h).sum())

        assert grad_check(computation, store) < 1e-4

    def test_frozen_group_reports_none(self, rng):
        store = ParamStore()
        store.add("a.w", rng.normal(size=2))
        store.add("b.w", rng.normal(size=2))
        store.freeze("b")

        def computation(s):
            s.zero_grad()
            s.accumulate({"a.w": 2 * s["a.w"], "b.w": 2 * s["b.w"]})
            return float(np.sum(s["a.w"] ** 2) + np.sum(s["b.w"] ** 2))

        report = grad_check_report(computation, store)
        assert report["b.w"] is None
        assert report["a.w"] < 1e-6

    def test_non_finite_loss(self):
        store = ParamStore()
        store.add("a.w", np.zeros(1))
        with pytest.raises(GradientCheckError):
            grad_check(lambda s: float("nan"), store)
