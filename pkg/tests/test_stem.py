"""
Tests for the per-sequence residual stem.
"""
import numpy as np
import pytest

from src.config import Sequence
from src.errors import ShapeError
from src.nn import ParamStore, gelu, grad_check
from src.stem import init_stem, stem_backward, stem_forward


@pytest.fixture
def stem_store(rng):
    store = ParamStore()
    init_stem(store, raw_dim=6, latent_dim=8, rng=rng)
    return store


class TestStemForward:
    def test_shape_and_normalization(self, stem_store, rng):
        y, _ = stem_forward(rng.normal(size=(5, 6)), Sequence.FL, stem_store)
        assert y.shape == (5, 8)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)

    def test_matches_formula(self, stem_store, rng):
        x = rng.normal(size=(3, 6))
        p = {n.split(".")[-1]: stem_store[n] for n in stem_store.names("stem.t1c.")}
        pre = x @ p["proj"] + gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        centered = pre - pre.mean(axis=1, keepdims=True)
        expected = centered / np.sqrt(centered.var(axis=1, keepdims=True) + 1e-5)
        y, _ = stem_forward(x, Sequence.T1C, stem_store)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_identity_residual_when_widths_match(self, rng):
        store = ParamStore()
        init_stem(store, raw_dim=8, latent_dim=8, rng=rng)
        assert "stem.fl.proj" not in store
        y, _ = stem_forward(rng.normal(size=(2, 8)), Sequence.FL, store)
        assert y.shape == (2, 8)

    def test_sequences_have_own_parameters(self, stem_store, rng):
        x = rng.normal(size=(2, 6))
        y_fl, _ = stem_forward(x, Sequence.FL, stem_store)
        y_t1c, _ = stem_forward(x, Sequence.T1C, stem_store)
        assert not np.allclose(y_fl, y_t1c)

    def test_wrong_raw_dim(self, stem_store):
        with pytest.raises(ShapeError):
            stem_forward(np.zeros((2, 5)), Sequence.FL, stem_store)

    def test_non_finite_input(self, stem_store):
        x = np.zeros((1, 6))
        x[0, 2] = np.inf
        with pytest.raises(ShapeError):
            stem_forward(x, Sequence.FL, stem_store)


class TestStemBackward:
    @pytest.mark.parametrize("raw_dim", [6, 8])
    def test_gradient(self, rng, raw_dim):
        store = ParamStore()
        init_stem(store, raw_dim=raw_dim, latent_dim=8, rng=rng)
        store.add("input.x", rng.normal(size=(4, raw_dim)))
        r = rng.normal(size=(4, 8))

        def computation(s):
            s.zero_grad()
            y, cache = stem_forward(s["input.x"], Sequence.FL, s)
            dx, grads = stem_backward(r, cache)
            s.accumulate(grads)
            s.accumulate({"input.x": dx})
            return float(np.sum(y * r))

        store.freeze("stem.t1c")
        assert grad_check(computation, store) < 1e-4
        assert all(store.grad(n) is not None for n in store.names("stem.fl."))
        assert store.grad("stem.t1c.w1") is None
