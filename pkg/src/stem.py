"""
Residual MLP stem projecting raw per-sequence features into the latent space.

    y = LayerNorm(Proj(x) + W2 gelu(W1 x + b1) + b2)

Proj is the identity when raw_dim == D, a learned bias-free map otherwise.
Each sequence owns its parameters under `stem.<seq>.`.
"""
from typing import Dict, Tuple

import numpy as np

from src.config import Sequence
from src.errors import ShapeError
from src.nn import (
    ParamStore, as_tensor2, gelu, gelu_grad, glorot,
    layer_norm, layer_norm_backward, linear, linear_backward,
)


def stem_prefix(seq: Sequence) -> str:
    return f"stem.{Sequence(seq).value}"


def init_stem(store: ParamStore, raw_dim: int, latent_dim: int, rng: np.random.Generator):
    for seq in Sequence:
        p = stem_prefix(seq)
        store.add(f"{p}.w1", glorot(rng, raw_dim, latent_dim))
        store.add(f"{p}.b1", np.zeros(latent_dim))
        store.add(f"{p}.w2", glorot(rng, latent_dim, latent_dim))
        store.add(f"{p}.b2", np.zeros(latent_dim))
        if raw_dim != latent_dim:
            store.add(f"{p}.proj", glorot(rng, raw_dim, latent_dim))
        store.add(f"{p}.ln_gain", np.ones(latent_dim))
        store.add(f"{p}.ln_bias", np.zeros(latent_dim))


def stem_forward(raw, seq: Sequence, store: ParamStore) -> Tuple[np.ndarray, dict]:
    """(B, raw_dim) -> (B, D)."""
    p = stem_prefix(seq)
    x = as_tensor2(raw, "raw")
    w1 = store[f"{p}.w1"]
    if x.shape[1] != w1.shape[0]:
        raise ShapeError(f"{p}: raw dim {x.shape[1]} != configured {w1.shape[0]}")

    h_pre, c1 = linear(x, w1, store[f"{p}.b1"])
    h = gelu(h_pre)
    mlp, c2 = linear(h, store[f"{p}.w2"], store[f"{p}.b2"])
    proj_name = f"{p}.proj"
    if proj_name in store:
        residual, c_proj = linear(x, store[proj_name])
    else:
        residual, c_proj = x, None
    y, c_ln = layer_norm(residual + mlp, store[f"{p}.ln_gain"], store[f"{p}.ln_bias"])
    return y, {"prefix": p, "h_pre": h_pre, "c1": c1, "c2": c2, "c_proj": c_proj, "c_ln": c_ln}


def stem_backward(dy: np.ndarray, cache: dict) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    p = cache["prefix"]
    grads = {}
    d_sum, grads[f"{p}.ln_gain"], grads[f"{p}.ln_bias"] = layer_norm_backward(dy, cache["c_ln"])
    dh, grads[f"{p}.w2"], grads[f"{p}.b2"] = linear_backward(d_sum, cache["c2"])
    dx, grads[f"{p}.w1"], grads[f"{p}.b1"] = linear_backward(dh * gelu_grad(cache["h_pre"]), cache["c1"])
    if cache["c_proj"] is not None:
        dx_res, grads[f"{p}.proj"], _ = linear_backward(d_sum, cache["c_proj"])
    else:
        dx_res = d_sum
    return dx + dx_res, grads
