"""
Dynamically Weighted Experts Fusion Module.

Each sequence has an expert (Linear D->D, GELU, Linear D->D_e, LayerNorm).
Both experts look at both completed features; the views of one input are
concatenated, scaled by that input's router confidence and projected to f_f.
"""
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from src.config import Sequence
from src.errors import ShapeError
from src.nn import (
    ParamStore, as_tensor2, gelu, gelu_grad, glorot, layer_norm,
    layer_norm_backward, linear, linear_backward, softmax, softmax_backward,
)

ROUTER = "dwefm.router"
PROJ = "dwefm.proj"


def expert_prefix(seq: Sequence) -> str:
    return f"dwefm.expert_{Sequence(seq).value}"


def init_dwefm(store: ParamStore, latent_dim: int, expert_dim: int, fused_dim: int, rng: np.random.Generator):
    for seq in Sequence:
        p = expert_prefix(seq)
        store.add(f"{p}.w1", glorot(rng, latent_dim, latent_dim))
        store.add(f"{p}.b1", np.zeros(latent_dim))
        store.add(f"{p}.w2", glorot(rng, latent_dim, expert_dim))
        store.add(f"{p}.b2", np.zeros(expert_dim))
        store.add(f"{p}.ln_gain", np.ones(expert_dim))
        store.add(f"{p}.ln_bias", np.zeros(expert_dim))
    store.add(f"{ROUTER}.w", glorot(rng, latent_dim, 1))
    store.add(f"{ROUTER}.b", np.zeros(1))
    store.add(f"{PROJ}.w", glorot(rng, 4 * expert_dim, fused_dim))
    store.add(f"{PROJ}.b", np.zeros(fused_dim))


@dataclass
class FusionState:
    e_fl: np.ndarray      # (B, 2 D_e): [E_FL(f_fl), E_T1C(f_fl)]
    e_t1c: np.ndarray     # (B, 2 D_e): [E_T1C(f_t1c), E_FL(f_t1c)]
    w: np.ndarray         # (B, 2) confidence weights, rows sum to 1
    e_w_fl: np.ndarray
    e_w_t1c: np.ndarray
    f_f: np.ndarray


# === Experts ===
def expert_forward(x: np.ndarray, expert: Sequence, store: ParamStore) -> Tuple[np.ndarray, dict]:
    p = expert_prefix(expert)
    h_pre, c1 = linear(x, store[f"{p}.w1"], store[f"{p}.b1"])
    out, c2 = linear(gelu(h_pre), store[f"{p}.w2"], store[f"{p}.b2"])
    y, c_ln = layer_norm(out, store[f"{p}.ln_gain"], store[f"{p}.ln_bias"])
    return y, {"prefix": p, "h_pre": h_pre, "c1": c1, "c2": c2, "c_ln": c_ln}


def expert_backward(dy: np.ndarray, cache: dict) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    p = cache["prefix"]
    grads = {}
    d_out, grads[f"{p}.ln_gain"], grads[f"{p}.ln_bias"] = layer_norm_backward(dy, cache["c_ln"])
    dh, grads[f"{p}.w2"], grads[f"{p}.b2"] = linear_backward(d_out, cache["c2"])
    dx, grads[f"{p}.w1"], grads[f"{p}.b1"] = linear_backward(dh * gelu_grad(cache["h_pre"]), cache["c1"])
    return dx, grads


def _check_pair(f_fl, f_t1c) -> Tuple[np.ndarray, np.ndarray]:
    f_fl = as_tensor2(f_fl, "f_fl")
    f_t1c = as_tensor2(f_t1c, "f_t1c")
    if f_fl.shape != f_t1c.shape:
        raise ShapeError(f"f_fl {f_fl.shape} and f_t1c {f_t1c.shape} differ")
    return f_fl, f_t1c


def expert_views(f_fl, f_t1c, store: ParamStore) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Native view first, cross view second, grouped by input sequence."""
    f_fl, f_t1c = _check_pair(f_fl, f_t1c)
    caches = {}
    views = {}
    for seq, x in ((Sequence.FL, f_fl), (Sequence.T1C, f_t1c)):
        native, caches[(seq, "native")] = expert_forward(x, seq, store)
        cross, caches[(seq, "cross")] = expert_forward(x, seq.other, store)
        views[seq] = np.concatenate([native, cross], axis=1)
    return views[Sequence.FL], views[Sequence.T1C], caches


def expert_views_backward(
    d_e_fl: np.ndarray, d_e_t1c: np.ndarray, caches: dict
) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    grads: Dict[str, np.ndarray] = {}
    d_inputs = {}
    for seq, d_e in ((Sequence.FL, d_e_fl), (Sequence.T1C, d_e_t1c)):
        half = d_e.shape[1] // 2
        dx_native, g_native = expert_backward(d_e[:, :half], caches[(seq, "native")])
        dx_cross, g_cross = expert_backward(d_e[:, half:], caches[(seq, "cross")])
        d_inputs[seq] = dx_native + dx_cross
        for g in (g_native, g_cross):
            for name, value in g.items():
                grads[name] = grads[name] + value if name in grads else value
    return d_inputs[Sequence.FL], d_inputs[Sequence.T1C], grads


# === Router ===
def route(f_fl, f_t1c, store: ParamStore) -> Tuple[np.ndarray, dict]:
    """Softmax over the two scalar confidences [R(f_fl), R(f_t1c)]; returns (B, 2)."""
    f_fl, f_t1c = _check_pair(f_fl, f_t1c)
    r_w, r_b = store[f"{ROUTER}.w"], store[f"{ROUTER}.b"]
    logits = np.concatenate([f_fl @ r_w + r_b, f_t1c @ r_w + r_b], axis=1)
    w = softmax(logits, axis=1)
    return w, {"f_fl": f_fl, "f_t1c": f_t1c, "w": w, "r_w": r_w}


def route_backward(d_w: np.ndarray, cache: dict) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    d_logits = softmax_backward(d_w, cache["w"], axis=1)
    d0, d1 = d_logits[:, :1], d_logits[:, 1:]
    r_w = cache["r_w"]
    grads = {
        f"{ROUTER}.w": cache["f_fl"].T @ d0 + cache["f_t1c"].T @ d1,
        f"{ROUTER}.b": np.array([d_logits.sum()]),
    }
    return d0 @ r_w.T, d1 @ r_w.T, grads


# === Fusion ===
def fuse(e_fl: np.ndarray, e_t1c: np.ndarray, w: np.ndarray, store: ParamStore) -> Tuple[FusionState, dict]:
    """e_k^w = w_k * e_k; f_f = Linear(Cat(e_FL^w, e_T1C^w))."""
    if e_fl.shape != e_t1c.shape or w.shape != (e_fl.shape[0], 2):
        raise ShapeError("fusion inputs are inconsistent")
    e_w_fl = w[:, :1] * e_fl
    e_w_t1c = w[:, 1:] * e_t1c
    f_f, c = linear(np.concatenate([e_w_fl, e_w_t1c], axis=1), store[f"{PROJ}.w"], store[f"{PROJ}.b"])
    state = FusionState(e_fl=e_fl, e_t1c=e_t1c, w=w, e_w_fl=e_w_fl, e_w_t1c=e_w_t1c, f_f=f_f)
    return state, {"c": c, "state": state}


def fuse_backward(d_ff: np.ndarray, cache: dict):
    """Returns (d_e_fl, d_e_t1c, d_w, grads)."""
    s: FusionState = cache["state"]
    d_cat, d_pw, d_pb = linear_backward(d_ff, cache["c"])
    width = s.e_fl.shape[1]
    d_ew_fl, d_ew_t1c = d_cat[:, :width], d_cat[:, width:]
    d_w = np.stack([np.sum(d_ew_fl * s.e_fl, axis=1), np.sum(d_ew_t1c * s.e_t1c, axis=1)], axis=1)
    grads = {f"{PROJ}.w": d_pw, f"{PROJ}.b": d_pb}
    return s.w[:, :1] * d_ew_fl, s.w[:, 1:] * d_ew_t1c, d_w, grads


# === Composite ===
def dwefm_forward(f_fl, f_t1c, store: ParamStore) -> Tuple[FusionState, dict]:
    e_fl, e_t1c, c_views = expert_views(f_fl, f_t1c, store)
    w, c_route = route(f_fl, f_t1c, store)
    state, c_fuse = fuse(e_fl, e_t1c, w, store)
    return state, {"views": c_views, "route": c_route, "fuse": c_fuse}


def dwefm_backward(d_ff: np.ndarray, cache: dict) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    d_e_fl, d_e_t1c, d_w, grads = fuse_backward(d_ff, cache["fuse"])
    d_fl_r, d_t1c_r, g_route = route_backward(d_w, cache["route"])
    d_fl_e, d_t1c_e, g_views = expert_views_backward(d_e_fl, d_e_t1c, cache["views"])
    grads.update(g_route)
    grads.update(g_views)
    return d_fl_r + d_fl_e, d_t1c_r + d_t1c_e, grads
