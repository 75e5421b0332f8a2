"""
Differentiable building blocks with hand-written backward passes.

Each layer-like forward returns (output, cache) and its *_backward twin consumes
the upstream gradient plus that cache. Elementwise activations expose a value
function and a derivative function instead. Everything is float64.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np
from scipy import special

from src.errors import ConfigError, GradientCheckError, ShapeError

DTYPE = np.float64
_SQRT_2PI = np.sqrt(2.0 * np.pi)
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def as_tensor2(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (a 1-D input becomes one row)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return arr


# === Parameter Store ===
class ParamStore:
    """
    Named parameters, one gradient accumulator per parameter and a frozen flag
    per group. A parameter's group defaults to its name minus the last segment
    (`cggm.fl_to_t1c.wq` -> `cggm.fl_to_t1c`).
    """

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._groups: Dict[str, str] = {}
        self.frozen: Set[str] = set()

    def add(self, name: str, value, group: Optional[str] = None) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE, order="C", copy=True)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._groups[name] = group or name.rsplit(".", 1)[0]
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def group(self, name: str) -> str:
        return self._groups[name]

    def _matching_groups(self, prefix: str) -> Set[str]:
        matched = {g for g in self._groups.values() if g == prefix or g.startswith(prefix + ".")}
        if not matched:
            raise ConfigError(f"no parameter group matches {prefix!r}")
        return matched

    def freeze(self, prefix: str):
        self.frozen |= self._matching_groups(prefix)

    def is_frozen(self, name: str) -> bool:
        return self._groups[name] in self.frozen

    def trainable_names(self) -> List[str]:
        return [n for n in self.params if not self.is_frozen(n)]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Mapping[str, np.ndarray]):
        """Add gradients; frozen parameters silently keep a zero accumulator."""
        for name, g in grads.items():
            if name not in self.params:
                raise ConfigError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {self.params[name].shape}")
            if self.is_frozen(name):
                continue
            self.grads[name] += g

    def grad(self, name: str) -> Optional[np.ndarray]:
        """Accumulated gradient, or None for a frozen parameter."""
        return None if self.is_frozen(name) else self.grads[name]

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {n: p.copy() for n, p in self.params.items() if n.startswith(prefix)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        for name, value in state.items():
            if name not in self.params:
                if strict:
                    raise ConfigError(f"unexpected parameter {name!r}")
                continue
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name][...] = value
        if strict:
            missing = set(self.params) - set(state)
            if missing:
                raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.params.items():
            other.add(name, value, group=self._groups[name])
        other.frozen = set(self.frozen)
        return other

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# === Linear ===
def linear(x, W: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, tuple]:
    """y = xW + b over the last axis of x."""
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {W.shape}")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
        y = y + b
    return y, (x, W, b is not None)


def linear_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x, W, has_bias = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dW, db


# === Activations ===
def gelu(x) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    x = np.asarray(x, dtype=DTYPE)
    return x * special.ndtr(x)


def gelu_grad(x) -> np.ndarray:
    """d/dx [x Phi(x)] = Phi(x) + x phi(x)."""
    x = np.asarray(x, dtype=DTYPE)
    return special.ndtr(x) + x * np.exp(-0.5 * x * x) / _SQRT_2PI


def sigmoid(x) -> np.ndarray:
    """Logistic function, kept strictly inside (0, 1) even where float64 saturates."""
    s = special.expit(np.asarray(x, dtype=DTYPE))
    return np.clip(s, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid_grad_from_output(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; tied inputs give an exactly uniform output."""
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, s: np.ndarray, axis: int = -1) -> np.ndarray:
    return s * (dy - np.sum(dy * s, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x - special.logsumexp(x, axis=axis, keepdims=True)


# === Layer Normalization ===
def layer_norm(x, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> Tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shape {gain.shape} does not match features {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std, gain)


def layer_norm_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std, gain = cache
    lead = tuple(range(dy.ndim - 1))
    d_gain = np.sum(dy * x_hat, axis=lead)
    d_bias = np.sum(dy, axis=lead)
    d_xhat = dy * gain
    dx = inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - x_hat * np.mean(d_xhat * x_hat, axis=-1, keepdims=True)
    )
    return dx, d_gain, d_bias


# === Multi-head Cross-attention ===
ATTENTION_PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class AttentionConfig:
    """
    T query slots of width d that together span the model width D = T x d.
    Q/K/V projections act per token (d -> d); the output projection acts on
    the flattened query slots (D -> D).
    """
    num_heads: int
    num_tokens: int
    token_dim: int
    model_dim: int

    def __post_init__(self):
        if min(self.num_heads, self.num_tokens, self.token_dim, self.model_dim) < 1:
            raise ConfigError("attention dimensions must be positive")
        if self.num_tokens * self.token_dim != self.model_dim:
            raise ConfigError(
                f"num_tokens x token_dim ({self.num_tokens} x {self.token_dim}) must equal model_dim {self.model_dim}"
            )
        if self.token_dim % self.num_heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.num_heads


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    d, D = cfg.token_dim, cfg.model_dim
    return {
        "wq": glorot(rng, d, d), "bq": np.zeros(d),
        "wk": glorot(rng, d, d), "bk": np.zeros(d),
        "wv": glorot(rng, d, d), "bv": np.zeros(d),
        "wo": glorot(rng, D, D), "bo": np.zeros(D),
    }


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    B, L, d = t.shape
    return t.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    B, h, L, e = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, L, h * e)


def mh_cross_attention(
    q_tokens,
    k_tokens,
    v_tokens,
    cfg: AttentionConfig,
    params: Mapping[str, np.ndarray],
) -> Tuple[np.ndarray, dict]:
    """
    Scaled dot-product attention per head (scale 1/sqrt(head_dim)).

    q_tokens: (B, T, d); k_tokens, v_tokens: (B, L, d). Returns (B, T, d).
    The cache exposes the attention weights under "attn" with shape (B, heads, T, L).
    """
    q_tokens = np.asarray(q_tokens, dtype=DTYPE)
    k_tokens = np.asarray(k_tokens, dtype=DTYPE)
    v_tokens = np.asarray(v_tokens, dtype=DTYPE)
    T, d, h = cfg.num_tokens, cfg.token_dim, cfg.num_heads
    if q_tokens.ndim != 3 or q_tokens.shape[1:] != (T, d):
        raise ShapeError(f"query tokens must be (B, {T}, {d}), got {q_tokens.shape}")
    if k_tokens.ndim != 3 or k_tokens.shape[-1] != d:
        raise ShapeError(f"key tokens must be (B, L, {d}), got {k_tokens.shape}")
    if v_tokens.shape != k_tokens.shape:
        raise ShapeError(f"value tokens {v_tokens.shape} must match key tokens {k_tokens.shape}")
    if q_tokens.shape[0] != k_tokens.shape[0]:
        raise ShapeError("query and key batches differ")
    B = q_tokens.shape[0]
    scale = 1.0 / np.sqrt(cfg.head_dim)

    q = _split_heads(q_tokens @ params["wq"] + params["bq"], h)
    k = _split_heads(k_tokens @ params["wk"] + params["bk"], h)
    v = _split_heads(v_tokens @ params["wv"] + params["bv"], h)

    scores = np.einsum("bhte,bhle->bhtl", q, k) * scale
    attn = softmax(scores, axis=-1)
    ctx = np.einsum("bhtl,bhle->bhte", attn, v)
    merged = _merge_heads(ctx).reshape(B, cfg.model_dim)
    out = merged @ params["wo"] + params["bo"]

    cache = {
        "cfg": cfg, "params": params, "scale": scale,
        "q_tokens": q_tokens, "k_tokens": k_tokens, "v_tokens": v_tokens,
        "q": q, "k": k, "v": v, "attn": attn, "merged": merged,
    }
    return out.reshape(B, T, d), cache


def mh_cross_attention_backward(
    d_out_tokens: np.ndarray, cache: dict
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns (d_q_tokens, d_k_tokens, d_v_tokens, parameter gradients)."""
    cfg: AttentionConfig = cache["cfg"]
    p = cache["params"]
    q, k, v, attn = cache["q"], cache["k"], cache["v"], cache["attn"]
    B = d_out_tokens.shape[0]
    h = cfg.num_heads

    d_out = d_out_tokens.reshape(B, cfg.model_dim)
    grads = {"wo": cache["merged"].T @ d_out, "bo": d_out.sum(axis=0)}
    d_merged = (d_out @ p["wo"].T).reshape(B, cfg.num_tokens, cfg.token_dim)
    d_ctx = _split_heads(d_merged, h)

    d_attn = np.einsum("bhte,bhle->bhtl", d_ctx, v)
    d_v = np.einsum("bhtl,bhte->bhle", attn, d_ctx)
    d_scores = softmax_backward(d_attn, attn) * cache["scale"]
    d_q = np.einsum("bhtl,bhle->bhte", d_scores, k)
    d_k = np.einsum("bhtl,bhte->bhle", d_scores, q)

    inputs = {}
    for key, d_proj, tokens in (
        ("q", _merge_heads(d_q), cache["q_tokens"]),
        ("k", _merge_heads(d_k), cache["k_tokens"]),
        ("v", _merge_heads(d_v), cache["v_tokens"]),
    ):
        grads["w" + key] = np.einsum("bli,blj->ij", tokens, d_proj)
        grads["b" + key] = d_proj.sum(axis=(0, 1))
        inputs[key] = d_proj @ p["w" + key].T
    return inputs["q"], inputs["k"], inputs["v"], grads


# === Gradient Checking ===
GRAD_CHECK_FLOOR = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = GRAD_CHECK_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check_report(
    computation: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, Optional[float]]:
    """
    Worst relative error per parameter between analytic and central-difference
    gradients. `computation` must zero the store's gradients, run forward and
    backward, accumulate into the store and return the scalar loss.
    Frozen parameters report None (no analytic gradient).
    """
    def evaluate() -> float:
        value = float(computation(store))
        if not np.isfinite(value):
            raise GradientCheckError(f"non-finite loss during gradient check: {value}")
        return value

    evaluate()
    analytic = {n: store.grads[n].copy() for n in store.trainable_names()}
    rng = np.random.default_rng(seed)
    report: Dict[str, Optional[float]] = {}

    for name in (list(names) if names is not None else store.names()):
        if store.is_frozen(name):
            report[name] = None
            continue
        flat = store.params[name].reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            loss_plus = evaluate()
            flat[i] = original - eps
            loss_minus = evaluate()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            worst = max(worst, relative_error(a_flat[i], numeric))
        report[name] = worst

    # leave the store holding the unperturbed gradients
    evaluate()
    return report


def grad_check(
    computation: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst relative error over all trainable parameters."""
    report = grad_check_report(computation, store, eps=eps, max_entries=max_entries, seed=seed)
    errors = [e for e in report.values() if e is not None]
    return max(errors) if errors else 0.0
