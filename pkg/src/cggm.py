"""
Cross-attention-based Gated Generation Module.

Synthesizes the latent feature of a missing sequence from the available one:
learnable query tokens attend over the available feature chunked into tokens,
a sigmoid gate scales the result, and the reverse direction closes a cycle for
the reconstruction objective. One independent parameter set per direction,
stored under `cggm.<direction>.`.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence as Seq, Tuple, Union

import numpy as np
import pandas as pd

from src.config import Direction, Sequence
from src.errors import ConfigError, EmptyInputError, ProtocolViolation, ShapeError
from src.nn import (
    ATTENTION_PARAM_NAMES, AttentionConfig, ParamStore, as_tensor2, glorot,
    init_attention_params, linear, linear_backward, log_softmax,
    mh_cross_attention, mh_cross_attention_backward, sigmoid,
    sigmoid_grad_from_output, softmax,
)


def cggm_prefix(direction: Direction) -> str:
    return f"cggm.{Direction(direction).value}"


def attention_config_for(latent_dim: int, num_tokens: int, num_heads: int) -> AttentionConfig:
    return AttentionConfig(num_heads=num_heads, num_tokens=num_tokens,
                           token_dim=latent_dim // num_tokens, model_dim=latent_dim)


def init_cggm(store: ParamStore, cfg: AttentionConfig, rng: np.random.Generator):
    D = cfg.model_dim
    for direction in Direction:
        p = cggm_prefix(direction)
        store.add(f"{p}.embedding", rng.normal(0.0, 1.0, size=(cfg.num_tokens, cfg.token_dim)))
        for name, value in init_attention_params(cfg, rng).items():
            store.add(f"{p}.{name}", value)
        store.add(f"{p}.gate_w", glorot(rng, 2 * D, D))
        store.add(f"{p}.gate_b", np.zeros(D))


@dataclass
class CggmOutput:
    f_cs: np.ndarray    # pre-gate synthesis
    alpha: np.ndarray   # gate coefficients, strictly inside (0, 1)
    f_m: np.ndarray     # alpha * f_cs
    f_u_cycle: Optional[np.ndarray] = None


@dataclass
class ReconLoss:
    mse: float
    kl: float
    cycle: float

    @property
    def total(self) -> float:
        return self.mse + self.kl + self.cycle

    def to_dict(self) -> Dict[str, float]:
        return {"mse": self.mse, "kl": self.kl, "cycle": self.cycle, "total": self.total}


# === Imputation ===
def impute(f_u, direction: Direction, store: ParamStore, cfg: AttentionConfig) -> Tuple[np.ndarray, dict]:
    """CrossAttention(E, f_u, f_u): embedding tokens query the chunked source feature."""
    p = cggm_prefix(direction)
    f_u = as_tensor2(f_u, "f_u")
    B = f_u.shape[0]
    if f_u.shape[1] != cfg.model_dim:
        raise ShapeError(f"{p}: feature width {f_u.shape[1]} != {cfg.model_dim}")
    kv = f_u.reshape(B, cfg.num_tokens, cfg.token_dim)
    queries = np.broadcast_to(store[f"{p}.embedding"], (B, cfg.num_tokens, cfg.token_dim))
    params = {k: store[f"{p}.{k}"] for k in ATTENTION_PARAM_NAMES}
    out, attn_cache = mh_cross_attention(queries, kv, kv, cfg, params)
    return out.reshape(B, cfg.model_dim), {"prefix": p, "cfg": cfg, "attn": attn_cache}


def impute_backward(d_fcs: np.ndarray, cache: dict) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    p, cfg = cache["prefix"], cache["cfg"]
    B = d_fcs.shape[0]
    dq, dk, dv, g = mh_cross_attention_backward(d_fcs.reshape(B, cfg.num_tokens, cfg.token_dim), cache["attn"])
    grads = {f"{p}.{k}": v for k, v in g.items()}
    grads[f"{p}.embedding"] = dq.sum(axis=0)
    return (dk + dv).reshape(B, cfg.model_dim), grads


# === Gate ===
def gate(f_cs: np.ndarray, f_u: np.ndarray, direction: Direction, store: ParamStore) -> Tuple[np.ndarray, np.ndarray, dict]:
    """alpha = sigmoid(Linear(Cat(f_cs, f_u))); f_m = alpha * f_cs."""
    p = cggm_prefix(direction)
    if f_cs.shape != f_u.shape:
        raise ShapeError(f"{p}: gate inputs differ in shape {f_cs.shape} vs {f_u.shape}")
    z, c = linear(np.concatenate([f_cs, f_u], axis=1), store[f"{p}.gate_w"], store[f"{p}.gate_b"])
    alpha = sigmoid(z)
    return alpha, alpha * f_cs, {"prefix": p, "c": c, "alpha": alpha, "f_cs": f_cs}


def gate_backward(d_fm: np.ndarray, cache: dict) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    p, alpha, f_cs = cache["prefix"], cache["alpha"], cache["f_cs"]
    D = f_cs.shape[1]
    dz = d_fm * f_cs * sigmoid_grad_from_output(alpha)
    d_cat, d_w, d_b = linear_backward(dz, cache["c"])
    grads = {f"{p}.gate_w": d_w, f"{p}.gate_b": d_b}
    return d_fm * alpha + d_cat[:, :D], d_cat[:, D:], grads


# === Generator (impute then gate) ===
def generate(f_u, direction: Direction, store: ParamStore, cfg: AttentionConfig) -> Tuple[CggmOutput, dict]:
    f_u = as_tensor2(f_u, "f_u")
    f_cs, c_imp = impute(f_u, direction, store, cfg)
    alpha, f_m, c_gate = gate(f_cs, f_u, direction, store)
    return CggmOutput(f_cs=f_cs, alpha=alpha, f_m=f_m), {"imp": c_imp, "gate": c_gate}


def generate_backward(d_fm: np.ndarray, cache: dict) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    d_fcs, d_fu_gate, grads = gate_backward(d_fm, cache["gate"])
    d_fu_imp, imp_grads = impute_backward(d_fcs, cache["imp"])
    grads.update(imp_grads)
    return d_fu_gate + d_fu_imp, grads


def cycle_reconstruct(f_m, reverse: Direction, store: ParamStore, cfg: AttentionConfig) -> Tuple[np.ndarray, dict]:
    """Map a synthesized target feature back to the source with the opposite generator."""
    out, cache = generate(f_m, reverse, store, cfg)
    return out.f_m, cache


def _merge(into: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], weight: float = 1.0):
    for name, g in grads.items():
        into[name] = into[name] + weight * g if name in into else weight * g


# === Reconstruction Objective ===
def recon_loss(f_m_hat, f_m_true, f_u_hat, f_u_true) -> ReconLoss:
    """
    mse(f_m_hat, f_m_true) + KL(softmax(f_m_true) || softmax(f_m_hat))
    + mse(f_u_hat, f_u_true); KL summed over features, everything averaged over rows.
    """
    f_m_hat, f_m_true = as_tensor2(f_m_hat), as_tensor2(f_m_true)
    f_u_hat, f_u_true = as_tensor2(f_u_hat), as_tensor2(f_u_true)
    if f_m_hat.shape != f_m_true.shape or f_u_hat.shape != f_u_true.shape:
        raise ShapeError("reconstruction pairs differ in shape")
    log_p = log_softmax(f_m_true)
    log_q = log_softmax(f_m_hat)
    kl = float(np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=1)))
    return ReconLoss(
        mse=float(np.mean((f_m_hat - f_m_true) ** 2)),
        kl=max(kl, 0.0),
        cycle=float(np.mean((f_u_hat - f_u_true) ** 2)),
    )


def recon_loss_grad(f_m_hat, f_m_true, f_u_hat, f_u_true) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the total wrt f_m_hat and f_u_hat (targets are constants)."""
    B, D = f_m_hat.shape
    d_fm = 2.0 * (f_m_hat - f_m_true) / f_m_hat.size
    d_fm = d_fm + (softmax(f_m_hat) - softmax(f_m_true)) / B
    d_fu = 2.0 * (f_u_hat - f_u_true) / f_u_hat.size
    return d_fm, d_fu


def direction_recon(
    source: np.ndarray, target: np.ndarray, direction: Direction, store: ParamStore, cfg: AttentionConfig
) -> Tuple[ReconLoss, Dict[str, np.ndarray], CggmOutput]:
    """Loss and parameter gradients for one direction: source -> target -> source."""
    out, c_fwd = generate(source, direction, store, cfg)
    out.f_u_cycle, c_cyc = cycle_reconstruct(out.f_m, direction.reverse, store, cfg)
    loss = recon_loss(out.f_m, target, out.f_u_cycle, source)
    d_fm, d_fu = recon_loss_grad(out.f_m, target, out.f_u_cycle, source)
    d_fm_from_cycle, grads = generate_backward(d_fu, c_cyc)
    _, fwd_grads = generate_backward(d_fm + d_fm_from_cycle, c_fwd)
    _merge(grads, fwd_grads)
    return loss, grads, out


# === Feature Pairs ===
@dataclass
class FeaturePair:
    """
    Dual latent features for a batch. Rows of an absent side hold placeholder
    values until completed; `*_synthesized` marks rows produced by the generator.
    """
    fl: np.ndarray
    t1c: np.ndarray
    fl_present: np.ndarray
    t1c_present: np.ndarray
    fl_synthesized: np.ndarray = field(default=None)
    t1c_synthesized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.fl = as_tensor2(self.fl, "fl")
        self.t1c = as_tensor2(self.t1c, "t1c")
        B = self.fl.shape[0]
        self.fl_present = np.broadcast_to(np.asarray(self.fl_present, dtype=bool), (B,)).copy()
        self.t1c_present = np.broadcast_to(np.asarray(self.t1c_present, dtype=bool), (B,)).copy()
        if self.fl_synthesized is None:
            self.fl_synthesized = np.zeros(B, dtype=bool)
        if self.t1c_synthesized is None:
            self.t1c_synthesized = np.zeros(B, dtype=bool)
        if self.t1c.shape != self.fl.shape:
            raise ShapeError(f"fl {self.fl.shape} and t1c {self.t1c.shape} differ")

    @classmethod
    def complete(cls, fl, t1c) -> "FeaturePair":
        fl = as_tensor2(fl)
        return cls(fl=fl, t1c=t1c, fl_present=np.ones(fl.shape[0], bool), t1c_present=np.ones(fl.shape[0], bool))

    def __len__(self) -> int:
        return self.fl.shape[0]

    def feature(self, seq: Sequence) -> np.ndarray:
        return self.fl if seq is Sequence.FL else self.t1c

    def present(self, seq: Sequence) -> np.ndarray:
        return self.fl_present if seq is Sequence.FL else self.t1c_present

    def synthesized(self, seq: Sequence) -> np.ndarray:
        return self.fl_synthesized if seq is Sequence.FL else self.t1c_synthesized

    @property
    def is_complete(self) -> np.ndarray:
        return self.fl_present & self.t1c_present


def complete_pair(pair: FeaturePair, store: ParamStore, cfg: AttentionConfig) -> Tuple[FeaturePair, dict]:
    """Fill every absent side with the generator of the matching direction."""
    if np.any(~pair.fl_present & ~pair.t1c_present):
        raise ProtocolViolation("feature pair with both sequences absent")
    features = {seq: pair.feature(seq).copy() for seq in Sequence}
    synthesized = {seq: pair.synthesized(seq).copy() for seq in Sequence}
    caches = {}
    for seq in Sequence:
        rows = np.flatnonzero(~pair.present(seq))
        if rows.size == 0:
            continue
        out, cache = generate(pair.feature(seq.other)[rows], Direction.generating(seq), store, cfg)
        features[seq][rows] = out.f_m
        synthesized[seq][rows] = True
        caches[seq] = (rows, cache)
    completed = FeaturePair(
        fl=features[Sequence.FL], t1c=features[Sequence.T1C],
        fl_present=np.ones(len(pair), bool), t1c_present=np.ones(len(pair), bool),
        fl_synthesized=synthesized[Sequence.FL], t1c_synthesized=synthesized[Sequence.T1C],
    )
    return completed, caches


def complete_pair_backward(
    d_fl: np.ndarray, d_t1c: np.ndarray, caches: dict
) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    d_in = {Sequence.FL: d_fl.copy(), Sequence.T1C: d_t1c.copy()}
    d_out = {Sequence.FL: d_fl, Sequence.T1C: d_t1c}
    grads: Dict[str, np.ndarray] = {}
    for seq, (rows, _) in caches.items():
        d_in[seq][rows] = 0.0
    for seq, (rows, cache) in caches.items():
        d_src, g = generate_backward(d_out[seq][rows], cache)
        d_in[seq.other][rows] += d_src
        _merge(grads, g)
    return d_in[Sequence.FL], d_in[Sequence.T1C], grads


# === Masked Self-supervised Pretraining ===
def draw_masks(n: int, mask_prob: Union[float, Seq[float]], rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample whole-sequence masks; a both-masked draw is redrawn."""
    if np.ndim(mask_prob) == 0:
        p_fl = p_t1c = float(mask_prob)
    else:
        p_fl, p_t1c = (float(v) for v in mask_prob)
    if not (0.0 <= p_fl <= 1.0 and 0.0 <= p_t1c <= 1.0):
        raise ConfigError(f"mask probabilities must lie in [0, 1], got ({p_fl}, {p_t1c})")
    if p_fl >= 1.0 and p_t1c >= 1.0:
        raise ConfigError("mask probabilities would mask both sequences every time")
    if p_fl <= 0.0 and p_t1c <= 0.0:
        raise ConfigError("mask probabilities would never mask a sequence")
    mask_fl = rng.random(n) < p_fl
    mask_t1c = rng.random(n) < p_t1c
    both = mask_fl & mask_t1c
    while np.any(both):
        k = int(both.sum())
        mask_fl[both] = rng.random(k) < p_fl
        mask_t1c[both] = rng.random(k) < p_t1c
        both = mask_fl & mask_t1c
    return mask_fl, mask_t1c


def pretrain_loss_and_grads(
    pair: FeaturePair,
    mask_fl: np.ndarray,
    mask_t1c: np.ndarray,
    store: ParamStore,
    cfg: AttentionConfig,
) -> Tuple[ReconLoss, Dict[str, np.ndarray], int]:
    """Reconstruction loss averaged over masked samples, with CGGM gradients."""
    counts = {Sequence.FL: int(mask_fl.sum()), Sequence.T1C: int(mask_t1c.sum())}
    n_total = counts[Sequence.FL] + counts[Sequence.T1C]
    grads: Dict[str, np.ndarray] = {}
    totals = {"mse": 0.0, "kl": 0.0, "cycle": 0.0}
    if n_total == 0:
        return ReconLoss(0.0, 0.0, 0.0), grads, 0
    for masked_seq, mask in ((Sequence.FL, mask_fl), (Sequence.T1C, mask_t1c)):
        if counts[masked_seq] == 0:
            continue
        weight = counts[masked_seq] / n_total
        source = pair.feature(masked_seq.other)[mask]
        target = pair.feature(masked_seq)[mask]
        loss, g, _ = direction_recon(source, target, Direction.generating(masked_seq), store, cfg)
        _merge(grads, g, weight)
        for key in totals:
            totals[key] += weight * getattr(loss, key)
    return ReconLoss(**totals), grads, n_total


def pretrain_step(
    pair: FeaturePair,
    store: ParamStore,
    cfg: AttentionConfig,
    optimizer,
    rng: np.random.Generator,
    mask_prob: Union[float, Seq[float]] = 0.5,
) -> ReconLoss:
    """
    One masked self-supervised update on complete pairs. The optimizer must be
    restricted to CGGM parameters; samples with neither side masked are skipped.
    """
    if len(pair) == 0:
        raise EmptyInputError("empty pretraining batch")
    if not np.all(pair.is_complete):
        raise ProtocolViolation("pretraining batch contains incomplete pairs")
    mask_fl, mask_t1c = draw_masks(len(pair), mask_prob, rng)
    loss, grads, n_used = pretrain_loss_and_grads(pair, mask_fl, mask_t1c, store, cfg)
    if n_used:
        store.zero_grad()
        store.accumulate(grads)
        optimizer.step()
    return loss


def freeze(store: ParamStore):
    """Stop updates to both generator directions; gradients still pass through."""
    store.freeze("cggm")


# === Imputation Quality ===
def imputation_report(
    pair: FeaturePair, store: ParamStore, cfg: AttentionConfig, train_means: Dict[Sequence, np.ndarray]
) -> pd.DataFrame:
    """Held-out MSE of the generator against zero-fill and mean-fill baselines, per direction."""
    rows = []
    for direction in Direction:
        source = pair.feature(direction.source)
        target = pair.feature(direction.target)
        out, _ = generate(source, direction, store, cfg)
        rows.append({
            "direction": direction.value,
            "n": len(pair),
            "cggm_mse": float(np.mean((out.f_m - target) ** 2)),
            "zero_fill_mse": float(np.mean(target ** 2)),
            "mean_fill_mse": float(np.mean((train_means[direction.target] - target) ** 2)),
        })
    return pd.DataFrame(rows)
