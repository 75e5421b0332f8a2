"""
GMENet: stems -> CGGM completion -> DWEFM fusion -> three classification heads.

Ablation variants swap one stage:
    no_cggm  - missing latent features stay zero vectors
    no_dwefm - Linear(Cat(f_fl, f_t1c)) replaces the expert fusion
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence as Seq, Tuple

import numpy as np

from src.cggm import FeaturePair, attention_config_for, complete_pair, complete_pair_backward, init_cggm
from src.config import TASKS, RunConfig, Sequence, Task, Variant
from src.dwefm import FusionState, dwefm_backward, dwefm_forward, init_dwefm
from src.errors import EmptyInputError, ShapeError
from src.losses import PredictionSet, class_counts, total_loss
from src.nn import ParamStore, gelu, gelu_grad, glorot, linear, linear_backward
from src.stem import init_stem, stem_backward, stem_forward
from src.synth import SampleRecord

CONCAT = "fusion.concat"


def head_prefix(task: Task) -> str:
    return f"head.{Task(task).value}"


@dataclass
class Batch:
    """Stacked records; raw rows of an absent sequence are zero and flagged absent."""
    ids: List[str]
    fl_raw: np.ndarray
    t1c_raw: np.ndarray
    fl_present: np.ndarray
    t1c_present: np.ndarray
    labels: Dict[Task, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Seq[SampleRecord], raw_dim: int) -> "Batch":
        if not records:
            raise EmptyInputError("empty batch")
        B = len(records)
        raws = {seq: np.zeros((B, raw_dim)) for seq in Sequence}
        present = {seq: np.zeros(B, dtype=bool) for seq in Sequence}
        for i, r in enumerate(records):
            for seq in Sequence:
                x = r.raw(seq)
                if x is None:
                    continue
                if x.shape != (raw_dim,):
                    raise ShapeError(f"{r.id}: {seq.value} has shape {x.shape}, expected ({raw_dim},)")
                raws[seq][i] = x
                present[seq][i] = True
        labels = {
            Task.IDH: np.array([int(r.labels.idh) for r in records]),
            Task.CODEL: np.array([int(r.labels.codel) for r in records]),
            Task.PATHOLOGY: np.array([int(r.labels.pathology) for r in records]),
        }
        return cls(
            ids=[r.id for r in records],
            fl_raw=raws[Sequence.FL], t1c_raw=raws[Sequence.T1C],
            fl_present=present[Sequence.FL], t1c_present=present[Sequence.T1C],
            labels=labels,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def raw(self, seq: Sequence) -> np.ndarray:
        return self.fl_raw if seq is Sequence.FL else self.t1c_raw

    def present(self, seq: Sequence) -> np.ndarray:
        return self.fl_present if seq is Sequence.FL else self.t1c_present


def label_counts(records: Seq[SampleRecord]) -> Dict[Task, np.ndarray]:
    """Per-task class frequencies of a training set."""
    batch_labels = {
        Task.IDH: [int(r.labels.idh) for r in records],
        Task.CODEL: [int(r.labels.codel) for r in records],
        Task.PATHOLOGY: [int(r.labels.pathology) for r in records],
    }
    return {task: class_counts(batch_labels[task], task.num_classes) for task in TASKS}


class GMENet:
    """
    Holds every parameter in one ParamStore. Each component draws its
    initialization from its own seed stream, so variants built with the same
    seed share identical stem, fusion and head weights wherever they overlap.
    """

    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.variant = Variant(cfg.variant)
        self.seed = cfg.seed if seed is None else seed
        self.attn_cfg = attention_config_for(cfg.latent_dim, cfg.num_tokens, cfg.num_heads)
        self.store = ParamStore()

        stem_rng, cggm_rng, fusion_rng, head_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(4)
        )
        D = cfg.latent_dim
        init_stem(self.store, cfg.raw_dim, D, stem_rng)
        if self.uses_cggm:
            init_cggm(self.store, self.attn_cfg, cggm_rng)
        if self.variant is Variant.NO_DWEFM:
            self.store.add(f"{CONCAT}.w", glorot(fusion_rng, 2 * D, cfg.fused_dim))
            self.store.add(f"{CONCAT}.b", np.zeros(cfg.fused_dim))
        else:
            init_dwefm(self.store, D, cfg.expert_dim, cfg.fused_dim, fusion_rng)
        for task in TASKS:
            self.store.add(f"{head_prefix(task)}.w", glorot(head_rng, cfg.fused_dim, task.num_classes))
            self.store.add(f"{head_prefix(task)}.b", np.zeros(task.num_classes))

    @property
    def uses_cggm(self) -> bool:
        return self.variant is not Variant.NO_CGGM

    # === Forward ===
    def encode(self, batch: Batch) -> Tuple[FeaturePair, dict]:
        """Stem features of the present sequences; absent rows stay zero."""
        D = self.cfg.latent_dim
        feats, caches = {}, {}
        for seq in Sequence:
            rows = np.flatnonzero(batch.present(seq))
            f = np.zeros((len(batch), D))
            if rows.size:
                f[rows], caches[seq] = stem_forward(batch.raw(seq)[rows], seq, self.store)
            feats[seq] = f
        pair = FeaturePair(fl=feats[Sequence.FL], t1c=feats[Sequence.T1C],
                           fl_present=batch.fl_present, t1c_present=batch.t1c_present)
        return pair, caches

    def forward(self, batch: Batch) -> Tuple[PredictionSet, dict]:
        pair, stem_caches = self.encode(batch)
        cache = {"batch": batch, "stem": stem_caches, "pair": pair}

        if self.uses_cggm:
            completed, cache["complete"] = complete_pair(pair, self.store, self.attn_cfg)
        else:
            completed = pair
        cache["completed"] = completed

        if self.variant is Variant.NO_DWEFM:
            f_f, cache["concat"] = linear(np.concatenate([completed.fl, completed.t1c], axis=1),
                                          self.store[f"{CONCAT}.w"], self.store[f"{CONCAT}.b"])
            cache["fusion"] = None
        else:
            state, cache["dwefm"] = dwefm_forward(completed.fl, completed.t1c, self.store)
            f_f = state.f_f
            cache["fusion"] = state
        cache["f_f"] = f_f

        h = gelu(f_f)
        logits, head_caches = {}, {}
        for task in TASKS:
            p = head_prefix(task)
            logits[task], head_caches[task] = linear(h, self.store[f"{p}.w"], self.store[f"{p}.b"])
        cache["heads"] = head_caches
        return PredictionSet(logits=logits, ids=list(batch.ids)), cache

    def predict(self, batch: Batch) -> PredictionSet:
        return self.forward(batch)[0]

    def fusion_state(self, cache: dict) -> Optional[FusionState]:
        return cache["fusion"]

    # === Backward ===
    def backward(self, d_logits: Mapping[Task, np.ndarray], cache: dict) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        d_h = 0.0
        for task in TASKS:
            p = head_prefix(task)
            dh_task, grads[f"{p}.w"], grads[f"{p}.b"] = linear_backward(d_logits[task], cache["heads"][task])
            d_h = d_h + dh_task
        d_ff = d_h * gelu_grad(cache["f_f"])

        if self.variant is Variant.NO_DWEFM:
            d_cat, grads[f"{CONCAT}.w"], grads[f"{CONCAT}.b"] = linear_backward(d_ff, cache["concat"])
            D = self.cfg.latent_dim
            d_fl, d_t1c = d_cat[:, :D], d_cat[:, D:]
        else:
            d_fl, d_t1c, g = dwefm_backward(d_ff, cache["dwefm"])
            grads.update(g)

        batch: Batch = cache["batch"]
        if self.uses_cggm:
            d_fl, d_t1c, g = complete_pair_backward(d_fl, d_t1c, cache["complete"])
            grads.update(g)
        d_feat = {Sequence.FL: d_fl, Sequence.T1C: d_t1c}

        for seq, stem_cache in cache["stem"].items():
            rows = np.flatnonzero(batch.present(seq))
            _, g = stem_backward(d_feat[seq][rows], stem_cache)
            grads.update(g)
        return grads

    def loss_and_grads(
        self,
        batch: Batch,
        counts: Mapping[Task, np.ndarray],
        smoothing: bool = False,
    ) -> Tuple[float, Dict[Task, float], PredictionSet]:
        """Zero the store's gradients, then accumulate those of L_total on `batch`."""
        pred, cache = self.forward(batch)
        loss, per_task, d_logits = total_loss(pred, batch.labels, counts, smoothing=smoothing)
        self.store.zero_grad()
        self.store.accumulate(self.backward(d_logits, cache))
        return loss, per_task, pred
