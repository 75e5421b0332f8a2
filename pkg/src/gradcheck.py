"""
Finite-difference gradient suite over every composed path of the model.

Each case builds a small float64 problem and compares the analytic gradient of
every trainable parameter with central differences.
"""
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from src.cggm import attention_config_for, direction_recon, init_cggm
from src.config import Center, Direction, RunConfig, Sequence, Variant
from src.dwefm import dwefm_backward, dwefm_forward, init_dwefm
from src.losses import balanced_softmax_loss
from src.model import Batch, GMENet, label_counts
from src.nn import ParamStore, grad_check_report
from src.stem import init_stem, stem_backward, stem_forward
from src.synth import LabelSet, SampleRecord

GRADCHECK_TOLERANCE = 1e-4

# tiny shapes: central differences cost two forward passes per entry
SMALL_RAW, SMALL_D, SMALL_T, SMALL_HEADS, SMALL_B = 6, 8, 2, 2, 5


def _stem_case(rng: np.random.Generator) -> Tuple[Callable, ParamStore]:
    store = ParamStore()
    init_stem(store, SMALL_RAW, SMALL_D, rng)
    x = rng.normal(size=(SMALL_B, SMALL_RAW))
    r = rng.normal(size=(SMALL_B, SMALL_D))

    def computation(s: ParamStore) -> float:
        s.zero_grad()
        total = 0.0
        for seq in Sequence:
            y, cache = stem_forward(x, seq, s)
            _, grads = stem_backward(r, cache)
            s.accumulate(grads)
            total += float(np.sum(y * r))
        return total
    return computation, store


def _cggm_case(rng: np.random.Generator) -> Tuple[Callable, ParamStore]:
    store = ParamStore()
    cfg = attention_config_for(SMALL_D, SMALL_T, SMALL_HEADS)
    init_cggm(store, cfg, rng)
    fl = rng.normal(size=(SMALL_B, SMALL_D))
    t1c = rng.normal(size=(SMALL_B, SMALL_D))

    def computation(s: ParamStore) -> float:
        s.zero_grad()
        total = 0.0
        for direction, source, target in ((Direction.FL_TO_T1C, fl, t1c), (Direction.T1C_TO_FL, t1c, fl)):
            loss, grads, _ = direction_recon(source, target, direction, s, cfg)
            s.accumulate(grads)
            total += loss.total
        return total
    return computation, store


def _dwefm_case(rng: np.random.Generator) -> Tuple[Callable, ParamStore]:
    store = ParamStore()
    init_dwefm(store, SMALL_D, SMALL_D // 2, SMALL_D, rng)
    fl = rng.normal(size=(SMALL_B, SMALL_D))
    t1c = rng.normal(size=(SMALL_B, SMALL_D))
    r = rng.normal(size=(SMALL_B, SMALL_D))

    def computation(s: ParamStore) -> float:
        s.zero_grad()
        state, cache = dwefm_forward(fl, t1c, s)
        _, _, grads = dwefm_backward(r, cache)
        s.accumulate(grads)
        return float(np.sum(state.f_f * r))
    return computation, store


def _balanced_softmax_case(rng: np.random.Generator) -> Tuple[Callable, ParamStore]:
    store = ParamStore()
    store.add("logits.z", rng.normal(size=(SMALL_B, 3)))
    labels = rng.integers(0, 3, size=SMALL_B)
    counts = np.array([5.0, 1.0, 12.0])

    def computation(s: ParamStore) -> float:
        s.zero_grad()
        loss, d_logits = balanced_softmax_loss(s["logits.z"], labels, counts)
        s.accumulate({"logits.z": d_logits})
        return loss
    return computation, store


def _toy_records(rng: np.random.Generator, n: int) -> List[SampleRecord]:
    records = []
    for i in range(n):
        fl = rng.normal(size=SMALL_RAW)
        t1c = rng.normal(size=SMALL_RAW)
        # one FL-only and one T1c-only record exercise both generator directions
        if i == 0:
            t1c = None
        elif i == 1:
            fl = None
        records.append(SampleRecord(id=f"toy-{i}", center=Center.TCGA, fl=fl, t1c=t1c,
                                    labels=LabelSet.from_pathology(i % 3)))
    return records


def _model_case(variant: Variant) -> Callable[[np.random.Generator], Tuple[Callable, ParamStore]]:
    def build(rng: np.random.Generator):
        cfg = RunConfig(latent_dim=SMALL_D, raw_dim=SMALL_RAW, num_tokens=SMALL_T,
                        num_heads=SMALL_HEADS, variant=variant)
        model = GMENet(cfg, seed=int(rng.integers(1 << 31)))
        records = _toy_records(rng, SMALL_B + 1)
        batch = Batch.from_records(records, SMALL_RAW)
        counts = label_counts(records)

        def computation(s: ParamStore) -> float:
            return model.loss_and_grads(batch, counts, smoothing=True)[0]
        return computation, model.store
    return build


SUITE: Dict[str, Callable[[np.random.Generator], Tuple[Callable, ParamStore]]] = {
    "stem": _stem_case,
    "cggm_recon": _cggm_case,
    "dwefm": _dwefm_case,
    "balanced_softmax": _balanced_softmax_case,
    "total_loss_full": _model_case(Variant.FULL),
    "total_loss_no_cggm": _model_case(Variant.NO_CGGM),
    "total_loss_no_dwefm": _model_case(Variant.NO_DWEFM),
}


def run_suite(seed: int = 0, max_entries: int = 12, tolerance: float = GRADCHECK_TOLERANCE) -> pd.DataFrame:
    """One row per (case, parameter) with the worst relative error found."""
    rows = []
    for case, build in SUITE.items():
        rng = np.random.default_rng(seed)
        computation, store = build(rng)
        report = grad_check_report(computation, store, max_entries=max_entries, seed=seed)
        for name, err in report.items():
            if err is None:
                continue
            rows.append({"case": case, "param": name, "rel_error": err, "passed": bool(err < tolerance)})
    return pd.DataFrame(rows, columns=["case", "param", "rel_error", "passed"])
