"""
Main Experiment module.
Orchestrates CGGM pretraining, frozen-CGGM fine-tuning, evaluation,
cross-validation and the ablation sweep.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence as Seq, Set, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.cggm import FeaturePair, freeze, imputation_report, pretrain_step
from src.checkpoint import (
    Checkpoint, TrainState, check_compatible, load_checkpoint, load_params,
    make_header, save_checkpoint,
)
from src.config import TASKS, RunConfig, Sequence, SplitName, Variant
from src.errors import ConfigError, EmptyInputError, ProtocolViolation
from src.losses import (
    MetricsReport, PredictionSet, class_sensitivity_frame, compute_metrics,
    confusion_frame, roc_frame,
)
from src.model import Batch, GMENet, label_counts
from src.optim import AdamW, cosine_lr
from src.synth import SampleRecord, SplitPlan
from src.utils import (
    ExperimentLogger, format_metrics_for_display, get_stable_seed,
    get_timestamp, write_csv,
)

METRIC_COLUMNS = ["acc", "auc", "spe", "sen"]
TEST_SPLITS = [SplitName.INTERNAL, SplitName.INDEPENDENT]


class BatchSampler:
    """Epoch-wise shuffled mini-batches; the last batch of an epoch may be short."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        if size == 0:
            raise EmptyInputError("no records to sample batches from")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self.order = np.arange(0)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor >= self.order.size:
            self.order = self.rng.permutation(self.size)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += idx.size
        return idx

    def state(self) -> Dict[str, object]:
        return {"order": self.order.tolist(), "cursor": self.cursor}

    def load_state(self, state: Dict[str, object]):
        self.order = np.asarray(state["order"], dtype=int)
        self.cursor = int(state["cursor"])


# === Pretraining ===
@dataclass
class PretrainResult:
    model: GMENet
    curve: pd.DataFrame
    checkpoint_path: Optional[Path] = None


def pretrain_cggm(
    cfg: RunConfig,
    records: Seq[SampleRecord],
    out_path: Optional[str] = None,
    logger: Optional[ExperimentLogger] = None,
    fold: Optional[int] = None,
) -> PretrainResult:
    """
    Masked self-supervised pretraining of both generator directions on complete
    pairs, with a cosine-decayed learning rate. Stem features are computed once
    from the initial stem and held fixed; fine-tuning starts from that same stem.
    """
    if not cfg.uses_cggm:
        raise ConfigError("variant no_cggm has no pretraining phase")
    if not records:
        raise EmptyInputError("no complete records to pretrain on")
    incomplete = [r.id for r in records if not r.is_complete]
    if incomplete:
        raise ProtocolViolation(f"pretraining needs complete records, got incomplete {incomplete[0]}")

    model = GMENet(replace(cfg, variant=Variant.FULL))
    features, _ = model.encode(Batch.from_records(records, cfg.raw_dim))
    optimizer = AdamW(
        model.store, model.store.names("cggm."), lr=cfg.pretrain_learning_rate,
        betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )
    tag = f"{cfg.seed}_pretrain_{fold}"
    rng = np.random.default_rng(get_stable_seed(tag + "_masks"))
    sampler = BatchSampler(len(records), cfg.batch_size, np.random.default_rng(get_stable_seed(tag + "_order")))

    rows = []
    for step in tqdm(range(cfg.pretrain_steps), desc="  Pretrain", leave=False):
        idx = sampler.next()
        optimizer.lr = cosine_lr(cfg.pretrain_learning_rate, step, cfg.pretrain_steps)
        loss = pretrain_step(
            FeaturePair.complete(features.fl[idx], features.t1c[idx]),
            model.store, model.attn_cfg, optimizer, rng, cfg.mask_prob,
        )
        rows.append({"step": step + 1, **loss.to_dict()})
        if logger and (step + 1) % cfg.log_every == 0:
            logger.log_pretrain_step(step + 1, loss.to_dict())
    curve = pd.DataFrame(rows, columns=["step", "mse", "kl", "cycle", "total"])

    path = None
    if out_path:
        path = Path(out_path)
        header = make_header(cfg, kind="cggm", step=cfg.pretrain_steps, n_records=len(records))
        save_checkpoint(str(path), model.store, header, prefixes=("stem.", "cggm."))
    return PretrainResult(model=model, curve=curve, checkpoint_path=path)


# === Fine-tuning ===
@dataclass
class TrainResult:
    model: GMENet
    losses: pd.DataFrame
    gradient_ids: Set[str] = field(default_factory=set)
    counts: Dict = field(default_factory=dict)


def _protected_ids(plan: SplitPlan, fold: int) -> Set[str]:
    return set(plan.validation_ids(fold)) | set(plan.internal_test) | set(plan.independent_test)


def _as_checkpoint(cggm: Union[None, str, Checkpoint, PretrainResult]) -> Optional[Checkpoint]:
    if cggm is None or isinstance(cggm, Checkpoint):
        return cggm
    if isinstance(cggm, PretrainResult):
        store = cggm.model.store
        names = store.names("stem.") + store.names("cggm.")
        return Checkpoint(header=make_header(cggm.model.cfg, kind="cggm"), params={n: store[n] for n in names})
    return load_checkpoint(str(cggm))


def train(
    cfg: RunConfig,
    records_by_id: Dict[str, SampleRecord],
    plan: SplitPlan,
    fold: int,
    cggm: Union[None, str, Checkpoint, PretrainResult] = None,
    logger: Optional[ExperimentLogger] = None,
    state_path: Optional[str] = None,
    resume: bool = False,
) -> TrainResult:
    """
    Multi-task fine-tuning on the fold's FS or MS training set with the CGGM
    loaded and frozen. No validation or test record ever enters a gradient batch.
    """
    plan.check(records_by_id)
    train_ids = plan.train_ids(fold, cfg.mode)
    protected = _protected_ids(plan, fold)
    leaked = protected.intersection(train_ids)
    if leaked:
        raise ProtocolViolation(f"training set of fold {fold} contains held-out record {sorted(leaked)[0]}")
    train_records = [records_by_id[i] for i in train_ids]
    if not train_records:
        raise EmptyInputError(f"fold {fold} has no training records")

    model = GMENet(cfg)
    ckpt = _as_checkpoint(cggm)
    if model.uses_cggm:
        if ckpt is None:
            raise ConfigError("this variant needs a pretrained CGGM checkpoint")
        check_compatible(ckpt, cfg, kind="cggm")
        load_params(model.store, ckpt, ("stem.", "cggm."))
        freeze(model.store)
    elif ckpt is not None:
        raise ConfigError("variant no_cggm does not take a CGGM checkpoint")

    counts = label_counts(train_records)
    optimizer = AdamW(model.store, lr=cfg.learning_rate, betas=cfg.betas,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(get_stable_seed(f"{cfg.seed}_train_{fold}"))
    sampler = BatchSampler(len(train_records), cfg.batch_size, rng)
    state = TrainState(store=model.store, optimizer=optimizer, rng=rng)

    if resume and state_path and Path(state_path).exists():
        header = state.restore(state_path, cfg)
        sampler.load_state(header["sampler"])
        print(f"  [Resume] Continuing fold {fold} from step {state.step}")

    rows = []
    gradient_ids: Set[str] = set()
    for step in tqdm(range(state.step, cfg.finetune_steps), desc="  Train", leave=False):
        batch_records = [train_records[i] for i in sampler.next()]
        batch = Batch.from_records(batch_records, cfg.raw_dim)
        if protected.intersection(batch.ids):
            raise ProtocolViolation("held-out record reached a gradient batch")
        gradient_ids.update(batch.ids)
        loss, per_task, _ = model.loss_and_grads(batch, counts, smoothing=cfg.count_smoothing)
        optimizer.step()
        state.step = step + 1
        per_task = {t.value: v for t, v in per_task.items()}
        rows.append({"step": state.step, "loss": loss, **per_task})
        if (step + 1) % cfg.log_every == 0:
            if logger:
                logger.log_train_step(state.step, loss, per_task)
            if state_path:
                state.save(state_path, cfg, sampler=sampler.state(), fold=fold)

    if state_path:
        state.save(state_path, cfg, sampler=sampler.state(), fold=fold)
    losses = pd.DataFrame(rows, columns=["step", "loss"] + [t.value for t in TASKS])
    return TrainResult(model=model, losses=losses, gradient_ids=gradient_ids, counts=counts)


# === Evaluation ===
@dataclass
class EvaluationResult:
    split: str
    report: MetricsReport
    predictions: PredictionSet
    labels: Dict

    def prediction_frame(self) -> pd.DataFrame:
        frame = self.predictions.to_frame()
        for task in TASKS:
            frame[f"{task.value}_true"] = self.labels[task]
        frame.insert(0, "split", self.split)
        return frame


def evaluate(model: GMENet, records: Seq[SampleRecord], split: str = "test") -> EvaluationResult:
    """Deterministic full-set forward pass on complete-sequence records."""
    if not records:
        raise EmptyInputError(f"{split}: nothing to evaluate")
    incomplete = [r.id for r in records if not r.is_complete]
    if incomplete:
        raise ProtocolViolation(f"{split}: test record {incomplete[0]} is incomplete")
    batch = Batch.from_records(records, model.cfg.raw_dim)
    preds = model.predict(batch)
    return EvaluationResult(split=split, report=compute_metrics(preds, batch.labels),
                            predictions=preds, labels=batch.labels)


def summarize_folds(frame: pd.DataFrame, keys: Iterable[str] = ("split", "task")) -> pd.DataFrame:
    """Mean and sample SD of every metric over folds (or seeds)."""
    keys = list(keys)
    grouped = frame.groupby(keys, sort=False)[METRIC_COLUMNS]
    mean = grouped.mean().add_suffix("_mean")
    std = grouped.std(ddof=1).add_suffix("_std")
    out = pd.concat([mean, std], axis=1)
    out["folds"] = grouped.size()
    return out.reset_index()


# === Orchestrator ===
@dataclass
class FoldOutcome:
    fold: int
    evaluations: Dict[str, EvaluationResult]
    train_size: int
    pretrain_curve: Optional[pd.DataFrame] = None


class Experiment:
    """
    One configured run over a dataset and a split plan.

    Writes its CSVs next to `out_path` (`<stem>_summary.csv`, `<stem>_roc.csv`,
    ...) and its event stream through ExperimentLogger.
    """

    def __init__(self, cfg: RunConfig, records: List[SampleRecord], plan: SplitPlan,
                 out_path: Optional[str] = None, run_id: Optional[str] = None):
        self.cfg = cfg
        self.records = records
        self.records_by_id = {r.id: r for r in records}
        self.plan = plan.with_mode(cfg.mode)
        self.out_path = Path(out_path) if out_path else None
        self.run_id = run_id or f"{cfg.mode.value}_{cfg.variant.value}_S{cfg.seed}_{get_timestamp()}"
        self.logger: Optional[ExperimentLogger] = None

    def setup(self):
        print(f"\n{'='*60}")
        print(f"Run: {self.run_id}")
        print(f"{'='*60}")
        self.plan.check(self.records_by_id)
        print(f"  [OK] Split plan verified: {self.plan.num_folds} folds, "
              f"{len(self.plan.internal_test)} internal, {len(self.plan.independent_test)} independent")
        self.logger = ExperimentLogger(self.run_id, log_dir=self.cfg.log_dir)
        self.logger.log_config(self.cfg.to_dict())
        return self

    def _sibling(self, suffix: str) -> Optional[Path]:
        if self.out_path is None:
            return None
        return self.out_path.with_name(f"{self.out_path.stem}_{suffix}.csv")

    def records_for(self, ids: Iterable[str]) -> List[SampleRecord]:
        return [self.records_by_id[i] for i in ids]

    def run_fold(self, fold: int) -> FoldOutcome:
        cfg = self.cfg
        train_ids = self.plan.train_ids(fold, cfg.mode)
        if self.logger:
            self.logger.log_fold_start(fold, {"train": len(train_ids), "validation": len(self.plan.validation_ids(fold))})

        pretrained = None
        if cfg.uses_cggm:
            complete_train = self.records_for(self.plan.fs_train_ids(fold))
            pretrained = pretrain_cggm(cfg, complete_train, logger=self.logger, fold=fold)
        result = train(cfg, self.records_by_id, self.plan, fold, cggm=pretrained, logger=self.logger)

        evaluations = {}
        for split in [SplitName.VALIDATION] + TEST_SPLITS:
            ids = self.plan.test_ids(split, fold)
            if not ids:
                print(f"  [WARNING] {split.value} split is empty, skipped")
                continue
            evaluations[split.value] = evaluate(result.model, self.records_for(ids), split.value)
        if self.logger:
            self.logger.log_fold_end(fold, [row for e in evaluations.values() for row in e.report.rows(e.split)])
        return FoldOutcome(fold=fold, evaluations=evaluations, train_size=len(train_ids),
                           pretrain_curve=pretrained.curve if pretrained else None)

    def cross_validate(self, folds: Optional[List[int]] = None) -> pd.DataFrame:
        """Per-fold metrics rows (fold, split, task, ...); writes summary, ROC and confusion CSVs."""
        folds = list(range(self.plan.num_folds)) if folds is None else folds
        print(f"\nCross-validation: {len(folds)} folds, mode={self.cfg.mode.value}, variant={self.cfg.variant.value}")
        frames, rocs, confusions, sens = [], [], [], []
        for fold in folds:
            outcome = self.run_fold(fold)
            for split, ev in outcome.evaluations.items():
                frame = ev.report.to_frame(split)
                frame.insert(0, "fold", fold)
                frames.append(frame)
                for extra, target in ((roc_frame(ev.predictions, ev.labels, split), rocs),
                                      (confusion_frame(ev.report, split), confusions),
                                      (class_sensitivity_frame(ev.report, split), sens)):
                    extra.insert(0, "fold", fold)
                    target.append(extra)
                print(f"  Fold {fold} {split:<12} {format_metrics_for_display(ev.report.rows(split))}")
            if outcome.pretrain_curve is not None and self._sibling(f"pretrain_fold{fold}"):
                write_csv(outcome.pretrain_curve, self._sibling(f"pretrain_fold{fold}"))

        metrics = pd.concat(frames, ignore_index=True)
        summary = summarize_folds(metrics)
        if self.out_path:
            write_csv(metrics, self.out_path)
            write_csv(summary, self._sibling("summary"))
            write_csv(pd.concat(rocs, ignore_index=True), self._sibling("roc"))
            write_csv(pd.concat(confusions, ignore_index=True), self._sibling("confusion"))
            write_csv(pd.concat(sens, ignore_index=True), self._sibling("class_sen"))
            print(f"  [OK] Metrics written to {self.out_path}")
        if self.logger:
            self.logger.log_run_end({
                "folds": folds,
                "mean_auc": {
                    split: float(summary[summary["split"] == split]["auc_mean"].mean())
                    for split in summary["split"].unique()
                },
            })
        return metrics


def ablate(
    cfg: RunConfig,
    records: List[SampleRecord],
    plan: SplitPlan,
    seeds: Optional[List[int]] = None,
    folds: Optional[List[int]] = None,
    out_path: Optional[str] = None,
) -> pd.DataFrame:
    """
    full / no_cggm / no_dwefm under identical seeds and hyperparameters.
    Returns the variant x test-split x task table averaged over seeds; the
    per-seed table goes to `<stem>_per_seed.csv`.
    """
    seeds = list(cfg.seeds) if seeds is None else list(seeds)
    per_seed = []
    for seed in seeds:
        for variant in Variant:
            run_cfg = replace(cfg, seed=seed, variant=variant)
            experiment = Experiment(run_cfg, records, plan).setup()
            metrics = experiment.cross_validate(folds)
            tested = metrics[metrics["split"].isin([s.value for s in TEST_SPLITS])]
            means = tested.groupby(["split", "task"], sort=False)[METRIC_COLUMNS].mean().reset_index()
            means.insert(0, "variant", variant.value)
            means.insert(0, "seed", seed)
            per_seed.append(means)

    per_seed_frame = pd.concat(per_seed, ignore_index=True)
    table = summarize_folds(per_seed_frame, keys=("variant", "split", "task")).rename(columns={"folds": "seeds"})
    if out_path:
        out = Path(out_path)
        write_csv(table, out)
        write_csv(per_seed_frame, out.with_name(f"{out.stem}_per_seed.csv"))
        print(f"  [OK] Ablation table written to {out}")
    return table


def imputation_quality(cfg: RunConfig, records: List[SampleRecord], plan: SplitPlan, fold: int = 0) -> pd.DataFrame:
    """Pretrain on the fold's complete training pairs and score imputation on its internal test."""
    by_id = {r.id: r for r in records}
    train_records = [by_id[i] for i in plan.fs_train_ids(fold)]
    test_records = [by_id[i] for i in plan.internal_test]
    model = pretrain_cggm(cfg, train_records, fold=fold).model
    train_pair, _ = model.encode(Batch.from_records(train_records, cfg.raw_dim))
    test_pair, _ = model.encode(Batch.from_records(test_records, cfg.raw_dim))
    means = {Sequence.FL: train_pair.fl.mean(axis=0), Sequence.T1C: train_pair.t1c.mean(axis=0)}
    return imputation_report(test_pair, model.store, model.attn_cfg, means)
