#!/usr/bin/env python3
"""
GMENet command line.

Usage:
    python gmenet.py synth --config cohort.txt --out data/cohort.jsonl
    python gmenet.py split --data data/cohort.jsonl --out data/plan.json
    python gmenet.py pretrain --data data/cohort.jsonl --out runs/cggm.ckpt
    python gmenet.py train --data data/cohort.jsonl --cggm runs/cggm.ckpt --mode ms --out runs/model.ckpt
    python gmenet.py eval --model runs/model.ckpt --data data/cohort.jsonl --split independent --out runs/eval.csv
    python gmenet.py cv --data data/cohort.jsonl --mode ms --out runs/cv_ms.csv
    python gmenet.py ablate --data data/cohort.jsonl --out runs/ablation.csv
    python gmenet.py impute --data data/cohort.jsonl --out runs/imputation.csv
    python gmenet.py gradcheck
"""
import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.checkpoint import check_compatible, load_checkpoint, make_header, save_checkpoint
from src.config import CohortConfig, Mode, RunConfig, SplitName, Variant, load_config
from src.errors import ConfigError, GMENetError
from src.experiment import Experiment, ablate, evaluate, imputation_quality, pretrain_cggm, train
from src.gradcheck import GRADCHECK_TOLERANCE, run_suite
from src.losses import confusion_frame, roc_frame
from src.model import GMENet
from src.synth import (
    SplitPlan, cohort_summary, expansion_report, generate_cohort, read_dataset,
    split_cohort, write_dataset,
)
from src.utils import ExperimentLogger, get_timestamp, write_csv


def load_configs(args) -> Tuple[CohortConfig, RunConfig]:
    cohort, run = load_config(args.config) if getattr(args, "config", None) else (CohortConfig(), RunConfig())
    overrides = {}
    for name in ("mode", "variant", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        run = replace(run, **overrides)
    if getattr(args, "debug", False):
        run = run.debug()
    return cohort, run


def load_plan(args, records, run: RunConfig) -> SplitPlan:
    if getattr(args, "plan", None):
        with open(args.plan, "r", encoding="utf-8") as f:
            return SplitPlan.from_dict(json.load(f)).with_mode(run.mode)
    return split_cohort(records, seed=run.split_seed, num_folds=run.num_folds, mode=run.mode)


def _folds(text: Optional[str]) -> Optional[List[int]]:
    return [int(k) for k in text.split(",")] if text else None


# === Commands ===
def cmd_synth(args) -> int:
    cohort, _ = load_configs(args)
    if args.seed is not None:
        cohort = replace(cohort, seed=args.seed)
    print(f"Generating synthetic cohort ({cohort.total} subjects, seed={cohort.seed})...")
    records = generate_cohort(cohort)
    write_dataset(records, args.out, seed=cohort.seed, raw_dim=cohort.raw_dim)
    print(cohort_summary(records).to_string(index=False))
    print(f"  [OK] Wrote {len(records)} records to {args.out}")
    return 0


def cmd_split(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = split_cohort(records, seed=run.split_seed, num_folds=run.num_folds, mode=run.mode)
    report = expansion_report(plan, fold=args.fold)
    print("\nData expansion (FS vs MS training pools):")
    for key, value in report.items():
        shown = f"{value:.3f}" if isinstance(value, float) else value
        print(f"  {key:<24} {shown}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({**plan.to_dict(), "expansion": report}, f, indent=2)
        print(f"  [OK] Split plan written to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    by_id = {r.id: r for r in records}
    complete = [by_id[i] for i in plan.fs_train_ids(args.fold)]
    logger = ExperimentLogger(f"pretrain_S{run.seed}_{get_timestamp()}", log_dir=run.log_dir)
    logger.log_config(run.to_dict())
    print(f"Pretraining CGGM on {len(complete)} complete pairs for {run.pretrain_steps} steps...")
    result = pretrain_cggm(run, complete, out_path=args.out, logger=logger, fold=args.fold)
    curve_path = args.curve or str(Path(args.out).with_suffix(".curve.csv"))
    write_csv(result.curve, curve_path)
    final = result.curve["total"].iloc[-1] if len(result.curve) else float("nan")
    logger.log_run_end({"steps": run.pretrain_steps, "final_loss": final})
    print(f"  [OK] Checkpoint: {args.out}  (final L_rec {final:.4f}, curve {curve_path})")
    return 0


def cmd_train(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    logger = ExperimentLogger(f"train_{run.mode.value}_{run.variant.value}_S{run.seed}_{get_timestamp()}",
                              log_dir=run.log_dir)
    logger.log_config(run.to_dict())
    result = train(run, {r.id: r for r in records}, plan, args.fold, cggm=args.cggm, logger=logger,
                   state_path=args.state, resume=args.resume)
    header = make_header(run, kind="model", step=run.finetune_steps, fold=args.fold)
    save_checkpoint(args.out, result.model.store, header)
    logger.log_run_end({"steps": run.finetune_steps, "train_records": len(result.gradient_ids)})
    print(f"  [OK] Model saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    if ckpt.kind != "model":
        raise ConfigError(f"{args.model} is a {ckpt.kind!r} checkpoint, not a trained model")
    run = RunConfig(**ckpt.header["config"])
    check_compatible(ckpt, run, kind="model")
    model = GMENet(run)
    model.store.load_state_dict(ckpt.params, strict=True)

    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    by_id = {r.id: r for r in records}
    split = SplitName(args.split)
    result = evaluate(model, [by_id[i] for i in plan.test_ids(split, ckpt.header.get("fold", 0))], split.value)
    logger = ExperimentLogger(f"eval_{split.value}_{get_timestamp()}", log_dir=run.log_dir)
    logger.log_evaluation(split.value, result.report.rows(split.value))
    logger.log_run_end({"model": args.model, "n": result.report.n})
    out = Path(args.out)
    write_csv(result.report.to_frame(split.value), out)
    write_csv(result.prediction_frame(), out.with_name(f"{out.stem}_predictions.csv"))
    write_csv(roc_frame(result.predictions, result.labels, split.value), out.with_name(f"{out.stem}_roc.csv"))
    write_csv(confusion_frame(result.report, split.value), out.with_name(f"{out.stem}_confusion.csv"))
    print(result.report.to_frame(split.value).to_string(index=False))
    return 0


def cmd_cv(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    Experiment(run, records, plan, out_path=args.out).setup().cross_validate(_folds(args.folds))
    return 0


def cmd_ablate(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = ablate(run, records, plan, seeds=seeds, folds=_folds(args.folds), out_path=args.out)
    print(table.to_string(index=False))
    return 0


def cmd_impute(args) -> int:
    _, run = load_configs(args)
    records = read_dataset(args.data)
    plan = load_plan(args, records, run)
    report = imputation_quality(run, records, plan, fold=args.fold)
    write_csv(report, args.out)
    print(report.to_string(index=False))
    return 0


def cmd_gradcheck(args) -> int:
    print("Running finite-difference gradient suite...")
    report = run_suite(seed=args.seed or 0, max_entries=args.max_entries)
    worst = report.groupby("case", sort=False)["rel_error"].max()
    for case, err in worst.items():
        status = "[OK]" if err < GRADCHECK_TOLERANCE else "[FAIL]"
        print(f"  {status} {case:<22} max rel error {err:.2e}")
    if args.out:
        write_csv(report, args.out)
    if not report["passed"].all():
        print(f"[ERROR] gradient check exceeded {GRADCHECK_TOLERANCE:g}")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="GMENet glioma marker pipeline on synthetic dual-sequence cohorts")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        p.add_argument("--config", type=str, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="run seed override")
        p.add_argument("--debug", action="store_true", help="small dims and step counts")
        if data:
            p.add_argument("--data", type=str, required=True, help="JSONL dataset")
            p.add_argument("--plan", type=str, help="split plan JSON from `split` (recomputed if omitted)")

    def add_model_choice(p):
        p.add_argument("--mode", choices=[m.value for m in Mode])
        p.add_argument("--variant", choices=[v.value for v in Variant])

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    add_common(p, data=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="build the split plan and report FS/MS pool sizes")
    add_common(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="masked self-supervised CGGM pretraining")
    add_common(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="L_rec curve CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune with the frozen CGGM")
    add_common(p)
    add_model_choice(p)
    p.add_argument("--cggm", help="CGGM checkpoint (not used by no_cggm)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--state", help="training state file for checkpoint/resume")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plan")
    p.add_argument("--split", choices=[s.value for s in SplitName], default=SplitName.INDEPENDENT.value)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="five-fold cross-validation")
    add_common(p)
    add_model_choice(p)
    p.add_argument("--folds", help="comma-separated subset of folds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="full vs no_cggm vs no_dwefm")
    add_common(p)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p.add_argument("--folds", help="comma-separated subset of folds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("impute", help="imputation MSE vs zero and mean fill")
    add_common(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=12)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GMENetError as e:
        print(f"[ERROR] {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
