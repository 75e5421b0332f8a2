#!/usr/bin/env python3
"""
Analysis Tools

Summarizes result CSVs and checks the orderings the experiments are run for:
- per split/task mean, SD and 95% CI over folds
- MS vs FS mean AUC on the independent test, per seed
- full vs ablated variants, per seed and per (seed, task) cell
- loss curves from a JSONL run log

Usage:
    python analyze.py summary runs/cv_ms.csv
    python analyze.py modes --fs runs/cv_fs_s0.csv runs/cv_fs_s1.csv --ms runs/cv_ms_s0.csv runs/cv_ms_s1.csv
    python analyze.py ablation runs/ablation_per_seed.csv
    python analyze.py log logs/single_runs/<run_id>.jsonl
"""
import argparse
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.config import SplitName, Variant
from src.errors import ConfigError, GMENetError
from src.utils import moving_average, read_events


def confidence_interval_95(values) -> Tuple[Optional[float], Optional[float]]:
    """Normal-approximation 95% confidence interval of the mean."""
    values = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if len(values) < 2:
        return (None, None)
    m = float(np.mean(values))
    margin = 1.96 * float(np.std(values, ddof=1)) / math.sqrt(len(values))
    return (m - margin, m + margin)


def summarize_metrics(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean, SD and 95% CI of every metric over the fold rows of a cv CSV."""
    rows = []
    for (split, task), group in frame.groupby(["split", "task"], sort=False):
        row: Dict[str, Any] = {"split": split, "task": task, "folds": len(group)}
        for metric in ("acc", "auc", "spe", "sen"):
            values = group[metric].dropna().tolist()
            lo, hi = confidence_interval_95(values)
            row[f"{metric}_mean"] = float(np.mean(values)) if values else None
            row[f"{metric}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else None
            row[f"{metric}_ci95"] = (lo, hi)
        rows.append(row)
    return pd.DataFrame(rows)


def mean_auc(frame: pd.DataFrame, split: str = SplitName.INDEPENDENT.value) -> float:
    """AUC averaged over tasks and folds for one split."""
    return float(frame.loc[frame["split"] == split, "auc"].mean())


def compare_modes(fs_paths: List[str], ms_paths: List[str], split: str = SplitName.INDEPENDENT.value) -> pd.DataFrame:
    """Pairs the i-th FS and MS run (same seed) and flags MS >= FS."""
    if len(fs_paths) != len(ms_paths):
        raise ConfigError("need one MS run per FS run")
    rows = []
    for k, (fs, ms) in enumerate(zip(fs_paths, ms_paths)):
        fs_auc = mean_auc(pd.read_csv(fs), split)
        ms_auc = mean_auc(pd.read_csv(ms), split)
        rows.append({"run": k, "fs_auc": fs_auc, "ms_auc": ms_auc, "ms_ge_fs": bool(ms_auc >= fs_auc)})
    return pd.DataFrame(rows)


def ablation_ordering(per_seed: pd.DataFrame, split: str = SplitName.INDEPENDENT.value) -> Dict[str, Any]:
    """How often the full variant has the best AUC, per seed (task-averaged) and per (seed, task) cell."""
    sub = per_seed[per_seed["split"] == split]
    by_seed = sub.groupby(["seed", "variant"])["auc"].mean().unstack("variant")
    full = Variant.FULL.value
    others = [v.value for v in Variant if v is not Variant.FULL]
    seed_wins = (by_seed[full] > by_seed[others].max(axis=1))

    cells = sub.pivot_table(index=["seed", "task"], columns="variant", values="auc")
    cell_wins = (cells[full] > cells[others].max(axis=1))
    return {
        "by_seed": by_seed.reset_index(),
        "seed_wins": int(seed_wins.sum()),
        "seeds": int(len(seed_wins)),
        "cell_wins": int(cell_wins.sum()),
        "cells": int(len(cell_wins)),
    }


def analyze_log(jsonl_path: str, window: int = 50) -> Dict[str, Any]:
    """Loss curve summary from a run's event stream."""
    train = read_events(jsonl_path, "train_step")
    pretrain = read_events(jsonl_path, "pretrain_step")
    folds = read_events(jsonl_path, "fold_end")
    train_loss = [e["loss"] for e in train]
    pre_loss = [e["total"] for e in pretrain]
    smoothed = moving_average(pre_loss, min(window, len(pre_loss))) if pre_loss else np.array([])
    return {
        "train_events": len(train),
        "final_train_loss": train_loss[-1] if train_loss else None,
        "pretrain_events": len(pretrain),
        "final_pretrain_loss": pre_loss[-1] if pre_loss else None,
        "pretrain_smoothed_decreasing": bool(np.all(np.diff(smoothed) <= 0)) if smoothed.size > 1 else None,
        "folds_finished": len(folds),
    }


def generate_text_report(summary: pd.DataFrame, output_path: Optional[str] = None) -> str:
    lines = ["=" * 70, "CROSS-VALIDATION REPORT", "=" * 70, ""]
    lines.append(f"{'Split':<13} {'Task':<10} {'ACC':>14} {'AUC':>14} {'SPE':>14} {'SEN':>14}")
    lines.append("-" * 70)

    def cell(row, metric):
        m, s = row[f"{metric}_mean"], row[f"{metric}_std"]
        if m is None or (isinstance(m, float) and math.isnan(m)):
            return "N/A"
        return f"{m:.3f}±{s:.3f}" if s is not None and not math.isnan(s) else f"{m:.3f}"

    for _, row in summary.iterrows():
        lines.append(f"{row['split']:<13} {row['task']:<10} " +
                     " ".join(f"{cell(row, m):>14}" for m in ("acc", "auc", "spe", "sen")))
    lines.append("")
    report = "\n".join(lines)
    if output_path:
        Path(output_path).write_text(report, encoding="utf-8")
        print(f"Report saved to: {output_path}")
    return report


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Analyze GMENet result files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="mean/SD/CI of a cv metrics CSV")
    p.add_argument("path")
    p.add_argument("--out", help="write the text report here")

    p = sub.add_parser("modes", help="MS vs FS ordering")
    p.add_argument("--fs", nargs="+", required=True)
    p.add_argument("--ms", nargs="+", required=True)

    p = sub.add_parser("ablation", help="full vs ablated variants")
    p.add_argument("path", help="<stem>_per_seed.csv written by `gmenet.py ablate`")

    p = sub.add_parser("log", help="summarize a JSONL run log")
    p.add_argument("path")
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    try:
        return run(args)
    except GMENetError as e:
        print(f"[ERROR] {e}")
        return 1


def run(args) -> int:
    if args.command == "summary":
        print(generate_text_report(summarize_metrics(pd.read_csv(args.path)), args.out))
    elif args.command == "modes":
        table = compare_modes(args.fs, args.ms)
        print(table.to_string(index=False))
        wins = int(table["ms_ge_fs"].sum())
        print(f"\nMS >= FS in {wins}/{len(table)} runs ({'majority' if wins * 2 > len(table) else 'minority'})")
    elif args.command == "ablation":
        result = ablation_ordering(pd.read_csv(args.path))
        print(result["by_seed"].to_string(index=False))
        print(f"\nfull best in {result['seed_wins']}/{result['seeds']} seeds, "
              f"{result['cell_wins']}/{result['cells']} (seed, task) cells")
    elif args.command == "log":
        for key, value in analyze_log(args.path).items():
            print(f"  {key:<30} {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
