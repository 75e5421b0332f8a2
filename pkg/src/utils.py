"""
Utility functions for logging, seeding and result files.
"""
import hashlib
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.config import LOG_DIR


def ensure_dir(path) -> Path:
    """Ensure directory exists and return Path object."""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def get_timestamp() -> str:
    """Get current timestamp in ISO format."""
    return datetime.now().strftime("%Y%m%d_%H%M%S")


def get_stable_seed(base_str: str) -> int:
    """Generate a stable 32-bit integer seed from a string."""
    # SHA-256 is stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(base_str.encode()).digest()[:4], "big")


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k.value if hasattr(k, "value") else k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    return value


class ExperimentLogger:
    """
    JSONL logger for run data.
    Each line is a JSON object representing one event; timestamps are kept
    out of step events so the metric stream of two identical runs matches.
    """

    def __init__(self, run_id: str, log_dir: str = LOG_DIR, resume: bool = False):
        self.run_id = run_id
        self.log_dir = Path(log_dir) / "single_runs"
        ensure_dir(self.log_dir)

        self.log_file = self.log_dir / f"{run_id}.jsonl"
        self.summary_file = self.log_dir / f"{run_id}_summary.json"

        if not resume:
            with open(self.log_file, "w", encoding="utf-8") as f:
                event = {"type": "run_start", "run_id": run_id, "timestamp": get_timestamp()}
                f.write(json.dumps(event, ensure_ascii=False) + "\n")

    def _write_event(self, event: Dict[str, Any]):
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(_jsonable(event), ensure_ascii=False) + "\n")

    def log_config(self, config: Dict[str, Any]):
        self._write_event({"type": "config", "timestamp": get_timestamp(), **config})

    def log_pretrain_step(self, step: int, losses: Dict[str, float]):
        self._write_event({"type": "pretrain_step", "step": step, **losses})

    def log_train_step(self, step: int, loss: float, per_task: Dict[str, float]):
        self._write_event({"type": "train_step", "step": step, "loss": loss, **per_task})

    def log_fold_start(self, fold: int, sizes: Dict[str, int]):
        self._write_event({"type": "fold_start", "fold": fold, **sizes})

    def log_fold_end(self, fold: int, metrics: List[Dict[str, Any]]):
        self._write_event({"type": "fold_end", "fold": fold, "metrics": metrics})

    def log_evaluation(self, split: str, metrics: List[Dict[str, Any]]):
        self._write_event({"type": "evaluation", "split": split, "metrics": metrics})

    def log_run_end(self, summary: Dict[str, Any]):
        """Log run completion and write the summary file."""
        self._write_event({"type": "run_end", "timestamp": get_timestamp(), **summary})
        with open(self.summary_file, "w", encoding="utf-8") as f:
            json.dump(_jsonable(summary), f, ensure_ascii=False, indent=2)


def read_events(jsonl_path, event_type: Optional[str] = None) -> List[Dict[str, Any]]:
    """Parse a JSONL log, skipping torn lines from an interrupted write."""
    path = Path(jsonl_path)
    if not path.exists():
        return []
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError:
                continue
            if event_type is None or data.get("type") == event_type:
                events.append(data)
    return events


def write_csv(frame: pd.DataFrame, path) -> Path:
    """Write with fixed float formatting so identical runs give identical bytes."""
    p = Path(path)
    ensure_dir(p.parent)
    frame.to_csv(p, index=False, float_format="%.10g")
    return p


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if window < 1 or values.size < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def format_metrics_for_display(rows: List[Dict[str, Any]]) -> str:
    """One `task: acc/auc` chunk per task."""
    def fmt(v):
        return "  -  " if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.3f}"
    return " | ".join(f"{r['task']}: acc {fmt(r['acc'])} auc {fmt(r['auc'])}" for r in rows)
