"""
Configuration for the GMENet desk-scale reproduction.
"""
import json
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.errors import ConfigError

# === Desk-scale Defaults (Full Runs) ===
LATENT_DIM = 64
RAW_DIM = 64
NUM_TOKENS = 8
NUM_HEADS = 2
BATCH_SIZE = 32
PRETRAIN_STEPS = 2000
FINETUNE_STEPS = 1000
LEARNING_RATE = 1e-3
PRETRAIN_LEARNING_RATE = 3e-3
WEIGHT_DECAY = 0.01
MASK_PROB = 0.5
NUM_FOLDS = 5
TRAIN_FRACTION = 0.8  # FS-pool share per center, the rest is internal test

# === Debug/Test Parameters (Lightweight) ===
DEBUG_LATENT_DIM = 32
DEBUG_PRETRAIN_STEPS = 50
DEBUG_FINETUNE_STEPS = 100

SCHEMA_VERSION = 1


# === Cohort ===
class Center(str, Enum):
    TCGA = "TCGA"
    BRATS = "BRATS"
    RJ = "RJ"
    XH = "XH"
    TH = "TH"
    HS = "HS"


class Sequence(str, Enum):
    FL = "fl"
    T1C = "t1c"

    @property
    def other(self) -> "Sequence":
        return Sequence.T1C if self is Sequence.FL else Sequence.FL


class Direction(str, Enum):
    """Generation direction of the CGGM, named source_to_target."""
    FL_TO_T1C = "fl_to_t1c"
    T1C_TO_FL = "t1c_to_fl"

    @property
    def source(self) -> Sequence:
        return Sequence.FL if self is Direction.FL_TO_T1C else Sequence.T1C

    @property
    def target(self) -> Sequence:
        return self.source.other

    @property
    def reverse(self) -> "Direction":
        return Direction.T1C_TO_FL if self is Direction.FL_TO_T1C else Direction.FL_TO_T1C

    @classmethod
    def generating(cls, missing: Sequence) -> "Direction":
        """Direction that synthesizes the `missing` sequence."""
        return cls.T1C_TO_FL if missing is Sequence.FL else cls.FL_TO_T1C


# === Labels (WHO CNS5) ===
class IDH(IntEnum):
    WILDTYPE = 0
    MUTANT = 1


class Codel(IntEnum):
    INTACT = 0
    CODELETED = 1


class Pathology(IntEnum):
    OLIGODENDROGLIOMA = 0
    ASTROCYTOMA = 1
    GLIOBLASTOMA = 2


class Task(str, Enum):
    IDH = "idh"
    CODEL = "codel"
    PATHOLOGY = "pathology"

    @property
    def num_classes(self) -> int:
        return 3 if self is Task.PATHOLOGY else 2


TASKS = [Task.IDH, Task.CODEL, Task.PATHOLOGY]


# === Protocol ===
class Mode(str, Enum):
    FS = "fs"   # complete-sequence training pool only
    MS = "ms"   # FS pool plus every incomplete record


class Variant(str, Enum):
    FULL = "full"
    NO_CGGM = "no_cggm"     # zero-filled missing sequences
    NO_DWEFM = "no_dwefm"   # concatenation + linear projection


class SplitName(str, Enum):
    VALIDATION = "validation"
    INTERNAL = "internal"
    INDEPENDENT = "independent"


INDEPENDENT_CENTER = Center.BRATS

# reported multi-center cohort sizes
DEFAULT_CENTER_COUNTS = {
    Center.TCGA: 317,
    Center.BRATS: 160,
    Center.RJ: 22,
    Center.XH: 12,
    Center.TH: 37,
    Center.HS: 693,
}

# Subjects with a missing sequence (all other centers are complete)
REPORTED_INCOMPLETE_COUNTS = {
    Center.TCGA: 178,
    Center.HS: 441,
}


def per_sequence_missing_rate(incomplete_fraction: float) -> float:
    """
    Per-sequence rate r giving the requested incomplete share when both
    sequences are dropped independently and an all-missing draw is redrawn:
    P(incomplete) = 2r / (1 + r).
    """
    return incomplete_fraction / (2.0 - incomplete_fraction)


def default_missing_rates() -> Dict[Center, float]:
    rates = {c: 0.0 for c in Center}
    for center, n_incomplete in REPORTED_INCOMPLETE_COUNTS.items():
        rates[center] = per_sequence_missing_rate(n_incomplete / DEFAULT_CENTER_COUNTS[center])
    return rates


# glioblastoma-heavy prior (oligodendroglioma, astrocytoma, glioblastoma)
DEFAULT_CLASS_PRIOR = (0.2, 0.3, 0.5)


def _center_dict(values: Dict[Any, Any], name: str, cast) -> Dict[Center, Any]:
    out = {}
    for key, value in values.items():
        try:
            out[Center(key)] = cast(value)
        except ValueError as e:
            raise ConfigError(f"{name}: invalid entry {key!r}={value!r} ({e})")
    return out


@dataclass
class CohortConfig:
    """Synthetic multi-center cohort parameters."""
    counts: Dict[Center, int] = field(default_factory=lambda: dict(DEFAULT_CENTER_COUNTS))
    missing_fl: Dict[Center, float] = field(default_factory=default_missing_rates)
    missing_t1c: Dict[Center, float] = field(default_factory=default_missing_rates)
    class_prior: Tuple[float, float, float] = DEFAULT_CLASS_PRIOR
    shift_magnitude: float = 0.5
    independent_shift_multiplier: float = 2.0
    coupling: float = 0.9
    noise_scale: float = 0.5
    class_separation: float = 0.3
    latent_factors: int = 16
    raw_dim: int = RAW_DIM
    seed: int = 0

    def __post_init__(self):
        self.counts = _center_dict(self.counts, "counts", int)
        self.missing_fl = _center_dict(self.missing_fl, "missing_fl", float)
        self.missing_t1c = _center_dict(self.missing_t1c, "missing_t1c", float)
        for center in Center:
            self.counts.setdefault(center, 0)
            self.missing_fl.setdefault(center, 0.0)
            self.missing_t1c.setdefault(center, 0.0)
        if any(n < 0 for n in self.counts.values()):
            raise ConfigError("counts must be >= 0")
        for name, rates in (("missing_fl", self.missing_fl), ("missing_t1c", self.missing_t1c)):
            if any(not 0.0 <= r <= 1.0 for r in rates.values()):
                raise ConfigError(f"{name} rates must lie in [0, 1]")
        for center in Center:
            if self.counts[center] > 0 and self.missing_fl[center] == 1.0 and self.missing_t1c[center] == 1.0:
                raise ConfigError(f"{center.value}: both sequences always missing")
        self.class_prior = tuple(float(p) for p in self.class_prior)
        if len(self.class_prior) != len(Pathology):
            raise ConfigError(f"class_prior needs {len(Pathology)} entries")
        if any(p < 0 for p in self.class_prior) or abs(sum(self.class_prior) - 1.0) > 1e-9:
            raise ConfigError("class_prior must be non-negative and sum to 1")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        if self.raw_dim < 1 or self.latent_factors < 1:
            raise ConfigError("raw_dim and latent_factors must be positive")
        if self.noise_scale < 0 or self.shift_magnitude < 0:
            raise ConfigError("noise_scale and shift_magnitude must be >= 0")

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class RunConfig:
    """Model, optimizer and protocol settings for one run."""
    latent_dim: int = LATENT_DIM
    raw_dim: int = RAW_DIM
    num_tokens: int = NUM_TOKENS
    num_heads: int = NUM_HEADS
    expert_dim: Optional[int] = None
    learning_rate: float = LEARNING_RATE
    pretrain_learning_rate: float = PRETRAIN_LEARNING_RATE
    batch_size: int = BATCH_SIZE
    pretrain_steps: int = PRETRAIN_STEPS
    finetune_steps: int = FINETUNE_STEPS
    weight_decay: float = WEIGHT_DECAY
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mask_prob: float = MASK_PROB
    mode: Mode = Mode.MS
    variant: Variant = Variant.FULL
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    num_folds: int = NUM_FOLDS
    split_seed: int = 0
    count_smoothing: bool = False
    log_every: int = 50
    log_dir: str = "logs"

    def __post_init__(self):
        try:
            self.mode = Mode(self.mode)
            self.variant = Variant(self.variant)
        except ValueError as e:
            raise ConfigError(str(e))
        self.betas = tuple(float(b) for b in self.betas)
        self.seeds = [int(s) for s in self.seeds]
        for name in ("latent_dim", "raw_dim", "num_tokens", "num_heads", "batch_size", "num_folds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.latent_dim % self.num_tokens:
            raise ConfigError("latent_dim must be divisible by num_tokens (T x d = D)")
        if self.token_dim % self.num_heads:
            raise ConfigError("token_dim must be divisible by num_heads")
        if self.expert_dim is None:
            self.expert_dim = max(1, self.latent_dim // 2)
        if self.expert_dim < 1:
            raise ConfigError("expert_dim must be positive")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError("mask_prob must lie strictly between 0 and 1")
        if self.learning_rate <= 0 or self.pretrain_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def token_dim(self) -> int:
        return self.latent_dim // self.num_tokens

    @property
    def fused_dim(self) -> int:
        return self.latent_dim

    @property
    def uses_cggm(self) -> bool:
        return self.variant is not Variant.NO_CGGM

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, Enum) else value
        return out

    def debug(self) -> "RunConfig":
        """Lightweight copy for smoke runs."""
        values = self.to_dict()
        values.update(
            latent_dim=DEBUG_LATENT_DIM,
            expert_dim=None,
            pretrain_steps=DEBUG_PRETRAIN_STEPS,
            finetune_steps=DEBUG_FINETUNE_STEPS,
        )
        return RunConfig(**values)


# === Config Files ===
def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        lowered = raw.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return raw.strip('"\'')


# keys read by both the cohort and the run config
SHARED_KEYS = ("seed", "raw_dim")


def parse_config_text(text: str) -> Tuple[CohortConfig, RunConfig]:
    """
    Parse flat `key = value` (or `key: value`) text into both config objects.
    Dotted keys address dict-valued fields, e.g. `counts.TCGA = 317`.
    """
    cohort_fields = {f.name for f in fields(CohortConfig)}
    run_fields = {f.name for f in fields(RunConfig)}
    cohort_values: Dict[str, Any] = {}
    run_values: Dict[str, Any] = {}

    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"config line {line_number}: expected 'key = value'")
        key, raw = line.split(sep, 1)
        key = key.strip()
        value = _parse_value(raw)

        name, _, sub = key.partition(".")
        if name in SHARED_KEYS:
            cohort_values[name] = value
            run_values[name] = value
            continue
        if name in cohort_fields:
            target = cohort_values
        elif name in run_fields:
            target = run_values
        else:
            raise ConfigError(f"config line {line_number}: unknown key {key!r}")
        if sub:
            target.setdefault(name, {})[sub] = value
        else:
            target[name] = value

    # dotted overrides merge over the defaults
    defaults = CohortConfig()
    for name in ("counts", "missing_fl", "missing_t1c"):
        if name in cohort_values:
            merged = {c.value: v for c, v in getattr(defaults, name).items()}
            merged.update(cohort_values[name])
            cohort_values[name] = merged
    return CohortConfig(**cohort_values), RunConfig(**run_values)


def load_config(path: str) -> Tuple[CohortConfig, RunConfig]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"))


# === Logging ===
LOG_DIR = "logs"
