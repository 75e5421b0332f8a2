"""
Checkpoints and resumable training state.

A checkpoint is one .npz archive: a JSON header (schema version, dimensions,
config, step counter, RNG state) plus named parameter blocks and, for a
training state, the AdamW moments.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np

from src.config import SCHEMA_VERSION, RunConfig
from src.errors import ConfigError
from src.nn import ParamStore
from src.optim import AdamW

HEADER_KEY = "header"
PARAM = "param::"
MOMENT_M = "adam_m::"
MOMENT_V = "adam_v::"

# dimensions that must agree between a checkpoint and the run loading it
COMPAT_KEYS = ("latent_dim", "raw_dim", "num_tokens", "num_heads")


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))


def make_header(cfg: RunConfig, kind: str, step: int = 0, **extra) -> Dict[str, Any]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "step": step,
        "config": cfg.to_dict(),
    }
    header.update({k: getattr(cfg, k) for k in COMPAT_KEYS})
    header.update(extra)
    return header


def save_checkpoint(
    path: str,
    store: ParamStore,
    header: Dict[str, Any],
    prefixes: Optional[Iterable[str]] = None,
    optimizer: Optional[AdamW] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Write the parameters whose names start with any of `prefixes` (all if None)."""
    prefixes = tuple(prefixes) if prefixes is not None else ("",)
    header = dict(header)
    header["frozen"] = sorted(store.frozen)
    if rng is not None:
        header["rng_state"] = rng.bit_generator.state
    if optimizer is not None:
        header["optimizer_t"] = optimizer.t
        header["optimizer_names"] = list(optimizer.names)

    arrays = {HEADER_KEY: np.array(json.dumps(header, sort_keys=True))}
    for name in store.names():
        if name.startswith(prefixes):
            arrays[PARAM + name] = store[name]
    if optimizer is not None:
        for name in optimizer.names:
            arrays[MOMENT_M + name] = optimizer.m[name]
            arrays[MOMENT_V + name] = optimizer.v[name]

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:   # file handle keeps np.savez from appending .npz
        np.savez(f, **arrays)


def load_checkpoint(path: str) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(p, allow_pickle=False) as data:
        if HEADER_KEY not in data.files:
            raise ConfigError(f"{path}: not a checkpoint (no header)")
        header = json.loads(str(data[HEADER_KEY]))
        ckpt = Checkpoint(header=header, params={})
        for key in data.files:
            if key.startswith(PARAM):
                ckpt.params[key[len(PARAM):]] = data[key]
            elif key.startswith(MOMENT_M):
                ckpt.m[key[len(MOMENT_M):]] = data[key]
            elif key.startswith(MOMENT_V):
                ckpt.v[key[len(MOMENT_V):]] = data[key]
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    return ckpt


def check_compatible(ckpt: Checkpoint, cfg: RunConfig, kind: Optional[str] = None):
    if kind is not None and ckpt.kind != kind:
        raise ConfigError(f"expected a {kind!r} checkpoint, got {ckpt.kind!r}")
    for key in COMPAT_KEYS:
        if ckpt.header.get(key) != getattr(cfg, key):
            raise ConfigError(f"checkpoint {key}={ckpt.header.get(key)} does not match run {key}={getattr(cfg, key)}")


def load_params(store: ParamStore, ckpt: Checkpoint, prefixes: Iterable[str]):
    """Copy the checkpoint's blocks under `prefixes` into `store`; every such block must exist."""
    prefixes = tuple(prefixes)
    wanted = [n for n in store.names() if n.startswith(prefixes)]
    missing = [n for n in wanted if n not in ckpt.params]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters {missing[:3]}")
    store.load_state_dict({n: ckpt.params[n] for n in wanted}, strict=False)


# === Training State ===
@dataclass
class TrainState:
    """Everything needed to continue a fine-tuning run exactly where it stopped."""
    store: ParamStore
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0

    def save(self, path: str, cfg: RunConfig, **extra):
        header = make_header(cfg, kind="train_state", step=self.step, **extra)
        save_checkpoint(path, self.store, header, optimizer=self.optimizer, rng=self.rng)

    def restore(self, path: str, cfg: RunConfig) -> Dict[str, Any]:
        """Load a saved state in place; returns the header."""
        ckpt = load_checkpoint(path)
        check_compatible(ckpt, cfg, kind="train_state")
        self.store.load_state_dict(ckpt.params, strict=True)
        self.store.frozen = set(ckpt.header.get("frozen", []))
        self.optimizer.load_state_dict({"t": ckpt.header.get("optimizer_t", 0), "m": ckpt.m, "v": ckpt.v})
        self.rng.bit_generator.state = ckpt.header["rng_state"]
        self.step = ckpt.step
        return ckpt.header
