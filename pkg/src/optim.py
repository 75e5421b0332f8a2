"""
AdamW over a ParamStore: bias-corrected moments, decoupled weight decay.
"""
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from src.errors import ConfigError
from src.nn import ParamStore


class AdamW:
    """
    Updates the named parameters of `store` in place from its gradient
    accumulators. Frozen parameters are skipped at every step. Weight decay
    applies to matrices only (ndim >= 2), never to biases, gains or vectors.
    """

    def __init__(
        self,
        store: ParamStore,
        names: Optional[Iterable[str]] = None,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ConfigError("betas must lie in [0, 1)")
        self.store = store
        self.names = list(names) if names is not None else store.names()
        unknown = [n for n in self.names if n not in store]
        if unknown:
            raise ConfigError(f"optimizer given unknown parameters: {unknown[:3]}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(store[n]) for n in self.names}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(store[n]) for n in self.names}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in self.names:
            if self.store.is_frozen(name):
                continue
            p = self.store.params[name]
            g = self.store.grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, object]:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: Dict[str, object]):
        missing = set(self.names) - set(state["m"])
        if missing:
            raise ConfigError(f"optimizer state lacks moments for {sorted(missing)[:3]}")
        self.t = int(state["t"])
        for n in self.names:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.05) -> float:
    """Cosine decay from base_lr at step 0 to floor * base_lr at total_steps."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress)))
