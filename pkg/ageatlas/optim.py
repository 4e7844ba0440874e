"""
Optimizer state shared by network training and affine registration.

Parameters are plain numpy arrays keyed by name and updated in place.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import NumericalError

logger = logging.getLogger(__name__)


@dataclass
class Adam:
    """
    Adaptive moment estimation with bias-corrected first and second moments.

    Args:
        lr: Step size; must be positive.
        betas: Decay rates of the first and second moment estimates.
        eps: Term added to the denominator.
    """

    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update to every array in ``params`` that has a gradient."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient", parameter=name, step=t)
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g, dtype=np.float64)
                v = np.zeros_like(g, dtype=np.float64)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            params[name] -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                params[name].dtype
            )


@dataclass
class PlateauScheduler:
    """
    Multiply the optimizer's lr by ``factor`` once a monitored value has not
    improved for ``patience`` consecutive epochs.
    """

    optimizer: Adam
    factor: float = 0.1
    patience: int = 3
    best: float = float("inf")
    num_bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must be between 0 and 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when the lr was reduced."""
        if metric < self.best:
            self.best = metric
            self.num_bad_epochs = 0
            return False
        self.num_bad_epochs += 1
        if self.num_bad_epochs < self.patience:
            return False
        old = self.optimizer.lr
        self.optimizer.lr = old * self.factor
        self.num_bad_epochs = 0
        logger.info(
            "Plateau after %d epochs: lr %.3g -> %.3g", self.patience, old, self.optimizer.lr
        )
        return True


@dataclass
class GradientAccumulator:
    """Sums mini-batch gradients until ``window`` of them are collected."""

    window: int = 32
    count: int = 0
    buffer: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("accumulation window must be at least 1")

    def add(self, grads: Mapping[str, np.ndarray]) -> bool:
        """Add one mini-batch; returns True when the window is full."""
        for name, g in grads.items():
            if name in self.buffer:
                self.buffer[name] = self.buffer[name] + g
            else:
                self.buffer[name] = np.array(g, dtype=np.float64)
        self.count += 1
        return self.count >= self.window

    def flush(self) -> Optional[Dict[str, np.ndarray]]:
        """Mean gradient over the collected mini-batches, or None when empty."""
        if self.count == 0:
            return None
        mean = {name: g / self.count for name, g in self.buffer.items()}
        self.buffer = {}
        self.count = 0
        return mean
