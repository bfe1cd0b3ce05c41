"""Bias-corrected Adam over named numpy arrays, updated in place."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15, hard_fail: bool = False):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.hard_fail = hard_fail
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.skipped = 0

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> bool:
        """Update ``param`` in place; returns False when a non-finite gradient was skipped."""
        if not np.all(np.isfinite(grad)):
            if self.hard_fail:
                raise NonFiniteGradient(f"non-finite gradient for {name!r}")
            log.warning("skipping Adam step for %s: non-finite gradient", name)
            self.skipped += 1
            return False
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps.setdefault(name, 0)
        m, v = self.m[name], self.v[name]
        t = self.steps[name] = self.steps.get(name, 0) + 1
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def remap(self, name: str, source: np.ndarray, fresh: np.ndarray) -> None:
        """Carry moments through a row reindexing; ``fresh`` rows restart at zero."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            arr = store[name][source].copy()
            arr[fresh] = 0.0
            store[name] = arr

    def extend(self, name: str, n_new: int) -> None:
        if name not in self.m:
            return
        for store in (self.m, self.v):
            arr = store[name]
            store[name] = np.concatenate([arr, np.zeros((n_new,) + arr.shape[1:])])
