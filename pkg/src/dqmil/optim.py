"""RAdam with decoupled weight decay, wrapped in Lookahead.

All parameters are packed into one contiguous buffer (their ``.data`` and
``.grad`` become views into it) so a step is a handful of vectorised numpy
operations regardless of how many tensors the model has.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, TrainingAbort


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.lookahead_k < 1:
            raise ConfigError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError(f"lookahead_alpha must lie in (0, 1], got {self.lookahead_alpha}")


def radam_rho(t: int, beta2: float) -> float:
    """Length of the approximated simple moving average at step ``t``."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    return rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def radam_step(theta, grad, m, v, t: int, cfg: OptimConfig, decay_mask=None, scratch=None):
    """One in-place RAdam update of ``theta`` at step ``t`` (1-based).

    Decoupled weight decay ``theta -= lr * wd * theta`` is applied first, only
    where ``decay_mask`` is 1 (everywhere when no mask is given).
    """
    s = np.empty_like(theta) if scratch is None else scratch
    if cfg.weight_decay:
        decay = cfg.lr * cfg.weight_decay
        if decay_mask is None:
            theta *= 1.0 - decay
        else:
            np.multiply(theta, decay_mask, out=s)
            s *= decay
            theta -= s
    m *= cfg.beta1
    np.multiply(grad, 1.0 - cfg.beta1, out=s)
    m += s
    v *= cfg.beta2
    np.multiply(grad, grad, out=s)
    s *= 1.0 - cfg.beta2
    v += s

    bias1 = 1.0 - cfg.beta1 ** t
    rho = radam_rho(t, cfg.beta2)
    if rho > 4.0:
        rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0
        rect = math.sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
        step = cfg.lr * rect * math.sqrt(1.0 - cfg.beta2 ** t) / bias1
        np.sqrt(v, out=s)
        s += cfg.eps
        np.divide(m, s, out=s)
        s *= step
    else:
        np.multiply(m, cfg.lr / bias1, out=s)
    theta -= s
    return theta


def lookahead_sync(fast, slow, k: int, alpha: float, t: int) -> bool:
    """On every ``k``-th step pull ``slow`` toward ``fast`` and reset ``fast`` to it."""
    if t < 1:
        raise ConfigError("lookahead step counter starts at 1")
    if t % k:
        return False
    slow += alpha * (fast - slow)
    fast[...] = slow
    return True


class LookaheadRAdam:
    """Optimizer over named tensors sharing one flat data buffer and one flat grad buffer."""

    def __init__(self, named_params: Sequence, cfg: OptimConfig = OptimConfig(),
                 decays: Callable[[str], bool] = lambda name: True):
        named_params = list(named_params)
        if not named_params:
            raise ConfigError("optimizer got no parameters")
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.tensors = [p for _, p in named_params]
        dtype = self.tensors[0].data.dtype
        sizes = [p.data.size for p in self.tensors]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.data = np.empty(int(self.offsets[-1]), dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.decay_mask = np.zeros_like(self.data)
        for name, p, lo, hi in zip(self.names, self.tensors, self.offsets[:-1], self.offsets[1:]):
            self.data[lo:hi] = p.data.reshape(-1)
            p.data = self.data[lo:hi].reshape(p.data.shape)
            p.grad = self.grad[lo:hi].reshape(p.data.shape)
            if decays(name):
                self.decay_mask[lo:hi] = 1
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.slow = self.data.copy()
        self._scratch = np.empty_like(self.data)
        self.t = 0

    def zero_grad(self):
        self.grad.fill(0)

    def _check_finite(self):
        if nx.all_finite(self.grad):
            return
        for name, lo, hi in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            if not np.all(np.isfinite(self.grad[lo:hi])):
                raise TrainingAbort(f"non-finite gradient in parameter {name!r} at step {self.t + 1}")

    def step(self):
        self._check_finite()
        if self.cfg.clip_norm is not None:
            norm = float(np.sqrt(np.dot(self.grad, self.grad)))
            if norm > self.cfg.clip_norm:
                self.grad *= self.cfg.clip_norm / norm
        self.t += 1
        radam_step(self.data, self.grad, self.m, self.v, self.t, self.cfg,
                   self.decay_mask, self._scratch)
        lookahead_sync(self.data, self.slow, self.cfg.lookahead_k, self.cfg.lookahead_alpha, self.t)


def default_decay_filter(name: str) -> bool:
    """Weight decay applies to weight matrices only: not latents, biases or norm parameters."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "weight"
