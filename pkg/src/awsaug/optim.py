"""Adam for theta, the EMA reward baseline, and the clipped-surrogate PPO update."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .policy import PolicyParams, log_probs, weighted_grad_log_prob


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, k: int, lr: float = 0.1, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(k), np.zeros(k), 0, lr, beta1, beta2, eps)


def adam_step(s: AdamState, theta: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam *ascent* step: ``theta + lr * m_hat / (sqrt(v_hat) + eps)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape or theta.shape != s.m.shape:
        raise ValueError("length mismatch between theta, grad and optimizer state")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("gradient overflow")
    step = s.step + 1
    m = s.beta1 * s.m + (1.0 - s.beta1) * grad
    v = s.beta2 * s.v + (1.0 - s.beta2) * grad * grad
    m_hat = m / (1.0 - s.beta1 ** step)
    v_hat = v / (1.0 - s.beta2 ** step)
    theta = theta + s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return replace(s, m=m, v=v, step=step), theta


@dataclass(frozen=True)
class BaselineState:
    value: float = 0.0
    initialized: bool = False
    decay: float = 0.9


def baseline_update(b: BaselineState, reward: float) -> BaselineState:
    if not np.isfinite(reward):
        raise ValueError("reward must be finite")
    if not b.initialized:
        return replace(b, value=float(reward), initialized=True)
    return replace(b, value=b.decay * b.value + (1.0 - b.decay) * float(reward))


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    surrogate_epochs: int = 4
    lr_theta: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass(frozen=True, eq=False)
class PpoBatch:
    """Actions of one fine-tuning run, aggregated per operation id."""

    counts: np.ndarray
    old_log_probs: np.ndarray
    reward: float
    advantage: float

    @classmethod
    def collect(cls, p_old: PolicyParams, counts: np.ndarray, reward: float, baseline: float) -> "PpoBatch":
        return cls(np.asarray(counts), log_probs(p_old), float(reward), float(reward) - float(baseline))


def _ratios(p: PolicyParams, batch: PpoBatch) -> tuple[np.ndarray, np.ndarray]:
    used = batch.counts > 0
    lp = log_probs(p)
    r = np.ones(p.k)
    r[used] = np.exp(lp[used] - batch.old_log_probs[used])
    return r, used


def surrogate(p: PolicyParams, batch: PpoBatch, clip: float) -> float:
    """Clipped surrogate ``sum_k c_k min(r_k A, clip(r_k) A) / total``."""
    total = batch.counts.sum()
    if total == 0:
        return 0.0
    r, used = _ratios(p, batch)
    a = batch.advantage
    terms = np.minimum(r * a, np.clip(r, 1.0 - clip, 1.0 + clip) * a)
    return float((batch.counts[used] * terms[used]).sum() / total)


def surrogate_grad(p: PolicyParams, batch: PpoBatch, clip: float) -> np.ndarray:
    """Analytic gradient of :func:`surrogate` with respect to theta.

    A clipped term is constant in theta, so only the terms where the
    unclipped branch attains the min contribute ``c_k A r_k grad ln p_k``.
    """
    total = batch.counts.sum()
    a = batch.advantage
    if total == 0 or a == 0:
        return np.zeros(p.k)
    r, used = _ratios(p, batch)
    if a > 0:
        active = used & (r <= 1.0 + clip)
    else:
        active = used & (r >= 1.0 - clip)
    weights = np.where(active, batch.counts * a * r / total, 0.0)
    return weighted_grad_log_prob(p, weights)


def ppo_update(
    p: PolicyParams, batch: PpoBatch, adam: AdamState, cfg: PpoConfig = PpoConfig()
) -> tuple[PolicyParams, AdamState]:
    """``cfg.surrogate_epochs`` Adam ascent steps on the clipped surrogate."""
    if batch.advantage == 0:
        return p, adam
    for _ in range(cfg.surrogate_epochs):
        grad = surrogate_grad(p, batch, cfg.clip)
        adam, theta = adam_step(adam, p.theta, grad)
        # masked ops keep their theta exactly
        theta = np.where(p.mask, theta, p.theta)
        p = p.with_theta(theta)
    return p, adam


def reinforce_direction(p: PolicyParams, batch: PpoBatch) -> np.ndarray:
    """REINFORCE-with-baseline direction ``A * grad sum_k c_k ln p_k / total``."""
    total = batch.counts.sum()
    return batch.advantage * weighted_grad_log_prob(p, batch.counts / max(total, 1))

