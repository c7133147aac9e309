"""Normalized-sigmoid multinomial policy over augmentation operations.

``p_k = sigmoid(theta_k) * mask_k / sum_i sigmoid(theta_i) * mask_i``
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from .augment import N_ELEMENTS, N_OPS

POLICY_FORMAT_VERSION = 1
_POLICY_HEADER = "AWSPOLICY"


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable policy value; updates build new instances."""

    theta: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError("theta must be a non-empty vector")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta entries must be finite")
        if self.mask is None:
            mask = np.ones(theta.size, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
        if mask.shape != theta.shape:
            raise ValueError("mask and theta lengths differ")
        if not mask.any():
            raise ValueError("at least one operation must remain available")
        theta.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def uniform(cls, k: int = N_OPS) -> "PolicyParams":
        return cls(np.zeros(k))

    @property
    def k(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.mask)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return np.array_equal(self.theta, other.theta) and np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return f"PolicyParams(k={self.k}, unmasked={int(self.mask.sum())})"


def _masked_sigmoid(p: PolicyParams) -> np.ndarray:
    return np.where(p.mask, expit(p.theta), 0.0)


def probabilities(p: PolicyParams) -> np.ndarray:
    s = _masked_sigmoid(p)
    return s / s.sum()


def sample_ops(p: PolicyParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` operation ids i.i.d. from the policy."""
    probs = probabilities(p)
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    ids = np.searchsorted(cdf, rng.random(size), side="right")
    # a masked id has zero width in the cdf, so it can never be hit
    return np.minimum(ids, p.k - 1)


def sample_op(p: PolicyParams, rng: np.random.Generator) -> int:
    return int(sample_ops(p, rng, 1)[0])


def count_ops(op_ids: np.ndarray, k: int = N_OPS) -> np.ndarray:
    return np.bincount(np.asarray(op_ids, dtype=np.int64), minlength=k)


def log_prob(p: PolicyParams, k: int) -> float:
    if not p.mask[k]:
        raise ValueError("operation removed from policy")
    return float(log_probs(p)[k])


def log_probs(p: PolicyParams) -> np.ndarray:
    """Vector of ``ln p_k``; ``-inf`` at masked entries."""
    # log(sigmoid(t)) = -log(1 + exp(-t)), stable for both signs via logaddexp
    log_s = np.where(p.mask, -np.logaddexp(0.0, -p.theta), -np.inf)
    return log_s - logsumexp(log_s[p.mask])


def weighted_grad_log_prob(p: PolicyParams, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_k w_k ln p_k`` with respect to theta, for real weights."""
    w = np.where(p.mask, np.asarray(weights, dtype=np.float64), 0.0)
    s = _masked_sigmoid(p)
    ds = s * (1.0 - s)
    grad = w * (1.0 - s) - w.sum() * ds / s.sum()
    return np.where(p.mask, grad, 0.0)


def grad_log_prob(p: PolicyParams, counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts)
    if np.any(counts[~p.mask] != 0):
        raise ValueError("counts recorded for masked operations")
    return weighted_grad_log_prob(p, counts)


def entropy(p: PolicyParams) -> float:
    probs = probabilities(p)
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def first_element_marginal(p: PolicyParams, n_elements: int = N_ELEMENTS) -> np.ndarray:
    if p.k != n_elements * n_elements:
        raise ValueError(f"policy size {p.k} is not {n_elements}^2")
    return probabilities(p).reshape(n_elements, n_elements).sum(axis=1)


def ranked_ops(p: PolicyParams) -> np.ndarray:
    """Unmasked op ids by decreasing probability, ties by lower id."""
    probs = probabilities(p)
    ids = np.flatnonzero(p.mask)
    order = np.lexsort((ids, -probs[ids]))
    return ids[order]


def mask_top_k(p: PolicyParams, k: int) -> PolicyParams:
    """Remove the ``k`` most probable operations from the policy."""
    available = int(p.mask.sum())
    if k >= available:
        raise ValueError("cannot remove all operations")
    if k < 0:
        raise ValueError("k must be non-negative")
    mask = p.mask.copy()
    mask[ranked_ops(p)[:k]] = False
    return PolicyParams(p.theta, mask)


def top_ops(p: PolicyParams, n: int) -> list[tuple[int, float]]:
    probs = probabilities(p)
    return [(int(i), float(probs[i])) for i in ranked_ops(p)[:n]]


# ---------------------------------------------------------------------------
# text serialization: version line, K, mask bits, one theta per line (%.17g)


def dumps_policy(p: PolicyParams) -> str:
    lines = [
        f"{_POLICY_HEADER} {POLICY_FORMAT_VERSION}",
        str(p.k),
        "".join("1" if b else "0" for b in p.mask),
    ]
    lines.extend("%.17g" % t for t in p.theta)
    return "\n".join(lines) + "\n"


def loads_policy(text: str) -> PolicyParams:
    lines = text.splitlines()
    if len(lines) < 3:
        raise ValueError("corrupt policy file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _POLICY_HEADER:
        raise ValueError("corrupt policy file")
    if head[1] != str(POLICY_FORMAT_VERSION):
        raise ValueError(f"unsupported policy version {head[1]}")
    k = int(lines[1])
    bits = lines[2].strip()
    if len(bits) != k or set(bits) - {"0", "1"} or len(lines) != 3 + k:
        raise ValueError("corrupt policy file")
    theta = np.array([float(x) for x in lines[3:]])
    return PolicyParams(theta, np.array([b == "1" for b in bits]))


def save_policy(p: PolicyParams, path: str | os.PathLike) -> None:
    from .model import atomic_write

    atomic_write(path, dumps_policy(p).encode("ascii"))


def load_policy(path: str | os.PathLike, k: Optional[int] = None) -> PolicyParams:
    with open(path, "r", encoding="ascii") as fh:
        p = loads_policy(fh.read())
    if k is not None and p.k != k:
        raise ValueError(f"policy has {p.k} operations, expected {k}")
    return p
