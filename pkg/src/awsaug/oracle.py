"""Brute-force checks on small trajectory spaces, plus a finite-difference helper.

A trajectory is ``N`` i.i.d. operations.  Without weight sharing every step
follows the searched policy ``p``; with sharing the first ``k_early`` steps
follow the shared policy ``q`` instead.  :func:`kl_divergence` sums
``P(t) * ln(P(t) / Q(t))`` over every one of the ``k_ops ** n_steps``
trajectories, independently of any closed form.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .policy import PolicyParams, probabilities

MAX_TRAJECTORIES = 50_000


@dataclass(frozen=True)
class TrajectorySpace:
    k_ops: int
    n_steps: int
    k_early: int

    def __post_init__(self):
        if not (1 <= self.k_ops <= 6 and 1 <= self.n_steps <= 6):
            raise ValueError("k_ops and n_steps must be in [1, 6]")
        if not 0 <= self.k_early <= self.n_steps:
            raise ValueError("k_early must be in [0, n_steps]")
        if self.k_ops ** self.n_steps > MAX_TRAJECTORIES:
            raise ValueError("trajectory space too large to enumerate")

    def trajectories(self) -> np.ndarray:
        """All trajectories as an ``(k_ops ** n_steps, n_steps)`` array of op ids."""
        return np.array(list(itertools.product(range(self.k_ops), repeat=self.n_steps)), dtype=np.int64).reshape(
            -1, self.n_steps
        )


def as_distribution(policy, k: Optional[int] = None) -> np.ndarray:
    if isinstance(policy, PolicyParams):
        p = probabilities(policy)
    else:
        p = np.asarray(policy, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("policy must be a probability vector")
    if k is not None and p.size != k:
        raise ValueError(f"policy has {p.size} outcomes, space has {k}")
    return p


def _kl_many(space: TrajectorySpace, p: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """Brute-force KL(P_pp || P_qp) for every row of ``qs``."""
    traj = space.trajectories()
    with np.errstate(divide="ignore"):
        logp = np.log(p)
        logq = np.log(qs)
    logp_traj = logp[traj].sum(axis=1)
    keep = np.isfinite(logp_traj)  # zero-probability trajectories contribute nothing
    traj, logp_traj = traj[keep], logp_traj[keep]
    weight = np.exp(logp_traj)
    early, late = traj[:, : space.k_early], traj[:, space.k_early:]
    logq_traj = logq[:, early].sum(axis=2) + logp[late].sum(axis=1)[None, :]
    with np.errstate(invalid="ignore"):
        terms = weight[None, :] * (logp_traj[None, :] - logq_traj)
    out = terms.sum(axis=1)
    out[np.any(~np.isfinite(logq_traj), axis=1)] = np.inf
    return out


def kl_divergence(space: TrajectorySpace, theta, theta_bar) -> float:
    """Exact KL between the unshared and shared trajectory distributions.

    Returns ``inf`` when the shared policy gives zero probability to an
    operation the searched policy can emit during the early steps.
    """
    p = as_distribution(theta, space.k_ops)
    q = as_distribution(theta_bar, space.k_ops)
    return float(_kl_many(space, p, q[None, :])[0])


def single_step_kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    if np.any(q[nz] == 0):
        return np.inf
    return float((p[nz] * np.log(p[nz] / q[nz])).sum())


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """Every composition of ``resolution`` into ``k`` non-negative parts, normalised."""
    rows = []
    for bars in itertools.combinations(range(resolution + k - 1), k - 1):
        edges = (-1,) + bars + (resolution + k - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    return np.array(rows, dtype=np.float64) / resolution


@dataclass
class MinimizerReport:
    verified: bool
    margin: float  # min finite KL(candidate) - KL(uniform) over non-uniform candidates
    kl_uniform: float
    best_kl: float
    best_candidate: np.ndarray
    n_candidates: int
    n_infinite: int


def _report(kls: np.ndarray, candidates: np.ndarray, kl_uniform: float) -> MinimizerReport:
    k = candidates.shape[1]
    is_uniform = np.all(np.abs(candidates - 1.0 / k) < 1e-12, axis=1)
    finite = np.isfinite(kls)
    others = finite & ~is_uniform
    margin = float((kls[others] - kl_uniform).min()) if others.any() else np.inf
    best = int(np.argmin(np.where(finite, kls, np.inf)))
    best_kl = float(kls[best])
    return MinimizerReport(
        verified=bool(kl_uniform <= best_kl),
        margin=margin,
        kl_uniform=kl_uniform,
        best_kl=best_kl,
        best_candidate=candidates[best],
        n_candidates=len(candidates),
        n_infinite=int((~finite).sum()),
    )


def _candidates(k: int, grid_resolution: int) -> np.ndarray:
    if grid_resolution < 3:
        raise ValueError("grid_resolution must be >= 3")
    return np.vstack([simplex_grid(k, grid_resolution), np.full((1, k), 1.0 / k)])


def verify_uniform_minimizer(space: TrajectorySpace, theta, grid_resolution: int = 10) -> MinimizerReport:
    """Check whether a uniform shared policy minimizes the KL for this fixed ``theta``.

    Candidates are the simplex grid plus the exact uniform point; candidates
    with infinite KL are excluded from the comparison.
    """
    p = as_distribution(theta, space.k_ops)
    cands = _candidates(space.k_ops, grid_resolution)
    kls = _kl_many(space, p, cands)
    return _report(kls, cands, float(kls[-1]))


def cyclic_ensemble(thetas: Iterable) -> np.ndarray:
    """All cyclic shifts of every policy; the ensemble mean is exactly uniform."""
    rows = []
    for t in thetas:
        p = as_distribution(t)
        rows.extend(np.roll(p, s) for s in range(p.size))
    return np.array(rows)


def verify_uniform_minimizer_ensemble(
    space: TrajectorySpace, thetas: Sequence, grid_resolution: int = 10
) -> MinimizerReport:
    """Policy-agnostic variant: mean KL over a cyclically closed ensemble of searched policies.

    The shared policy is trained once for all searched policies, so the
    relevant objective is the KL averaged over them.  Closing the ensemble
    under cyclic shifts makes its mean policy uniform.
    """
    ens = cyclic_ensemble(thetas)
    cands = _candidates(space.k_ops, grid_resolution)
    kls = np.mean([_kl_many(space, p, cands) for p in ens], axis=0)
    return _report(kls, cands, float(kls[-1]))


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + h
        up = f(x)
        xf[j] = orig - h
        down = f(x)
        xf[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {j}")
        flat[j] = (up - down) / (2.0 * h)
    return grad


def closed_form_kl(space: TrajectorySpace, theta, theta_bar) -> float:
    """Per-step telescoping: ``k_early * KL(p || q)`` for a single step."""
    p = as_distribution(theta, space.k_ops)
    q = as_distribution(theta_bar, space.k_ops)
    return space.k_early * single_step_kl(p, q)


@dataclass
class VerificationRow:
    index: int
    space: TrajectorySpace
    p: np.ndarray
    report: MinimizerReport
    closed_form_error: float


def random_spaces(n: int, max_k_ops: int, max_n_steps: int, rng: np.random.Generator) -> list[TrajectorySpace]:
    """``n`` spaces cycling through every (k_ops >= 2, n_steps, k_early >= 1) combination in range."""
    combos = [
        TrajectorySpace(k, s, e)
        for k in range(2, max_k_ops + 1)
        for s in range(1, max_n_steps + 1)
        for e in range(1, s + 1)
    ]
    order = rng.permutation(len(combos))
    return [combos[order[i % len(combos)]] for i in range(n)]


def verification_suite(
    n_thetas: int = 50,
    max_k_ops: int = 5,
    max_n_steps: int = 4,
    grid_resolution: int = 10,
    mode: str = "per-theta",
    seed: int = 0,
    theta_scale: float = 1.5,
) -> list[VerificationRow]:
    """Random policies over small spaces, each checked by brute force.

    ``mode`` is ``"per-theta"`` (uniform must minimize the KL for each
    policy on its own) or ``"ensemble"`` (uniform must minimize the KL
    averaged over the policy's cyclic shifts).
    """
    if mode not in ("per-theta", "ensemble"):
        raise ValueError(f"unknown verification mode {mode!r}")
    rng = np.random.default_rng(seed)
    rows = []
    for i, space in enumerate(random_spaces(n_thetas, max_k_ops, max_n_steps, rng)):
        theta = rng.normal(0.0, theta_scale, space.k_ops)
        p = probabilities(PolicyParams(theta))
        if mode == "per-theta":
            report = verify_uniform_minimizer(space, p, grid_resolution)
        else:
            report = verify_uniform_minimizer_ensemble(space, [p], grid_resolution)
        uniform = np.full(space.k_ops, 1.0 / space.k_ops)
        err = abs(kl_divergence(space, p, uniform) - closed_form_kl(space, p, uniform))
        rows.append(VerificationRow(i, space, p, report, err))
    return rows
