"""Augmentation-wise weight sharing search, proxy comparison and schedule experiments.

The search trains one shared checkpoint under uniform augmentation, then
repeatedly fine-tunes a copy of it with operations drawn from the current
policy and feeds the validation accuracy to a PPO update of theta.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import augment
from .augment import N_ELEMENTS, N_OPS, apply_op
from .data import Dataset
from .model import (
    ModelState,
    run_epoch,
    TrainConfig,
    atomic_write,
    cosine_lr,
    default_arch,
    evaluate,
    init_model,
    train,
)
from .optim import AdamState, BaselineState, PpoBatch, PpoConfig, baseline_update, ppo_update
from .policy import (
    PolicyParams,
    count_ops,
    entropy,
    first_element_marginal,
    sample_ops,
    save_policy,
    top_ops,
)

log = logging.getLogger(__name__)


class Proxy(str, enum.Enum):
    P_AF = "P_AF"  # shared weights trained with uniform augmentation, fine-tune + eval
    P_NF = "P_NF"  # shared weights trained without augmentation, fine-tune + eval
    P_IT = "P_IT"  # random initialization, fine-tune + eval
    P_AV = "P_AV"  # shared weights trained with augmentation, eval on augmented validation

    @property
    def needs_checkpoint(self) -> bool:
        return self is not Proxy.P_IT

    @property
    def fine_tunes(self) -> bool:
        return self is not Proxy.P_AV


@dataclass(frozen=True)
class ProxySpec:
    variant: Proxy = Proxy.P_AF

    def __post_init__(self):
        object.__setattr__(self, "variant", Proxy(self.variant))


@dataclass(frozen=True)
class SearchConfig:
    n_early: int = 20
    n_late: int = 3
    t_max: int = 200
    proxy: ProxySpec = ProxySpec()
    ppo: PpoConfig = PpoConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0
    arch: Optional[str] = None
    finetune_lr: Optional[float] = None  # None: cosine value at the hand-off epoch
    snapshot_every: int = 0

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.n_early < 0 or self.n_late < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.proxy.variant.fine_tunes and self.n_late < 1:
            raise ValueError(f"{self.proxy.variant.value} needs n_late >= 1")

    @property
    def total_epochs(self) -> int:
        return self.n_early + self.n_late

    def arch_for(self, data: "SearchData") -> str:
        if self.arch:
            return self.arch
        h, w, c = data.train.images.shape[1:]
        if h != w:
            raise ValueError("default architecture expects square images")
        return default_arch(h, c, data.train.n_classes)

    def handoff_lr(self) -> float:
        if self.finetune_lr is not None:
            return self.finetune_lr
        if self.train.schedule == "constant":
            return self.train.lr_max
        return cosine_lr(self.train.lr_max, self.n_early, self.total_epochs)

    def finetune_config(self) -> TrainConfig:
        return replace(self.train, epochs=self.n_late, schedule="constant", lr_max=self.handoff_lr())


@dataclass(frozen=True)
class SearchData:
    train: Dataset
    val: Dataset


@dataclass
class SearchRecord:
    iteration: int
    counts: np.ndarray
    acc: float
    baseline_before: float
    advantage: float
    entropy: float
    top5: list
    marginal: np.ndarray
    theta_snapshot_ref: str = ""

    def to_json(self) -> dict:
        nz = np.flatnonzero(self.counts)
        return {
            "iteration": self.iteration,
            "counts": {"size": int(self.counts.size), "ids": nz.tolist(), "n": self.counts[nz].tolist()},
            "acc": self.acc,
            "baseline_before": self.baseline_before,
            "advantage": self.advantage,
            "entropy": self.entropy,
            "top5": list(self.top5),
            "marginal": self.marginal.tolist(),
            "theta_snapshot_ref": self.theta_snapshot_ref,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SearchRecord":
        counts = np.zeros(d["counts"]["size"], dtype=np.int64)
        counts[d["counts"]["ids"]] = d["counts"]["n"]
        return cls(
            d["iteration"], counts, d["acc"], d["baseline_before"], d["advantage"], d["entropy"],
            list(d["top5"]), np.array(d["marginal"]), d["theta_snapshot_ref"],
        )


# ---------------------------------------------------------------------------
# rng streams: every (seed, purpose, index) triple gets its own generator

_STREAM_SHARED = 1
_STREAM_ITER = 2
_STREAM_RUN = 4


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose, int(index)])


def uniform_like(p: Optional[PolicyParams] = None) -> PolicyParams:
    if p is None:
        return PolicyParams.uniform(N_OPS)
    return PolicyParams(np.zeros(p.k), p.mask)


# ---------------------------------------------------------------------------


def train_shared(
    cfg: SearchConfig,
    data: SearchData,
    augmented: bool = True,
    mask: Optional[np.ndarray] = None,
) -> ModelState:
    """Train the shared checkpoint for ``n_early`` epochs.

    Each image gets one operation drawn uniformly over the unmasked ops
    (or none when ``augmented`` is false).  The cosine clock spans the
    full ``n_early + n_late`` horizon, so the stage ends at the hand-off
    learning rate used for fine-tuning.
    """
    m = init_model(cfg.arch_for(data), cfg.seed)
    if cfg.n_early == 0:
        return m
    policy = None
    if augmented:
        policy = PolicyParams(np.zeros(N_OPS), mask) if mask is not None else uniform_like()
    rng = stream(cfg.seed, _STREAM_SHARED, int(augmented))
    total = cfg.total_epochs
    for e in range(cfg.n_early):
        m = run_epoch(m, data.train, policy, cfg.train, rng, e, total).state
    return replace(m, velocity=None)


def augment_eval_set(
    val: Dataset, p: PolicyParams, rng: np.random.Generator, fill: int, elements=augment.ELEMENTS
) -> tuple[Dataset, np.ndarray]:
    """One sampled operation per validation image; returns the new set and op counts."""
    ids = sample_ops(p, rng, len(val))
    images = np.stack([apply_op(img, int(k), rng, fill, elements=elements) for img, k in zip(val.images, ids)])
    return Dataset(images, val.labels, val.n_classes, val.split_tag), count_ops(ids, p.k)


def evaluate_policy(
    omega_share: Optional[ModelState],
    p: PolicyParams,
    spec: ProxySpec,
    cfg: SearchConfig,
    data: SearchData,
    rng: np.random.Generator,
    elements=None,
) -> tuple[float, np.ndarray]:
    """Proxy accuracy of policy ``p`` and the op counts sampled while computing it."""
    variant = ProxySpec(spec.variant).variant if not isinstance(spec, ProxySpec) else spec.variant
    elements = augment.ELEMENTS if elements is None else elements
    if variant is Proxy.P_AV:
        aug_val, counts = augment_eval_set(data.val, p, rng, cfg.train.fill, elements)
        return evaluate(omega_share, aug_val), counts
    if variant is Proxy.P_IT:
        start = init_model(cfg.arch_for(data), int(rng.integers(2**31)))
    else:
        if omega_share is None:
            raise ValueError(f"{variant.value} needs a shared checkpoint")
        start = omega_share.copy()
    m, counts = train(start, data.train, p, cfg.finetune_config(), rng, cfg.n_late, elements=elements)
    if counts is None:
        counts = np.zeros(p.k, dtype=np.int64)
    return evaluate(m, data.val), counts


Evaluator = Callable[..., tuple]


# ---------------------------------------------------------------------------
# search loop with a resumable state file


@dataclass
class SearchState:
    iteration: int
    policy: PolicyParams
    adam: AdamState
    baseline: BaselineState
    records: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "iteration": self.iteration,
            "theta": self.policy.theta.tolist(),
            "mask": self.policy.mask.astype(int).tolist(),
            "adam": {
                "m": self.adam.m.tolist(),
                "v": self.adam.v.tolist(),
                "step": self.adam.step,
                "lr": self.adam.lr,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
            },
            "baseline": asdict(self.baseline),
            "records": [r.to_json() for r in self.records],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SearchState":
        if d.get("version") != 1:
            raise ValueError("unsupported search state version")
        a = d["adam"]
        return cls(
            d["iteration"],
            PolicyParams(np.array(d["theta"]), np.array(d["mask"], dtype=bool)),
            AdamState(np.array(a["m"]), np.array(a["v"]), a["step"], a["lr"], a["beta1"], a["beta2"], a["eps"]),
            BaselineState(**d["baseline"]),
            [SearchRecord.from_json(r) for r in d["records"]],
        )


def save_state(state: SearchState, path) -> None:
    atomic_write(path, json.dumps(state.to_json()).encode("utf-8"))


def load_state(path) -> SearchState:
    with open(path, "r", encoding="utf-8") as fh:
        return SearchState.from_json(json.load(fh))


def run_search(
    cfg: SearchConfig,
    data: Optional[SearchData],
    evaluator: Optional[Evaluator] = None,
    omega_share: Optional[ModelState] = None,
    initial: Optional[PolicyParams] = None,
    state_path: Optional[str] = None,
    resume: bool = False,
    snapshot_dir: Optional[str] = None,
    callback: Optional[Callable[[SearchRecord, PolicyParams], None]] = None,
) -> tuple[PolicyParams, list[SearchRecord]]:
    """Run ``cfg.t_max`` policy iterations from the shared checkpoint.

    ``evaluator(omega_share, policy, spec, cfg, data, rng) -> (acc, counts)``
    replaces :func:`evaluate_policy` when given.  With ``state_path`` a
    state file is rewritten after every iteration; ``resume`` continues
    from it.  Every iteration draws from its own ``(seed, t)`` stream, so a
    resumed run reproduces an uninterrupted one exactly.
    """
    evaluator = evaluator or evaluate_policy
    spec = cfg.proxy
    if resume and state_path and os.path.exists(state_path):
        state = load_state(state_path)
        log.info("resuming search at iteration %d", state.iteration + 1)
    else:
        policy = initial if initial is not None else uniform_like()
        state = SearchState(
            0,
            policy,
            AdamState.fresh(policy.k, cfg.ppo.lr_theta, cfg.ppo.beta1, cfg.ppo.beta2),
            BaselineState(),
        )
    if omega_share is None and spec.variant.needs_checkpoint and evaluator is evaluate_policy:
        omega_share = train_shared(cfg, data, augmented=spec.variant is not Proxy.P_NF, mask=state.policy.mask)

    for t in range(state.iteration + 1, cfg.t_max + 1):
        rng = stream(cfg.seed, _STREAM_ITER, t)
        p_old = state.policy
        acc, counts = evaluator(omega_share, p_old, spec, cfg, data, rng)
        acc = float(acc)
        counts = np.asarray(counts, dtype=np.int64)
        baseline_before = state.baseline.value if state.baseline.initialized else acc
        batch = PpoBatch.collect(p_old, counts, acc, baseline_before)
        policy, adam = ppo_update(p_old, batch, state.adam, cfg.ppo)
        baseline = baseline_update(state.baseline, acc)
        snap = ""
        if snapshot_dir and cfg.snapshot_every and t % cfg.snapshot_every == 0:
            snap = os.path.join(snapshot_dir, f"policy_{t:05d}.txt")
            save_policy(policy, snap)
        rec = SearchRecord(
            iteration=t,
            counts=counts,
            acc=acc,
            baseline_before=baseline_before,
            advantage=batch.advantage,
            entropy=entropy(policy),
            top5=[k for k, _ in top_ops(policy, 5)],
            marginal=first_element_marginal(policy) if policy.k == N_OPS else np.zeros(0),
            theta_snapshot_ref=snap,
        )
        state = SearchState(t, policy, adam, baseline, state.records + [rec])
        if state_path:
            save_state(state, state_path)
        if callback:
            callback(rec, policy)
        log.debug("iter %d acc %.4f baseline %.4f", t, acc, baseline_before)
    return state.policy, state.records


# ---------------------------------------------------------------------------
# statistics


class ZeroVarianceError(ValueError):
    pass


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _parallel_map(fn, items: list, workers: int = 1) -> list:
    """Map in submission order; results are merged by index, so worker count never changes them."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# proxy comparison


def random_policy(rng: np.random.Generator, min_elements: int = 2, max_elements: int = 6) -> PolicyParams:
    """A sparse policy: uniform over ops built from a random subset of elements."""
    size = int(rng.integers(min_elements, max_elements + 1))
    chosen = rng.choice(N_ELEMENTS, size=size, replace=False)
    keep = np.zeros((N_ELEMENTS, N_ELEMENTS), dtype=bool)
    keep[np.ix_(chosen, chosen)] = True
    return PolicyParams(np.where(keep.ravel(), 0.0, -12.0))


def full_training_accuracy(cfg: SearchConfig, data: SearchData, p: Optional[PolicyParams], seed: int) -> float:
    """Accuracy after training from scratch for ``n_early + n_late`` epochs under ``p``."""
    m = init_model(cfg.arch_for(data), seed)
    tcfg = replace(cfg.train, epochs=cfg.total_epochs)
    m, _ = train(m, data.train, p, tcfg, stream(seed, _STREAM_RUN, 0))
    return evaluate(m, data.val)


@dataclass
class ProxyRow:
    variant: str
    pearson_r: Optional[float]
    flag: str = ""


@dataclass
class ProxyComparison:
    rows: list
    full_scores: list
    proxy_scores: dict

    def r(self, variant: str) -> Optional[float]:
        for row in self.rows:
            if row.variant == variant:
                return row.pearson_r
        raise KeyError(variant)


def _full_job(args):
    cfg, data, p, seeds = args
    return float(np.mean([full_training_accuracy(cfg, data, p, s) for s in seeds]))


def _proxy_job(args):
    cfg, data, shared, p, variant, i = args
    rng = stream(cfg.seed, _STREAM_RUN, 1000 + i)
    acc, _ = evaluate_policy(shared, p, ProxySpec(variant), cfg, data, rng)
    return acc


def proxy_table(full: Sequence[float], proxies: dict) -> list[ProxyRow]:
    rows = []
    for name, scores in proxies.items():
        try:
            rows.append(ProxyRow(name, pearson(scores, full)))
        except ZeroVarianceError:
            rows.append(ProxyRow(name, None, "n/a: zero variance"))
    return rows


def compare_proxies(
    cfg: SearchConfig,
    data: SearchData,
    n_policies: int,
    variants: Sequence[Proxy] = tuple(Proxy),
    full_repeats: int = 1,
    workers: int = 1,
    policies: Optional[list] = None,
) -> ProxyComparison:
    """Pearson r between each proxy's accuracy and full-training accuracy.

    All variants score the same sampled policies.
    """
    if n_policies < 5:
        raise ValueError("n_policies must be >= 5")
    if policies is None:
        prng = stream(cfg.seed, _STREAM_RUN, 999)
        policies = [random_policy(prng) for _ in range(n_policies)]
    seeds = [cfg.seed * 1000 + 17 + r for r in range(full_repeats)]
    full = _parallel_map(_full_job, [(cfg, data, p, seeds) for p in policies], workers)

    variants = [Proxy(v) for v in variants]
    shared = {}
    if any(v in (Proxy.P_AF, Proxy.P_AV) for v in variants):
        shared[True] = train_shared(cfg, data, augmented=True)
    if Proxy.P_NF in variants:
        shared[False] = train_shared(cfg, data, augmented=False)
    scores = {}
    for v in variants:
        ckpt = None if v is Proxy.P_IT else shared[v is not Proxy.P_NF]
        jobs = [(cfg, data, ckpt, p, v, i) for i, p in enumerate(policies)]
        scores[v.value] = _parallel_map(_proxy_job, jobs, workers)
    return ProxyComparison(proxy_table(full, scores), full, scores)


# ---------------------------------------------------------------------------
# early vs late augmentation schedule


def placement_epochs(total: int, n_aug: int, placement: str) -> frozenset:
    if not 0 <= n_aug <= total:
        raise ValueError(f"n_aug={n_aug} outside [0, {total}]")
    if placement == "start":
        return frozenset(range(n_aug))
    if placement == "end":
        return frozenset(range(total - n_aug, total))
    raise ValueError(f"placement must be 'start' or 'end', got {placement!r}")


def run_config_hash(epochs: frozenset, policy: Optional[PolicyParams], seeds: Sequence[int], total: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"epochs": sorted(epochs), "seeds": list(seeds), "total": total}).encode())
    if policy is not None and epochs:
        h.update(policy.theta.tobytes())
        h.update(policy.mask.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ScheduleRow:
    n_aug: int
    placement: str
    mean_acc: float
    std_acc: float
    config_hash: str
    accs: list


def _schedule_job(args):
    cfg, data, policy, epochs, seed = args
    m = init_model(cfg.arch_for(data), seed)
    tcfg = replace(cfg.train, epochs=cfg.total_epochs)
    m, _ = train(m, data.train, policy if epochs else None, tcfg, stream(seed, _STREAM_RUN, 1), policy_epochs=epochs)
    return evaluate(m, data.val)


def schedule_experiment(
    cfg: SearchConfig,
    data: SearchData,
    n_aug_grid: Sequence[int],
    policy: PolicyParams,
    placements: Sequence[str] = ("start", "end"),
    seeds: Sequence[int] = range(8),
    workers: int = 1,
) -> list[ScheduleRow]:
    """Train from scratch with ``policy`` active only in the first or last ``n_aug`` epochs."""
    total = cfg.total_epochs
    seeds = [int(s) for s in seeds]
    plan = []
    for n_aug in n_aug_grid:
        for placement in placements:
            plan.append((n_aug, placement, placement_epochs(total, n_aug, placement)))
    # identical epoch sets share runs, so equivalent placements give identical numbers
    unique = {}
    for _, _, epochs in plan:
        unique.setdefault(epochs, None)
    keys = list(unique)
    jobs = [(cfg, data, policy, ep, s) for ep in keys for s in seeds]
    flat = _parallel_map(_schedule_job, jobs, workers)
    results = {ep: flat[i * len(seeds):(i + 1) * len(seeds)] for i, ep in enumerate(keys)}
    rows = []
    for n_aug, placement, epochs in plan:
        accs = results[epochs]
        rows.append(
            ScheduleRow(
                n_aug, placement, float(np.mean(accs)), float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                run_config_hash(epochs, policy, seeds, total), list(accs),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# CSV outputs


def write_records_csv(records: Sequence[SearchRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "acc", "baseline", "advantage", "entropy", "top5"])
        for r in records:
            w.writerow([r.iteration, repr(r.acc), repr(r.baseline_before), repr(r.advantage), repr(r.entropy),
                        " ".join(str(k) for k in r.top5)])


def write_marginals_csv(records: Sequence[SearchRecord], path, initial: Optional[PolicyParams] = None) -> None:
    names = [str(e) for e in augment.ELEMENTS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + names)
        if initial is not None:
            w.writerow([0] + ["%.17g" % v for v in first_element_marginal(initial)])
        for r in records:
            w.writerow([r.iteration] + ["%.17g" % v for v in r.marginal])


def write_proxy_csv(cmp: ProxyComparison, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "pearson_r", "flag"])
        for row in cmp.rows:
            w.writerow([row.variant, "n/a" if row.pearson_r is None else "%.6f" % row.pearson_r, row.flag])


def write_proxy_scores_csv(cmp: ProxyComparison, path) -> None:
    names = list(cmp.proxy_scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "full"] + names)
        for i, full in enumerate(cmp.full_scores):
            w.writerow([i, "%.6f" % full] + ["%.6f" % cmp.proxy_scores[n][i] for n in names])


def write_schedule_csv(rows: Sequence[ScheduleRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_aug", "placement", "mean_acc", "std_acc", "config_hash"])
        for r in rows:
            w.writerow([r.n_aug, r.placement, "%.6f" % r.mean_acc, "%.6f" % r.std_acc, r.config_hash])
