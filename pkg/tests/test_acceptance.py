"""Acceptance suite: one PASS/FAIL line per criterion, printed even under output capture.

Run alone with ``pytest tests/test_acceptance.py -v``.  Criteria that do not
hold are marked ``xfail(strict=True)``: they still run at full tolerance,
print FAIL, and turn the suite red if they ever start passing.
"""
import filecmp
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from awsaug import augment
from awsaug.cli import main
from awsaug.config import build_data, from_dict
from awsaug.model import evaluate, init_model, loss_and_grad, train, ModelState
from awsaug.optim import PpoBatch, surrogate, surrogate_grad
from awsaug.oracle import TrajectorySpace, closed_form_kl, finite_diff, kl_divergence, verification_suite
from awsaug.policy import (
    PolicyParams,
    count_ops,
    grad_log_prob,
    log_probs,
    probabilities,
    sample_ops,
)
from awsaug.search import compare_proxies, run_search, schedule_experiment, uniform_like

from conftest import random_images, rel_err
from test_augment import ref_autocontrast, ref_equalize, ref_invert, ref_posterize, ref_solarize


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def toy(**search):
    rc = from_dict({"search": search} if search else {}, "toy")
    return rc, build_data(rc.data)


# ---------------------------------------------------------------------------


def test_criterion_1_closed_form(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    count = 0
    for k in range(2, 6):
        for n in range(1, 5):
            for e in range(0, n + 1):
                for _ in range(3):
                    p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
                    space = TrajectorySpace(k, n, e)
                    worst = max(worst, abs(kl_divergence(space, p, q) - closed_form_kl(space, p, q)))
                    count += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 30
    report("1a", ok, f"brute-force vs closed-form KL on {count} cases: max error {worst:.2e}, {elapsed:.1f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="uniform minimizes the KL only on average over policies, not per policy")
def test_criterion_1_uniform_minimizer(report):
    t0 = time.perf_counter()
    rows = verification_suite(n_thetas=50, max_k_ops=5, max_n_steps=4, grid_resolution=10, mode="per-theta")
    per = sum(r.report.verified for r in rows)
    ens = verification_suite(n_thetas=50, max_k_ops=5, max_n_steps=4, grid_resolution=10, mode="ensemble")
    ens_ok = sum(r.report.verified for r in ens)
    elapsed = time.perf_counter() - t0
    ok = per == len(rows) and elapsed < 30
    report("1b", ok, f"uniform minimizer per policy {per}/{len(rows)} "
                     f"(min margin {min(r.report.margin for r in rows):.3g}); "
                     f"averaged over cyclic shifts {ens_ok}/{len(ens)}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    worst_policy = worst_ppo = worst_model = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 40))
        mask = rng.random(k) < 0.8
        mask[0] = True
        theta = rng.normal(0, 2, k)
        counts = np.where(mask, rng.integers(0, 6, k), 0)
        p = PolicyParams(theta, mask)
        num = finite_diff(lambda t: float((counts[mask] * log_probs(PolicyParams(t, mask))[mask]).sum()), theta.copy())
        worst_policy = max(worst_policy, rel_err(grad_log_prob(p, counts), num))

    checked, seed = 0, 0
    while checked < 100:
        rng = np.random.default_rng(10_000 + seed)
        seed += 1
        k = 8
        mask = rng.random(k) < 0.85
        mask[0] = True
        p_old = PolicyParams(rng.normal(0, 1, k), mask)
        counts = np.where(mask, rng.integers(0, 5, k), 0)
        counts[0] += 1
        p = p_old.with_theta(p_old.theta + np.where(mask, rng.normal(0, 0.15, k), 0.0))
        batch = PpoBatch.collect(p_old, counts, rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9))
        used = counts > 0
        ratio = np.exp(log_probs(p)[used] - batch.old_log_probs[used])
        if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
            continue  # central differences straddle the clip kink
        num = finite_diff(lambda t: surrogate(p.with_theta(t), batch, 0.2), p.theta.copy())
        worst_ppo = max(worst_ppo, rel_err(surrogate_grad(p, batch, 0.2), num))
        checked += 1

    for desc in ("input=5x5x2;conv3:3;relu;maxpool2;dense:3", "input=6x6x1;conv3:2;relu;conv3:2;maxpool2;dense:4"):
        for s in range(3):
            rng = np.random.default_rng(s)
            m = init_model(desc, s)
            m = ModelState(m.arch, m.params + rng.normal(0, 0.05, m.params.size))
            x = rng.normal(0, 1, (3,) + m.arch.input_shape)
            y = rng.integers(0, m.arch.n_outputs, 3)
            _, ana = loss_and_grad(m, x, y, weight_decay=1e-3)
            num = finite_diff(lambda q: loss_and_grad(ModelState(m.arch, q), x, y, 1e-3)[0], m.params.copy(), h=1e-6)
            worst_model = max(worst_model, rel_err(ana, num))
    elapsed = time.perf_counter() - t0
    ok = worst_policy < 1e-5 and worst_ppo < 1e-5 and worst_model < 1e-4 and elapsed < 60
    report(2, ok, f"log-prob {worst_policy:.1e}, surrogate {worst_ppo:.1e} (100 instances), "
                  f"backprop {worst_model:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_distribution(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        theta = rng.normal(0, rng.uniform(0.1, 8), augment.N_OPS)
        mask = rng.random(augment.N_OPS) < rng.uniform(0.05, 1.0)
        mask[rng.integers(augment.N_OPS)] = True
        worst = max(worst, abs(probabilities(PolicyParams(theta, mask)).sum() - 1.0))
    counts = count_ops(sample_ops(PolicyParams.uniform(), np.random.default_rng(2024), 1_000_000))
    pvalue = stats.chisquare(counts).pvalue
    ok = worst <= 1e-12 and pvalue > 0.001
    report(3, ok, f"max |sum p - 1| = {worst:.1e} over 1000 draws; chi-square p = {pvalue:.3f} at 10^6 draws")
    assert ok


def _rigged_evaluator(target, n):
    def ev(omega, p, spec, cfg, data, rng):
        counts = count_ops(sample_ops(p, rng, n), p.k)
        return counts[target] / n, counts

    return ev


@pytest.mark.xfail(strict=True, reason="1295 competing ops cannot be suppressed in 300 updates; see notes")
def test_criterion_4_rigged_reward(report):
    t0 = time.perf_counter()
    rc, data = toy(t_max=300)
    n = rc.search.n_late * rc.data.train_size  # ops sampled per fine-tuning run in the toy setting
    finals, first_hit = [], []
    for seed in range(5):
        hit = []

        def watch(rec, pol):
            if not hit and probabilities(pol)[7] > 0.9:
                hit.append(rec.iteration)

        theta, _ = run_search(replace(rc.search_config(), seed=seed), data, evaluator=_rigged_evaluator(7, n),
                              callback=watch)
        finals.append(probabilities(theta)[7])
        first_hit.append(hit[0] if hit else None)
    elapsed = time.perf_counter() - t0
    ok = all(f > 0.9 for f in finals) and elapsed < 120
    report(4, ok, f"p(op 7) after 300 iterations: {', '.join(f'{f:.4f}' for f in finals)} "
                  f"(uniform {1 / augment.N_OPS:.4f}); first iteration above 0.9: {first_hit}; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_end_to_end(report):
    t0 = time.perf_counter()
    rc, data = toy()
    from awsaug.data import synth_dataset

    test = synth_dataset(1000, rc.data.n_classes, rc.data.synth_size, seed=12345, noise=rc.data.synth_noise,
                         split_tag="test")
    star_val, unif_val, star_test, unif_test = [], [], [], []
    for seed in range(5):
        cfg = replace(rc.search_config(), seed=seed)
        theta, _ = run_search(cfg, data)
        tcfg = replace(cfg.train, epochs=cfg.total_epochs)
        for p, val_out, test_out in ((theta, star_val, star_test), (uniform_like(), unif_val, unif_test)):
            v, t = [], []
            for r in range(2):
                m = init_model(cfg.arch_for(data), 100 * seed + r)
                m, _ = train(m, data.train, p, tcfg, np.random.default_rng([seed, r, 7]))
                v.append(evaluate(m, data.val))
                t.append(evaluate(m, test))
            val_out.append(np.mean(v))
            test_out.append(np.mean(t))
    pval = stats.ttest_rel(star_val, unif_val, alternative="greater").pvalue
    ptest = stats.ttest_rel(star_test, unif_test, alternative="greater").pvalue
    elapsed = time.perf_counter() - t0
    ok = np.mean(star_val) > np.mean(unif_val) and pval < 0.05 and elapsed < 900
    report(5, ok, f"validation acc searched {np.mean(star_val):.4f} vs uniform {np.mean(unif_val):.4f}, "
                  f"paired one-sided p = {pval:.4f}; held-out {np.mean(star_test):.4f} vs "
                  f"{np.mean(unif_test):.4f} (p = {ptest:.4f}); {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at toy scale policy harshness dominates both scores; see notes")
def test_criterion_6_proxy_ordering(report):
    t0 = time.perf_counter()
    rc, data = toy()
    cmp = compare_proxies(rc.search_config(), data, n_policies=12)
    r = {row.variant: row.pearson_r for row in cmp.rows}
    elapsed = time.perf_counter() - t0
    ok = r["P_AF"] is not None and r["P_AV"] is not None and r["P_AF"] > r["P_AV"] and elapsed < 1800
    shown = ", ".join(f"{k} {'n/a' if v is None else f'{v:.3f}'}" for k, v in r.items())
    report(6, ok, f"pearson r over 12 policies: {shown}; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_schedule(report):
    t0 = time.perf_counter()
    rc, data = toy()
    cfg = rc.search_config()
    grid = [3, 6, 9, 12, 15, 18, 21]
    rows = schedule_experiment(cfg, data, grid, uniform_like(), seeds=range(5))
    mean = {(row.n_aug, row.placement): row.mean_acc for row in rows}
    wins = sum(mean[(n, "end")] > mean[(n, "start")] for n in grid)
    losses = sum(mean[(n, "end")] < mean[(n, "start")] for n in grid)
    pvalue = stats.binomtest(wins, wins + losses, alternative="greater").pvalue if wins + losses else 1.0
    elapsed = time.perf_counter() - t0
    ok = wins >= losses and elapsed < 1800
    pairs = " ".join(f"{n}:{mean[(n, 'start')]:.3f}/{mean[(n, 'end')]:.3f}" for n in grid)
    report(7, ok, f"end >= start at {wins} of {wins + losses} grid points (sign test p = {pvalue:.3f}); "
                  f"n_aug:start/end {pairs}; {elapsed:.0f}s")
    assert ok


def test_criterion_8_augmentation(report):
    rng = np.random.default_rng(1234)
    imgs = random_images(50, rng)
    cases = [
        (augment.invert, ref_invert, ()),
        (augment.autocontrast, ref_autocontrast, ()),
        (augment.equalize, ref_equalize, ()),
    ] + [(augment.solarize, ref_solarize, (t,)) for t in (0, 26, 102, 179, 256)] + [
        (augment.posterize, ref_posterize, (b,)) for b in range(1, 9)
    ]
    mismatches = sum(fn(img, *args).tolist() != ref(img, *args) for fn, ref, args in cases for img in imgs)
    involution = all(np.array_equal(augment.invert(augment.invert(img)), img) for img in imgs)
    identity = all(
        np.array_equal(fn(img, 1.0), img)
        for fn in (augment.color, augment.contrast, augment.brightness, augment.sharpness)
        for img in imgs
    )
    ok = mismatches == 0 and involution and identity
    report(8, ok, f"{len(cases) * len(imgs)} oracle comparisons, {mismatches} mismatches; "
                  f"invert involution {involution}; unit-factor identity {identity}")
    assert ok


@pytest.mark.slow
def test_criterion_9_reproducible_cli(report, tmp_path):
    t0 = time.perf_counter()
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["search", "--preset", "toy", "--seed", "3", "--out", str(o)]) for o in outs]
    same = {name: filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False)
            for name in ("policy.txt", "records.csv", "marginals.csv")}
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and all(same.values())
    report(9, ok, f"two toy searches, seed 3: byte-identical {same}; {elapsed:.0f}s")
    assert ok

