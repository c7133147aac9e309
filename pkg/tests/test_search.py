import hashlib
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from awsaug.augment import N_ELEMENTS, AugmentElement, Kind, PreprocessConfig
from awsaug.model import TrainConfig, evaluate, save_checkpoint
from awsaug.policy import PolicyParams, count_ops, probabilities, sample_ops
from awsaug.search import (
    Proxy,
    ProxySpec,
    SearchConfig,
    SearchData,
    SearchRecord,
    ZeroVarianceError,
    compare_proxies,
    evaluate_policy,
    load_state,
    pearson,
    placement_epochs,
    proxy_table,
    random_policy,
    run_config_hash,
    run_search,
    schedule_experiment,
    stream,
    train_shared,
    uniform_like,
    write_marginals_csv,
    write_records_csv,
)

TINY_TRAIN = TrainConfig(batch_size=16, lr_max=0.05, preprocess=PreprocessConfig(pad=0, cutout=0))


def tiny_cfg(**kw):
    base = dict(n_early=2, n_late=1, t_max=3, train=TINY_TRAIN, seed=0, finetune_lr=0.01)
    base.update(kw)
    return SearchConfig(**base)


@pytest.fixture(scope="module")
def data(request):
    from awsaug.data import SplitSpec, split, synth_dataset

    tr, va = split(synth_dataset(120, seed=5, noise=40.0), SplitSpec(60, 60, seed=1))
    return SearchData(tr, va)


def rigged(target, n=32):
    """Stub evaluator: reward is the fraction of sampled ops equal to ``target``."""

    def ev(omega, p, spec, cfg, data, rng):
        counts = count_ops(sample_ops(p, rng, n), p.k)
        return counts[target] / n, counts

    return ev


# --- pearson -----------------------------------------------------------------


def test_pearson_examples():
    xs = np.array([0.1, 0.4, 0.2, 0.9])
    assert pearson(xs, 2 * xs + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(xs, -xs) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_pearson_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.normal(size=12), rng.normal(size=12)
        assert pearson(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)


def test_pearson_errors():
    with pytest.raises(ZeroVarianceError, match="zero variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


def test_proxy_table_identical_and_constant():
    full = [0.3, 0.5, 0.4, 0.7, 0.6]
    rows = {r.variant: r for r in proxy_table(full, {"same": list(full), "flat": [0.5] * 5})}
    assert rows["same"].pearson_r == pytest.approx(1.0)
    assert rows["flat"].pearson_r is None and rows["flat"].flag.startswith("n/a")


# --- configuration -------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        tiny_cfg(t_max=0)
    with pytest.raises(ValueError):
        tiny_cfg(n_late=0, proxy=ProxySpec("P_AF"))
    with pytest.raises(ValueError):
        ProxySpec("P_XX")
    assert Proxy.P_AV.needs_checkpoint and not Proxy.P_AV.fine_tunes
    assert not Proxy.P_IT.needs_checkpoint and Proxy.P_IT.fine_tunes


def test_stream_independence():
    a = stream(1, 2, 3).random(4)
    assert np.array_equal(a, stream(1, 2, 3).random(4))
    assert not np.array_equal(a, stream(1, 2, 4).random(4))
    assert not np.array_equal(a, stream(1, 3, 3).random(4))


# --- shared stage and proxies -----------------------------------------------------


def test_train_shared_deterministic(data):
    cfg = tiny_cfg()
    a, b = train_shared(cfg, data), train_shared(cfg, data)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_train_shared_zero_epochs_is_fresh_init(data):
    from awsaug.model import init_model

    cfg = tiny_cfg(n_early=0, proxy=ProxySpec("P_IT"))
    m = train_shared(cfg, data)
    fresh = init_model(cfg.arch_for(data), cfg.seed)
    assert all(np.array_equal(x, y) for x, y in zip(m.params, fresh.params))


def test_no_finetune_equals_checkpoint_accuracy(data):
    cfg = tiny_cfg(n_late=0, proxy=ProxySpec("P_AV"))  # a config with zero fine-tuning epochs
    shared = train_shared(cfg, data)
    acc, counts = evaluate_policy(shared, uniform_like(), ProxySpec("P_AF"), cfg, data, np.random.default_rng(0))
    assert acc == evaluate(shared, data.val)
    assert counts.sum() == 0


def test_augmented_validation_with_identity_elements(data):
    cfg = tiny_cfg()
    shared = train_shared(cfg, data)
    identity = [AugmentElement(Kind.BRIGHTNESS, 1.0, i) for i in range(N_ELEMENTS)]
    acc, counts = evaluate_policy(
        shared, uniform_like(), ProxySpec("P_AV"), cfg, data, np.random.default_rng(1), elements=identity
    )
    assert acc == evaluate(shared, data.val)
    assert counts.sum() == len(data.val)


def test_double_invert_validation_is_identity(data):
    cfg = tiny_cfg()
    shared = train_shared(cfg, data)
    theta = np.full(N_ELEMENTS * N_ELEMENTS, -30.0)
    theta[N_ELEMENTS * 35 + 35] = 30.0  # Invert then Invert
    p = PolicyParams(theta)
    acc, counts = evaluate_policy(shared, p, ProxySpec("P_AV"), cfg, data, np.random.default_rng(1))
    assert counts[N_ELEMENTS * 35 + 35] == len(data.val)
    assert acc == evaluate(shared, data.val)


def test_finetune_proxies_record_counts(data):
    cfg = tiny_cfg()
    shared = train_shared(cfg, data)
    for v in ("P_AF", "P_NF", "P_IT"):
        acc, counts = evaluate_policy(shared, uniform_like(), ProxySpec(v), cfg, data, np.random.default_rng(2))
        assert 0.0 <= acc <= 1.0
        assert counts.sum() == len(data.train) * cfg.n_late
    with pytest.raises(ValueError):
        evaluate_policy(None, uniform_like(), ProxySpec("P_AF"), cfg, data, np.random.default_rng(2))


def test_evaluate_policy_leaves_checkpoint_untouched(data, tmp_path):
    cfg = tiny_cfg()
    shared = train_shared(cfg, data)
    path = tmp_path / "omega.ckpt"
    save_checkpoint(shared, path)
    before = hashlib.sha256(path.read_bytes()).hexdigest()
    snapshot = [p.copy() for p in shared.params]
    evaluate_policy(shared, uniform_like(), ProxySpec("P_AF"), cfg, data, np.random.default_rng(3))
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, shared.params))
    save_checkpoint(shared, path)
    assert hashlib.sha256(path.read_bytes()).hexdigest() == before


def test_uniform_finetune_is_consistent_with_shared_training(data):
    # two independent uniform fine-tunes of the same checkpoint should not differ systematically
    a, b = [], []
    for seed in range(5):
        cfg = tiny_cfg(seed=seed)
        shared = train_shared(cfg, data)
        a.append(evaluate_policy(shared, uniform_like(), ProxySpec("P_AF"), cfg, data, stream(seed, 9, 0))[0])
        b.append(evaluate_policy(shared, uniform_like(), ProxySpec("P_AF"), cfg, data, stream(seed, 9, 1))[0])
    diff = np.array(a) - np.array(b)
    if np.all(diff == 0):
        return
    assert stats.ttest_rel(a, b).pvalue > 0.05


# --- search loop --------------------------------------------------------------------


def test_single_iteration(data):
    cfg = tiny_cfg(t_max=1)
    theta, recs = run_search(cfg, data, evaluator=rigged(7))
    assert len(recs) == 1
    r = recs[0]
    assert r.iteration == 1 and r.advantage == 0.0 and r.baseline_before == r.acc
    assert np.array_equal(theta.theta, uniform_like().theta)  # zero advantage, no movement


def test_advantage_moves_theta(data):
    calls = iter([0.2, 0.8])

    def ev(omega, p, spec, cfg, data, rng):
        return next(calls), count_ops(sample_ops(p, rng, 8), p.k)

    theta, recs = run_search(tiny_cfg(t_max=2), data, evaluator=ev)
    assert recs[1].baseline_before == pytest.approx(0.2)
    assert recs[1].advantage == pytest.approx(0.6)
    assert not np.array_equal(theta.theta, uniform_like().theta)


def test_baseline_replay(data):
    rng = np.random.default_rng(0)
    accs = iter(rng.uniform(0.2, 0.9, 12))

    def ev(omega, p, spec, cfg, data, r):
        return next(accs), count_ops(sample_ops(p, r, 4), p.k)

    _, recs = run_search(tiny_cfg(t_max=12), data, evaluator=ev)
    ema = None
    for r in recs:
        assert r.baseline_before == pytest.approx(r.acc if ema is None else ema, abs=1e-15)
        ema = r.acc if ema is None else 0.9 * ema + 0.1 * r.acc


def test_search_deterministic(data):
    cfg = tiny_cfg(t_max=6)
    a_theta, a = run_search(cfg, data, evaluator=rigged(3))
    b_theta, b = run_search(cfg, data, evaluator=rigged(3))
    assert np.array_equal(a_theta.theta, b_theta.theta)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_resume_matches_uninterrupted(data, tmp_path):
    cfg = tiny_cfg(t_max=8)
    full_theta, full = run_search(cfg, data, evaluator=rigged(5))
    state = tmp_path / "state.json"
    run_search(replace(cfg, t_max=3), data, evaluator=rigged(5), state_path=str(state))
    assert load_state(state).iteration == 3
    theta, recs = run_search(cfg, data, evaluator=rigged(5), state_path=str(state), resume=True)
    assert np.array_equal(theta.theta, full_theta.theta)
    assert [r.to_json() for r in recs] == [r.to_json() for r in full]


def test_record_json_round_trip(data):
    _, recs = run_search(tiny_cfg(t_max=2), data, evaluator=rigged(1))
    for r in recs:
        back = SearchRecord.from_json(r.to_json())
        assert back.to_json() == r.to_json()
        assert len(r.marginal) == N_ELEMENTS and r.marginal.sum() == pytest.approx(1.0, abs=1e-12)
        assert len(r.top5) == 5


@pytest.mark.parametrize("k", [10, 36])
def test_rigged_reward_small_space_converges(k, data):
    cfg = tiny_cfg(t_max=300)
    target = 7
    theta, recs = run_search(cfg, data, evaluator=rigged(target), initial=PolicyParams(np.zeros(k)))
    p = probabilities(theta)
    assert p[target] > 0.9
    assert int(np.argmax(p)) == target


def test_snapshots_and_csv(data, tmp_path):
    cfg = tiny_cfg(t_max=4, snapshot_every=2)
    _, recs = run_search(cfg, data, evaluator=rigged(2), snapshot_dir=str(tmp_path))
    assert [r.theta_snapshot_ref != "" for r in recs] == [False, True, False, True]
    assert (tmp_path / "policy_00004.txt").exists()
    write_records_csv(recs, tmp_path / "records.csv")
    write_marginals_csv(recs, tmp_path / "marginals.csv", initial=uniform_like())
    lines = (tmp_path / "records.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("iteration")
    m = (tmp_path / "marginals.csv").read_text().splitlines()
    assert len(m) == 6 and len(m[0].split(",")) == N_ELEMENTS + 1


# --- proxy comparison and schedule ---------------------------------------------------------


def test_random_policy_is_sparse():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = probabilities(random_policy(rng))
        support = np.flatnonzero(p > 1e-3)
        assert 4 <= len(support) <= 36
        assert np.allclose(p[support], p[support][0])


def test_compare_proxies_shapes(data):
    cfg = tiny_cfg(n_early=1, n_late=1)
    cmp = compare_proxies(cfg, data, n_policies=5)
    assert len(cmp.full_scores) == 5
    assert set(cmp.proxy_scores) == {"P_AF", "P_NF", "P_IT", "P_AV"}
    for row in cmp.rows:
        assert row.pearson_r is None or -1.0 <= row.pearson_r <= 1.0
    with pytest.raises(ValueError):
        compare_proxies(cfg, data, n_policies=4)


def test_placement_epochs():
    assert placement_epochs(10, 3, "start") == {0, 1, 2}
    assert placement_epochs(10, 3, "end") == {7, 8, 9}
    assert placement_epochs(10, 10, "start") == placement_epochs(10, 10, "end")
    with pytest.raises(ValueError):
        placement_epochs(10, 11, "end")
    with pytest.raises(ValueError):
        placement_epochs(10, 2, "middle")


def test_schedule_endpoints_share_runs(data):
    cfg = tiny_cfg(n_early=2, n_late=1)
    p = random_policy(np.random.default_rng(1))
    rows = schedule_experiment(cfg, data, [0, 3], p, seeds=[0, 1])
    by = {(r.n_aug, r.placement): r for r in rows}
    for n in (0, 3):
        assert by[(n, "start")].config_hash == by[(n, "end")].config_hash
        assert by[(n, "start")].accs == by[(n, "end")].accs
    # no augmented epochs means the policy is irrelevant
    assert run_config_hash(frozenset(), p, [0, 1], 3) == run_config_hash(frozenset(), None, [0, 1], 3)
