import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from qlsd.compression import QuantizerSpec, quant_bits_batch
from qlsd.core import ConfigError, DivergenceError, Purpose, RandomStream, derive_keys, normal_block, substream
from qlsd.models import GaussianModel, grad_client, make_gaussian_dataset, make_synthetic_logistic
from qlsd.oracles import OracleKind, oracle_eval, sample_minibatch
from qlsd.sampler import (
    SamplerConfig,
    _advance,
    aggregate,
    build_context,
    canonical_algorithm,
    config_hash,
    init_state,
    participation_draw,
    qlsd_pp_step,
    qlsd_step,
    run_chain,
    write_trace_csv,
)


@pytest.fixture
def gm():
    return make_gaussian_dataset(3, 4, 6, 15, 1.0, RandomStream(4))


@pytest.fixture
def lm():
    return make_synthetic_logistic(1.0, 1.0, 4, 2, [10, 12, 9, 20], RandomStream(6))


def noise(seed, r, k, d):
    return normal_block(derive_keys(RandomStream(seed).key, Purpose.NOISE, r, k), d)


def test_aliases():
    assert canonical_algorithm("QLSD*") == "qlsd-star"
    assert canonical_algorithm("lsd++") == "lsd-pp"
    with pytest.raises(ConfigError):
        canonical_algorithm("sgd")


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(gamma=0.0),
        dict(K=0),
        dict(burn_in=10, K=10),
        dict(p=1.5),
        dict(p=[1.0, 1.0]),
        dict(algorithm="lsd-star", compressor=4),
        dict(algorithm="qlsd-pp", alpha=0.9, compressor=1),
        dict(aggregation="median"),
        dict(thinning=0),
        dict(algorithm="qlsd", oracle="svrg"),
        dict(theta0=[1.0, 2.0]),
    ],
)
def test_config_validation(gm, kwargs):
    base = dict(algorithm="qlsd-star", gamma=1e-3, K=10)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        build_context(SamplerConfig(**base), gm)


def test_participation_all_and_rate():
    root = RandomStream(1)
    assert participation_draw(np.ones(7), root).tolist() == list(range(7))
    sizes = [len(participation_draw(np.full(50, 0.25), substream(root, [t]))) for t in range(10_000)]
    assert abs(np.mean(sizes) - 12.5) < 0.5
    a = participation_draw(np.full(50, 0.5), substream(root, [3]))
    b = participation_draw(np.full(50, 0.5), substream(root, [3]))
    np.testing.assert_array_equal(a, b)


def test_noise_only_step_when_gradient_vanishes():
    # one record per client placed at theta0: the drift is exactly zero,
    # so the step is the keyed Gaussian increment alone
    m = GaussianModel([np.zeros((1, 3)), np.zeros((1, 3))])
    cfg = SamplerConfig("qlsd", 1e-2, 1, seed=5)
    ctx = build_context(cfg, m)
    st = qlsd_step(init_state(ctx), cfg, m, ctx)
    np.testing.assert_array_equal(st.theta[0], math.sqrt(2e-2) * noise(5, 0, 0, 3))


def test_ula_reduction_bit_exact(gm):
    gamma = 1e-3
    cfg = SamplerConfig("qlsd", gamma, 50, seed=9, keep_path=True)
    tr = run_chain(cfg, gm)
    theta = np.zeros(gm.d)
    for k in range(50):
        theta = theta - gamma * gm.grad(theta) + math.sqrt(2 * gamma) * noise(9, 0, k, gm.d)
        np.testing.assert_array_equal(tr.path[k + 1, 0], theta)


def test_sgld_reduction_bit_exact(lm):
    gamma = 1e-3
    n = [3, 4, 2, 5]
    cfg = SamplerConfig("qlsd-sharp", gamma, 30, batch_sizes=n, seed=2, keep_path=True)
    tr = run_chain(cfg, lm)
    root = RandomStream(2)
    kind = OracleKind("minibatch", tuple(n))
    theta = np.zeros(lm.d)
    for k in range(30):
        g = np.zeros(lm.d)
        for i in range(lm.b):
            draw = sample_minibatch(lm.sizes[i], n[i], substream(root, [Purpose.MINIBATCH, 0, k, i]))
            g = g + oracle_eval(kind, lm, i, theta, draw=draw)
        theta = theta - gamma * g + math.sqrt(2 * gamma) * noise(2, 0, k, lm.d)
        np.testing.assert_array_equal(tr.path[k + 1, 0], theta)


def test_step_functions_reject_wrong_family(gm):
    with pytest.raises(ConfigError):
        cfg = SamplerConfig("qlsd-pp", 1e-3, 5)
        qlsd_step(init_state(build_context(cfg, gm)), cfg, gm)
    with pytest.raises(ConfigError):
        cfg = SamplerConfig("qlsd-star", 1e-3, 5)
        qlsd_pp_step(init_state(build_context(cfg, gm)), cfg, gm)


def test_alpha_zero_freezes_memory(lm):
    cfg = SamplerConfig("qlsd-pp", 1e-3, 40, compressor=4, alpha=0.0, l=7, p=0.6, seed=1)
    seen = []
    run_chain(cfg, lm, callback=lambda st, info: seen.append(np.abs(st.eta).max() + np.abs(st.eta_sum).max()))
    assert max(seen) == 0.0


def test_alpha_one_tracks_local_gradients(lm):
    cfg = SamplerConfig("lsd-pp", 1e-3, 1, oracle="full", alpha=1.0, seed=3)
    ctx = build_context(cfg, lm)
    st = init_state(ctx)
    for _ in range(20):
        prev = st.theta[0].copy()
        st = qlsd_pp_step(st, cfg, lm, ctx)
        for i in range(lm.b):
            np.testing.assert_allclose(st.eta[0, i], grad_client(lm, i, prev), rtol=1e-12, atol=1e-12)


def test_frozen_theta_memory_is_geometric(lm):
    alpha = 0.3
    cfg = SamplerConfig("lsd-pp", 1e-3, 1, oracle="full", alpha=alpha, seed=3)
    ctx = build_context(cfg, lm)
    eta0 = np.arange(lm.b * lm.d, dtype=float).reshape(lm.b, lm.d)
    st = init_state(ctx, eta0)
    theta = np.array([0.2, -0.1])
    st = replace(st, theta=theta[None].copy())
    target = lm.grad_clients(theta)
    gap0 = np.linalg.norm(eta0 - target, axis=1)
    for k in range(1, 30):
        st = qlsd_pp_step(st, cfg, lm, ctx)
        st = replace(st, theta=theta[None].copy())
        gap = np.linalg.norm(st.eta[0] - target, axis=1)
        np.testing.assert_allclose(gap, (1 - alpha) ** k * gap0, rtol=1e-9)


def test_memory_sum_identity(lm):
    cfg = SamplerConfig("qlsd-pp", 1e-3, 600, compressor=2, p=0.7, l=13, seed=8, replicas=2)
    drift = []
    run_chain(cfg, lm, callback=lambda st, info: drift.append(np.abs(st.eta_sum - st.eta.sum(axis=1)).max()))
    assert max(drift) <= 1e-12


def test_participation_isolation(lm):
    base = SamplerConfig("qlsd-sharp", 1e-3, 1, compressor=4, p=[0.5, 0.5, 0.5, 0.5], seed=4)
    other = replace(base, p=[0.5, 0.5, 0.9, 0.5])
    ca, cb = build_context(base, lm), build_context(other, lm)
    sa, sb = init_state(ca), init_state(cb)
    for k in range(25):
        sa = replace(sa, k=k, theta=np.full((1, lm.d), 0.1 * k))
        sb = replace(sb, k=k, theta=sa.theta.copy())
        _, ia = _advance(ca, sa, audit=True)
        _, ib = _advance(cb, sb, audit=True)
        keep = [0, 1, 3]
        np.testing.assert_array_equal(ia.audit["participation_u"][:, keep], ib.audit["participation_u"][:, keep])
        np.testing.assert_array_equal(ia.active[:, keep], ib.active[:, keep])
        for a, b in zip(ia.audit["messages"], ib.audit["messages"]):
            np.testing.assert_array_equal(a[:, keep], b[:, keep])


def test_aggregate_rules_and_empty_set():
    dec = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    p = np.array([0.5, 0.25, 1.0])
    act = np.array([True, False, True])
    np.testing.assert_array_equal(aggregate(dec, act, p, "analytic"), [7.0, 10.0])
    np.testing.assert_array_equal(aggregate(dec, act, p, "algorithmic"), [9.0, 12.0])
    none = np.zeros(3, dtype=bool)
    np.testing.assert_array_equal(aggregate(dec, none, p, "analytic"), [0.0, 0.0])
    np.testing.assert_array_equal(aggregate(dec, none, p, "algorithmic"), [0.0, 0.0])


@pytest.mark.parametrize("rule", ["analytic", "algorithmic"])
def test_empty_active_set_is_pure_noise(gm, rule):
    cfg = SamplerConfig("qlsd", 1e-3, 1, p=1e-300, seed=12, aggregation=rule, theta0=np.ones(gm.d))
    tr = run_chain(cfg, gm)
    assert tr.active[0, 0] == 0 and tr.bits[0, 0] == 0
    np.testing.assert_array_equal(tr.final_state.theta[0], 1.0 + math.sqrt(2e-3) * noise(12, 0, 0, gm.d))


def test_bits_are_sum_of_active_message_lengths(lm):
    cfg = SamplerConfig("qlsd-star", 1e-3, 1, compressor=8, p=0.5, seed=21)
    ctx = build_context(cfg, lm)
    _, info = _advance(ctx, init_state(ctx), audit=True)
    _, _, levels = info.audit["messages"]
    want = np.where(info.active, quant_bits_batch(levels), 0).sum(axis=1)
    np.testing.assert_array_equal(info.bits, want)


def test_sample_bookkeeping(gm):
    tr = run_chain(SamplerConfig("qlsd-star", 1e-3, 11, burn_in=10), gm)
    assert tr.n_samples == 1
    tr = run_chain(SamplerConfig("qlsd-star", 1e-3, 100, burn_in=17, thinning=4), gm)
    assert tr.n_samples == math.ceil(83 / 4) == tr.samples.shape[0]
    assert tr.bit_ledger().total == int(tr.bits[:, 0].sum())
    recs = tr.records()
    assert len(recs) == 100 and recs[-1].k == 100


def test_determinism_and_replica_independence(lm):
    cfg = SamplerConfig("qlsd-pp", 1e-3, 200, compressor=4, p=0.8, l=10, seed=31, replicas=3, keep_path=True)
    a = run_chain(cfg, lm)
    b = run_chain(cfg, lm)
    np.testing.assert_array_equal(a.path, b.path)
    solo = run_chain(replace(cfg, replicas=1), lm)
    np.testing.assert_array_equal(solo.path[:, 0], a.path[:, 0])
    assert np.any(a.path[-1, 0] != a.path[-1, 1])


def test_divergence_reports_iteration(gm):
    with pytest.raises(DivergenceError) as info:
        run_chain(SamplerConfig("qlsd", 1.0, 1000), gm)
    assert 1 <= info.value.iteration < 1000


def test_control_variate_refresh_period(lm):
    cfg = SamplerConfig("qlsd-pp", 1e-3, 1, compressor=4, l=5, seed=1)
    ctx = build_context(cfg, lm)
    st = init_state(ctx)
    history = []
    for k in range(16):
        before = st.theta.copy()
        st = qlsd_pp_step(st, cfg, lm, ctx)
        history.append(before)
        np.testing.assert_array_equal(st.zeta, history[5 * (k // 5)])


def test_trace_csv(gm, tmp_path):
    tr = run_chain(SamplerConfig("qlsd-star", 1e-3, 20, burn_in=10, compressor=4), gm)
    path = tmp_path / "t.csv"
    write_trace_csv(tr, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["k", "theta_norm", "bits_uplink", "active_count"]
    assert len(rows) == 21 and rows[5][1] == "" and rows[15][1] != ""
    write_trace_csv(tr, path, components=True)
    rows = list(csv.reader(open(path)))
    assert rows[0][:2] == ["k", "theta_0"] and len(rows[0]) == 2 + gm.d + 1


def test_config_hash_stable():
    a = SamplerConfig("qlsd-star", 1e-3, 10, compressor="2^4")
    b = SamplerConfig("qlsd-star", 1e-3, 10, compressor=16)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(replace(a, seed=1))
    assert a.to_dict()["compressor"] == "s=16"
    assert QuantizerSpec.parse(a.compressor).s == 16
