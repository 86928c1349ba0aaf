import math

import numpy as np
import pytest
from scipy.stats import binom

from sinai_lab._hash import derive_seed, stream_key, uniform
from sinai_lab.engine import distribution, point_prob
from sinai_lab.env import EnvSpec, make_env
from sinai_lab.landscape import Eps, xi_set
from sinai_lab.montecarlo import (
    INF,
    CouplingSetup,
    ProductConfig,
    bottom_floor,
    collision_prob_indep,
    coupling_csv,
    kochen_stone_ratio,
    localization_rate,
    plain_positions,
    run_coupling,
    same_env_meeting_sum,
    simulate_product,
    trial_env,
    walk_endpoints,
    walker_key,
)

MASK = (1 << 64) - 1


def py_mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def py_uniform(key, counter):
    return (py_mix64((key + 0x9E3779B97F4A7C15 * counter) & MASK) >> 11) / 2.0**53


def test_uniform_matches_pure_python_splitmix():
    for key in (0, 1, 2**63 + 17, int(stream_key(5, 9))):
        for c in (0, 1, 2, 10**6, 2**40):
            assert uniform(np.uint64(key), c) == py_uniform(key, c)


def test_uniform_moments():
    key = stream_key(1, 2)
    u = np.array([uniform(key, c) for c in range(20000)])
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(u.var() - 1 / 12) < 0.003


def test_derive_seed_deterministic_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(0, t, 7) for t in range(1000)}) == 1000


def test_config_validation():
    with pytest.raises(ValueError):
        ProductConfig(0, 0, 0, 10, 1)
    with pytest.raises(ValueError):
        ProductConfig(1, 2, 3, 10, 1)
    with pytest.raises(ValueError):
        ProductConfig(1, 2, 1, 10, 1, J=(2,))
    with pytest.raises(ValueError):
        ProductConfig(1, 0, 0, 10, 1, starts=(0, 0))
    cfg = ProductConfig(2, 3, 2, 10, 1, J=(2,))
    assert cfg.d == 5 and list(cfg.env_index()) == [0, 1, 1]
    assert ProductConfig(2, 0, 0, 10, 1, starts=(0, 1)).same_parity is False


def test_parity_obstruction():
    stats = simulate_product(ProductConfig(2, 0, 0, 5000, 20, starts=(0, 1)))
    assert stats.meet.sum() == 0


def test_single_srw_returns():
    N = 10**4
    stats = simulate_product(ProductConfig(1, 0, 0, N, 200, seed=3))
    n = np.arange(2, N + 1, 2)
    exact = binom.pmf(n // 2, n, 0.5).sum()
    approx = math.sqrt(2 * N / math.pi)
    mean = stats.totals("ret").mean()
    assert abs(approx / exact - 1) < 0.1
    assert abs(mean / exact - 1) < 0.1


def test_three_srw_meetings_match_convolution():
    N, T = 1000, 1000
    stats = simulate_product(ProductConfig(3, 0, 0, N, T, seed=4))
    # walkers from a common start share parity, so they can meet at every n
    p = np.array([np.sum(binom.pmf(np.arange(n + 1), n, 0.5) ** 3) for n in range(1, N + 1)])
    cum = np.cumsum(p)
    for h in (10, 100, N):
        got = stats.at([h])[:, 0]
        se = got.std(ddof=1) / math.sqrt(T)
        assert abs(got.mean() - cum[h - 1]) <= 4 * se


def test_counts_nondecreasing_and_deterministic():
    cfg = ProductConfig(1, 2, 1, 3000, 16, seed=9, starts=(0, 2, -2))
    a, b = simulate_product(cfg), simulate_product(cfg)
    assert np.array_equal(a.meet, b.meet) and np.array_equal(a.ret, b.ret)
    assert a.to_csv() == b.to_csv()
    assert np.all(np.diff(a.meet, axis=1) >= 0) and np.all(np.diff(a.ret, axis=1) >= 0)
    assert a.to_csv().splitlines()[0] == "horizon,mean_A_count,se_A,mean_return_count,se_return"


def reference_walks(cfg):
    """Pure Python product walk using the documented stream layout."""
    meet = np.zeros(cfg.trials, np.int64)
    ret = np.zeros(cfg.trials, np.int64)
    idx = cfg.env_index()
    for t in range(cfg.trials):
        envs = [trial_env(cfg.spec, cfg.seed, t, i) for i in range(cfg.I)]
        keys = [int(walker_key(cfg.seed, t, j)) for j in range(cfg.d)]
        pos = list(cfg.starts)
        for n in range(1, cfg.N + 1):
            for j in range(cfg.d):
                p = 0.5 if j < cfg.m else envs[idx[j - cfg.m]].omega_at(pos[j])
                pos[j] += 1 if py_uniform(keys[j], n) < p else -1
            meet[t] += len(set(pos)) == 1
            ret[t] += pos == list(cfg.starts)
    return meet, ret


def test_kernel_matches_reference_walker():
    cfg = ProductConfig(1, 3, 2, 400, 6, spec=EnvSpec("log_uniform", 0.7, 0.3), J=(1,), seed=11, starts=(0, 0, 2, -2))
    stats = simulate_product(cfg)
    meet, ret = reference_walks(cfg)
    assert np.array_equal(stats.totals("meet"), meet)
    assert np.array_equal(stats.totals("ret"), ret)


def test_endpoint_law_matches_exact_engine():
    env = make_env(EnvSpec(seed=2))
    n, T = 200, 20000
    keys = np.array([walker_key(77, t, 0) for t in range(T)], dtype=np.uint64)
    ends = walk_endpoints(env.spec, n, np.full(T, env.key, np.uint64), keys)
    dist = distribution(env, 0, n)
    for k in range(-30, 31, 2):
        p = dist.at(k)
        emp = np.mean(ends == k)
        assert abs(emp - p) <= 5 * math.sqrt(p * (1 - p) / T) + 1e-4


def test_kochen_stone():
    with pytest.raises(ValueError):
        kochen_stone_ratio(ProductConfig(1, 1, 1, 100, 4))
    ks = kochen_stone_ratio(ProductConfig(2, 0, 0, 200, 4, starts=(0, 1)))
    assert not ks.defined and math.isnan(ks.ratio)
    ok = kochen_stone_ratio(ProductConfig(2, 1, 1, 10**4, 200, seed=1))
    assert ok.defined and 0 < ok.ratio <= 1 and ok.se > 0


def test_localization_bookkeeping():
    spec = EnvSpec()
    est = localization_rate(spec, 1000, 60, seed=5)
    assert est.undetermined == 0 and est.used == 60
    envs = [trial_env(spec, 5, t) for t in range(60)]
    ends = walk_endpoints(spec, 1000, [e.key for e in envs], [walker_key(5, t, 0) for t in range(60)])
    outside = 0
    for env, z in zip(envs, ends):
        xi = xi_set(env, 1000)
        if int(z) in set(xi.bottoms.values()):
            assert int(z) in xi
        outside += int(z) not in xi
    assert est.outside == outside
    assert est.rate == pytest.approx(outside / 60)
    with pytest.raises(ValueError):
        localization_rate(spec, 2, 10)


def test_collision_trivial_horizons():
    spec = EnvSpec()
    est = collision_prob_indep(spec, [0], 5)
    assert np.all(est.per_env == 1.0)
    est = collision_prob_indep(spec, [1, 2], 400, seed=2)
    w = np.array([[trial_env(spec, 2, t, i).omega_at(0) for i in (0, 1)] for t in range(400)])
    exact = w[:, 0] * w[:, 1] + (1 - w[:, 0]) * (1 - w[:, 1])
    np.testing.assert_allclose(est.per_env[:, 0], exact, atol=1e-15)
    # annealed value for a law symmetric about 1/2
    assert abs(est.mean[0] - 0.5) <= 3 * est.se[0]
    assert est.to_csv().startswith("n,mean,se\n")


def test_same_env_sum_single_walker():
    env = make_env(EnvSpec(seed=1))
    N = 5000
    ms = same_env_meeting_sum(env, [0], N)
    H = np.sum(1.0 / np.arange(1, N + 1))
    assert ms.value == pytest.approx(H / math.log(N), abs=1e-8)
    with pytest.raises(ValueError):
        same_env_meeting_sum(env, [0], 1)


def test_same_env_sum_two_walkers_oracle():
    env = make_env(EnvSpec(seed=3))
    N = 300
    ms = same_env_meeting_sum(env, [0, 2], N)
    total = 0.0
    for n in range(1, N + 1):
        d1, d2 = distribution(env, 0, n), distribution(env, 2, n)
        total += sum(d1.at(k) * d2.at(k) for k in range(-n, n + 3)) / n
    assert ms.value == pytest.approx(total / math.log(N), abs=1e-9)


@pytest.fixture(scope="module")
def coupling_setup():
    N = 10**4
    for s in range(60):
        setup = CouplingSetup.build(make_env(EnvSpec(seed=s)), N, Eps())
        if setup.applicable:
            return setup
    pytest.fail("no environment passed the good-environment checks")


def test_coupling_invariants(coupling_setup):
    setup = coupling_setup
    N = setup.N
    outs = [run_coupling(setup, times=(N // 2, N), seed=1, run=i) for i in range(200)]
    x0, x2 = setup.report.valley
    for o in outs:
        assert o.applicable and o.lock_violations == 0
        assert x0 <= o.z_hat0 <= x2 and o.z_hat0 % 2 == 0
        if o.tau_meet != INF and o.tau_exit != INF:
            assert o.tau_meet < o.tau_exit
        assert set(o.hits) == {N // 2, N}
    csv = coupling_csv(outs).splitlines()
    assert len(csv) == 201 and csv[0].startswith("applicable,N,b_hat")
    again = run_coupling(setup, times=(N,), seed=1, run=3)
    assert again == run_coupling(setup, times=(N,), seed=1, run=3)


def test_coupling_marginal_matches_plain(coupling_setup):
    from sinai_lab.stats import ks_two_sample

    setup = coupling_setup
    runs = 1500
    coupled = np.array([run_coupling(setup, seed=2, run=i, approach=False).z_half for i in range(runs)])
    plain = plain_positions(setup, setup.N // 2, runs, seed=3)
    # two-sample KS critical value at level 1e-3 is about 1.95 sqrt(2 / runs)
    assert ks_two_sample(coupled, plain) <= 1.95 * math.sqrt(2 / runs)


def test_coupling_not_applicable():
    for s in range(60):
        setup = CouplingSetup.build(make_env(EnvSpec(seed=s)), 10**4, Eps())
        if not setup.applicable:
            out = run_coupling(setup)
            assert not out.applicable and out.tau_meet == INF
            assert coupling_csv([out]).splitlines()[1].startswith("0,")
            return
    pytest.fail("every environment passed")


def test_bottom_floor_vs_point_prob():
    env = make_env(EnvSpec(seed=4))
    N, b = 1500, 2
    floor, err = bottom_floor(env, N, b)
    n0 = math.ceil(N**0.9)
    ref = min(point_prob(env, 0, n, b)[0] for n in range(n0 + (n0 % 2), N + 1, 2))
    assert floor == pytest.approx(ref, abs=1e-9)
    assert err <= 1e-9
