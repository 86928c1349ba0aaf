import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from sinai_lab import engine
from sinai_lab.engine import (
    ABSORBING,
    REFLECTING,
    WindowCapExceeded,
    build_chain,
    distribution,
    escape_prob,
    evolve,
    expected_exit,
    exit_time_bounds,
    first_visit_bound_check,
    first_visit_prob,
    hitting_prob,
    hitting_prob_oracle,
    hitting_tail,
    hitting_tail_bound,
    log_checkpoints,
    mu,
    point_mass,
    point_prob,
    product_meeting_series,
    reflected_nu,
    return_prob_series,
    return_probabilities,
    site_series,
)
from sinai_lab.env import EnvSpec, TabulatedEnvironment, make_env


def fair():
    return TabulatedEnvironment([0.5], lo=0, epsilon0=0.3)


def rand_env(seed, law="two_point"):
    if law == "two_point":
        return make_env(EnvSpec(seed=seed))
    return make_env(EnvSpec("log_uniform", 0.8, 0.3, seed=seed))


def enumerate_paths(env, y, n):
    """All 2^n paths from y: site sequences (one row per path) and path probabilities."""
    w = env.omega(y - n - 1, y + n + 1)
    steps = np.array(list(itertools.product((-1, 1), repeat=n)), dtype=np.int64).reshape(2**n, n)
    pos = y + np.concatenate([np.zeros((len(steps), 1), np.int64), np.cumsum(steps, axis=1)], axis=1)
    up = w[pos[:, :-1] - (y - n - 1)]
    prob = np.prod(np.where(steps == 1, up, 1 - up), axis=1)
    return pos, prob


def test_point_prob_matches_enumeration():
    for s in range(6):
        env = rand_env(s, "log_uniform" if s % 2 else "two_point")
        for n in range(0, 11):
            pos, prob = enumerate_paths(env, 3, n)
            for k in range(3 - n - 1, 3 + n + 2):
                p, err = point_prob(env, 3, n, k)
                assert abs(p - prob[pos[:, -1] == k].sum()) <= 1e-13
                assert err <= 1e-12


def test_point_prob_fair_binomial():
    env = fair()
    for n in (1, 10, 101, 500):
        for k in range(-n, n + 1, 7):
            p, _ = point_prob(env, 0, n, k)
            exact = binom.pmf((n + k) // 2, n, 0.5) if (n + k) % 2 == 0 else 0.0
            assert abs(p - exact) <= 1e-12


def test_point_prob_trivial_cases():
    env = rand_env(1)
    assert point_prob(env, 4, 0, 4) == (1.0, 0.0)
    assert point_prob(env, 4, 0, 5) == (0.0, 0.0)
    assert point_prob(env, 0, 7, 2) == (0.0, 0.0)
    assert point_prob(env, 0, 3, 5) == (0.0, 0.0)
    with pytest.raises(ValueError):
        point_prob(env, 0, 3, 1, tol=0.0)


def test_two_step_return_formula():
    env = rand_env(7, "log_uniform")
    w = {x: env.omega_at(x) for x in (-1, 0, 1)}
    p, _ = point_prob(env, 0, 2, 0)
    assert p == pytest.approx(w[0] * (1 - w[1]) + (1 - w[0]) * w[-1], abs=1e-15)


def test_window_cap(monkeypatch):
    monkeypatch.setattr(engine, "WINDOW_CAP", 64)
    with pytest.raises(WindowCapExceeded):
        distribution(fair(), 0, 5000, tol=1e-12)


def test_build_chain():
    env = rand_env(3)
    ch = build_chain(env, -5, 5, ABSORBING)
    assert np.array_equal(ch.up[1:-1], env.omega(-4, 4))
    r = build_chain(env, 0, 2, REFLECTING)
    assert r.up[0] == 1.0 and r.up[-1] == 0.0
    with pytest.raises(ValueError):
        build_chain(env, 0, 1)
    with pytest.raises(ValueError):
        build_chain(env, 0, 4, "sticky")


def test_reflecting_first_step():
    ch = build_chain(rand_env(3), 0, 2, REFLECTING)
    d = evolve(ch, point_mass(ch, 0), 1)
    assert d.at(1) == 1.0


def test_absorbed_mass_never_returns():
    ch = build_chain(rand_env(4), 0, 2, ABSORBING)
    d = evolve(ch, point_mass(ch, 1), 1)
    assert d.mass.sum() == 0.0
    assert d.leaked_left + d.leaked_right == pytest.approx(1.0)
    d2 = evolve(ch, d, 10)
    assert d2.mass.sum() == 0.0 and d2.leaked == pytest.approx(1.0)


def test_evolve_identity_and_fair_step():
    ch = build_chain(fair(), -3, 3)
    d = point_mass(ch, 0)
    assert evolve(ch, d, 0) is d
    d1 = evolve(ch, d, 1)
    assert d1.at(-1) == 0.5 and d1.at(1) == 0.5 and d1.time == 1
    with pytest.raises(ValueError):
        evolve(ch, d, -1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(3, 40), st.integers(0, 300), st.sampled_from([ABSORBING, REFLECTING]))
def test_mass_and_parity(seed, half, steps, mode):
    env = rand_env(seed, "log_uniform")
    ch = build_chain(env, -half, half, mode)
    d = evolve(ch, point_mass(ch, 1), steps)
    assert abs(d.total() - 1.0) <= 1e-12
    sites = np.arange(d.lo, d.hi + 1)
    wrong = sites % 2 != d.site_parity
    assert np.all(d.mass[wrong] == 0.0)


def test_hitting_closed_form_vs_oracle():
    rng = np.random.default_rng(5)
    for i in range(100):
        env = rand_env(int(rng.integers(2**32)), "log_uniform" if i % 2 else "two_point")
        a = int(rng.integers(-200, 200))
        b = a + int(rng.integers(1, 100))
        c = b + int(rng.integers(1, 100))
        p, q = hitting_prob(env, a, b, c), hitting_prob_oracle(env, a, b, c)
        assert abs(p - q) <= 1e-10 * q


def test_hitting_special_cases():
    assert hitting_prob(fair(), -3, 2, 7) == pytest.approx(0.5)
    assert hitting_prob_oracle(fair(), 0, 3, 10) == pytest.approx(0.3)
    env = rand_env(2)
    assert hitting_prob(env, 0, 1, 2) == pytest.approx(env.omega_at(1), abs=1e-15)
    u = [hitting_prob_oracle(env, 0, b, 30) for b in range(1, 30)]
    assert np.all(np.diff(u) > 0)
    with pytest.raises(ValueError):
        hitting_prob(env, 0, 0, 2)


def test_expected_exit():
    env = rand_env(8)
    assert expected_exit(env, 0, 1, 2) == pytest.approx(1.0)
    assert expected_exit(fair(), 0, 3, 10) == pytest.approx(21.0)


def test_exit_time_bounds_random():
    rng = np.random.default_rng(6)
    for i in range(100):
        env = rand_env(int(rng.integers(2**32)), "log_uniform" if i % 2 else "two_point")
        a = int(rng.integers(-100, 100))
        b = a + int(rng.integers(1, 60))
        c = b + int(rng.integers(1, 60))
        m = expected_exit(env, a, b, c)
        b1, b2 = exit_time_bounds(env, a, b, c)
        assert m <= b1 and m <= b2


def tail_by_enumeration(env, b, target, k):
    pos, prob = enumerate_paths(env, b, k - 1)
    hit = np.any(pos[:, 1:] == target, axis=1) if k > 1 else np.zeros(len(pos), bool)
    return prob[hit].sum()


def test_hitting_tail_vs_enumeration():
    env = rand_env(11, "log_uniform")
    for b, t in ((0, 3), (0, -2), (5, 6), (-1, -4)):
        for k in range(1, 13):
            assert hitting_tail(env, b, t, k) == pytest.approx(tail_by_enumeration(env, b, t, k), abs=1e-14)


def test_hitting_tail_trivial():
    env = rand_env(1)
    assert hitting_tail(env, 0, 3, 1) == 0.0
    assert hitting_tail(env, 0, 3, 3) == 0.0
    assert hitting_tail(env, 0, -3, 2) == 0.0
    with pytest.raises(ValueError):
        hitting_tail(env, 0, 0, 4)


def test_hitting_tail_bounds_random():
    rng = np.random.default_rng(7)
    for i in range(100):
        env = rand_env(int(rng.integers(2**32)), "log_uniform" if i % 2 else "two_point")
        b = int(rng.integers(-50, 50))
        d = int(rng.integers(1, 30))
        k = int(rng.integers(1, 400))
        for t in (b + d, b - d):
            assert hitting_tail(env, b, t, k) <= hitting_tail_bound(env, b, t, k)


def first_visit_by_enumeration(env, a, b, k):
    pos, prob = enumerate_paths(env, b, k)
    first = (pos[:, -1] == a) & ~np.any(pos[:, 1:-1] == a, axis=1)
    return prob[first].sum()


def test_first_visit_vs_enumeration():
    env = rand_env(13, "log_uniform")
    for a, b in ((2, 0), (-3, 0), (1, 0)):
        for k in range(1, 12):
            assert first_visit_prob(env, a, b, k) == pytest.approx(first_visit_by_enumeration(env, a, b, k), abs=1e-14)


def test_escape_prob_vs_oracle():
    for s in range(10):
        env = rand_env(s, "log_uniform")
        for a, b in ((-7, 0), (0, -7), (3, 10), (12, 10)):
            if a < b:
                # step down, then reach a before climbing back to b
                ref = (1 - env.omega_at(b)) * (1 - hitting_prob_oracle(env, a, b - 1, b))
            else:
                ref = env.omega_at(b) * hitting_prob_oracle(env, b, b + 1, a)
            assert escape_prob(env, a, b) == pytest.approx(ref, rel=1e-12)


def test_first_visit_bound():
    env = fair()
    assert first_visit_prob(env, 1, 0, 1) == pytest.approx(0.5)
    assert escape_prob(env, 1, 0) == pytest.approx(0.5)
    assert first_visit_bound_check(env, 1, 0, 1)
    assert first_visit_prob(rand_env(1), 5, 0, 3) == 0.0
    rng = np.random.default_rng(8)
    for i in range(100):
        env = rand_env(int(rng.integers(2**32)), "log_uniform" if i % 2 else "two_point")
        b = int(rng.integers(-30, 30))
        a = b + int(rng.choice([-1, 1])) * int(rng.integers(1, 15))
        assert first_visit_bound_check(env, a, b, int(rng.integers(1, 200)))


def test_mu_fair_and_detailed_balance():
    assert mu(fair(), 5) == pytest.approx(2.0)
    env = rand_env(9, "log_uniform")
    for x in range(-20, 20):
        lhs = mu(env, x) * env.omega_at(x)
        rhs = mu(env, x + 1) * (1 - env.omega_at(x + 1))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def reflected_mu(env, x0, x2):
    V = env.potential_range(x0 - 1, x2)
    m = np.exp(-V[1:]) + np.exp(-V[:-1])
    m[0], m[-1] = np.exp(-V[1]), np.exp(-V[-2])
    return m


def test_reversibility_reflecting():
    env = rand_env(10, "log_uniform")
    x0, x2 = -6, 8
    ch = build_chain(env, x0, x2, REFLECTING)
    m = reflected_mu(env, x0, x2)
    sites = range(x0, x2 + 1)
    for k in (1, 2, 7, 50, 200):
        T = np.array([evolve(ch, point_mass(ch, b), k).mass for b in sites])
        lhs = T * m[:, None]
        assert np.max(np.abs(lhs - lhs.T)) <= 1e-12


def test_reflected_nu_two_sites():
    env = rand_env(12, "log_uniform")
    sites, nu = reflected_nu(env, 0, 2)
    w1 = env.omega_at(1)
    assert list(sites) == [0, 2]
    assert nu == pytest.approx([1 - w1, w1], abs=1e-15)
    _, nu_f = reflected_nu(fair(), 0, 2)
    assert nu_f == pytest.approx([0.5, 0.5])
    with pytest.raises(ValueError):
        reflected_nu(env, 1, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(-20, 0), st.integers(1, 30))
def test_reflected_nu_stationary(seed, a, half):
    x0, x2 = 2 * a, 2 * a + 2 * half
    env = rand_env(seed, "log_uniform")
    sites, nu = reflected_nu(env, x0, x2)
    assert nu.sum() == pytest.approx(1.0, abs=1e-14)
    ch = build_chain(env, x0, x2, REFLECTING)
    mass = np.zeros(ch.width)
    mass[sites - x0] = nu
    d = evolve(ch, engine.DistVector(x0, mass), 2)
    assert np.abs(d.mass[sites - x0] - nu).sum() <= 1e-12


def test_return_series_small_n():
    env = rand_env(3)
    p2, _ = point_prob(env, 0, 2, 0)
    c = return_prob_series(env, 2, 1.0)
    assert c.partial_sums[-1] == pytest.approx(p2 / 2, abs=1e-15)
    with pytest.raises(ValueError):
        return_prob_series(env, 10, 1.5)


def test_return_series_fair_closed_form():
    N = 2000
    c = return_prob_series(fair(), N, 1.0)
    n = np.arange(2, N + 1, 2)
    exact = np.cumsum(binom.pmf(n // 2, n, 0.5) / n)
    got = dict(zip(c.checkpoints.tolist(), c.partial_sums))
    for cp, v in got.items():
        if cp >= 2:
            assert v == pytest.approx(exact[cp // 2 - 1], abs=1e-9)


def test_series_match_point_prob():
    env = rand_env(4, "log_uniform")
    probs, leak = return_probabilities(env, 300)
    assert leak <= 1e-9
    for n in (0, 1, 2, 50, 300):
        assert probs[n] == pytest.approx(point_prob(env, 0, n, 0)[0], abs=1e-9)
    s, _ = site_series(env, 3, -5, 200)
    for n in (8, 9, 100, 200):
        assert s[n] == pytest.approx(point_prob(env, 3, n, -5)[0], abs=1e-9)


def test_log_checkpoints():
    cp = log_checkpoints(10**4, per_decade=10)
    assert cp[0] == 1 and cp[-1] == 10**4
    assert np.all(np.diff(cp) > 0)
    assert list(log_checkpoints(1)) == [1]


def test_series_csv():
    lines = return_prob_series(fair(), 100, 0.5).to_csv().splitlines()
    assert lines[0] == "n,partial_sum"


def test_product_series_vs_distributions():
    envs = [rand_env(20), rand_env(21, "log_uniform"), rand_env(22)]
    starts = [0, 2, -2]
    N = 60
    series, leak = product_meeting_series(envs, starts, N)
    assert leak <= 1e-9
    for n in (0, 1, 2, 10, 60):
        dists = [distribution(e, y, n) for e, y in zip(envs, starts)]
        ref = sum(np.prod([d.at(k) for d in dists]) for k in range(-n - 2, n + 3))
        assert series[n] == pytest.approx(ref, abs=1e-12)
