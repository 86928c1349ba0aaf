"""Trajectory simulation: products of simple walks and walks in random environments.

Randomness is counter based. Environment i of trial t is seeded by
``derive_seed(master, t, ENV_TAG, i)`` and walker j of trial t draws the
uniform for step n as ``uniform(key_tj, n)`` with ``key_tj`` derived from
``(master, t, WALK_TAG, j)``. Results therefore do not depend on how trials
are scheduled over threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import prange

from ._hash import COUPLING_TAG, ENV_TAG, WALK_TAG, derive_seed, stream_key, uniform
from .engine import _reflected_nu, log_checkpoints, product_meeting_series, site_series
from .env import EnvSpec, Environment, make_env, omega_from_key
from .landscape import (
    DEFAULT_ALPHA,
    DEFAULT_C2,
    DEFAULT_H_COEF,
    Eps,
    GoodEnvReport,
    LandscapeUndetermined,
    delta_checks,
    xi_set,
)

INF = -1  # marker for "did not happen within the simulated horizon"
APPROACH_CAP = 4  # the approach walk runs at most this many multiples of N


def set_workers(k: int | None) -> None:
    """Use up to ``k`` threads in the parallel kernels (None leaves the default)."""
    if k is None:
        return
    numba.set_num_threads(max(1, min(int(k), numba.config.NUMBA_NUM_THREADS)))


def env_seed(master: int, trial: int, i: int) -> int:
    return derive_seed(master, trial, ENV_TAG, i)


def walker_key(master: int, trial: int, j: int) -> np.uint64:
    return stream_key(derive_seed(master, trial, WALK_TAG, j), WALK_TAG)


def trial_env(spec: EnvSpec, master: int, trial: int, i: int = 0) -> Environment:
    """Environment i of a trial, as used by the simulation kernels."""
    return make_env(spec.with_seed(env_seed(master, trial, i)), 0)


# ---------------------------------------------------------------- product walks


@dataclass(frozen=True)
class ProductConfig:
    """m simple walks and r walks in I independent environments.

    Walkers ``I+1..r`` reuse environment ``J[j - I - 1]`` (1-based, as the
    environments are numbered ``1..I``). ``starts`` lists the m simple walkers
    first, then the r environment walkers. Starts of mixed parity are allowed;
    the walkers then never meet.
    """

    m: int
    r: int
    I: int
    N: int
    trials: int
    spec: EnvSpec = field(default_factory=EnvSpec)
    J: tuple = ()
    starts: tuple = ()
    seed: int = 0
    per_decade: int = 20

    def __post_init__(self):
        if self.m < 0 or self.r < 0 or self.m + self.r < 1:
            raise ValueError("need m, r >= 0 and m + r >= 1")
        if self.r and not 1 <= self.I <= self.r:
            raise ValueError("need 1 <= I <= r")
        if not self.r and self.I:
            raise ValueError("I must be 0 when r = 0")
        J = tuple(self.J) if self.J else (1,) * (self.r - self.I)
        if len(J) != self.r - self.I or any(not 1 <= j <= self.I for j in J):
            raise ValueError("J must map each of the r - I copied walkers to 1..I")
        object.__setattr__(self, "J", J)
        starts = tuple(self.starts) if self.starts else (0,) * self.d
        if len(starts) != self.d:
            raise ValueError("one start per walker")
        object.__setattr__(self, "starts", tuple(int(s) for s in starts))
        if self.N < 1 or self.trials < 1:
            raise ValueError("N and trials must be positive")

    @property
    def d(self) -> int:
        return self.m + self.r

    @property
    def same_parity(self) -> bool:
        return len({s & 1 for s in self.starts}) == 1

    def env_index(self) -> np.ndarray:
        """0-based environment index per environment walker."""
        return np.array(list(range(self.I)) + [j - 1 for j in self.J], dtype=np.int64)


@dataclass
class MeetingStats:
    """Cumulative counts of simultaneous meetings and of returns of Y.

    ``meet[t, c]`` counts n in ``1..checkpoints[c]`` with all walkers on one
    site; ``ret[t, c]`` counts n with every walker back at its start.
    """

    checkpoints: np.ndarray
    meet: np.ndarray
    ret: np.ndarray

    @property
    def trials(self) -> int:
        return self.meet.shape[0]

    def mean_se(self, which: str = "meet") -> tuple[np.ndarray, np.ndarray]:
        x = self.meet if which == "meet" else self.ret
        x = x.astype(float)
        se = x.std(axis=0, ddof=1) / math.sqrt(self.trials) if self.trials > 1 else np.zeros(x.shape[1])
        return x.mean(axis=0), se

    def totals(self, which: str = "meet") -> np.ndarray:
        return (self.meet if which == "meet" else self.ret)[:, -1]

    def at(self, horizons, which: str = "meet") -> np.ndarray:
        """Per-trial counts at the given horizons (each must be a checkpoint)."""
        idx = [int(np.searchsorted(self.checkpoints, h)) for h in horizons]
        for h, i in zip(horizons, idx):
            if i >= len(self.checkpoints) or self.checkpoints[i] != h:
                raise ValueError(f"{h} is not a checkpoint")
        return (self.meet if which == "meet" else self.ret)[:, idx]

    def to_csv(self) -> str:
        ma, sa = self.mean_se("meet")
        mr, sr = self.mean_se("ret")
        rows = ["horizon,mean_A_count,se_A,mean_return_count,se_return"]
        for i, n in enumerate(self.checkpoints):
            rows.append(f"{int(n)},{ma[i]:.17g},{sa[i]:.17g},{mr[i]:.17g},{sr[i]:.17g}")
        return "\n".join(rows) + "\n"


@numba.njit(cache=True, parallel=True)
def _product_kernel(N, m, law, param, env_idx, env_keys, walk_keys, starts, cps, meet, ret):
    T = walk_keys.shape[0]
    d = walk_keys.shape[1]
    for t in prange(T):
        pos = starts.copy()
        nm = 0
        nr = 0
        c = 0
        for n in range(1, N + 1):
            for j in range(d):
                u = uniform(walk_keys[t, j], n)
                if j < m:
                    p = 0.5
                else:
                    p = omega_from_key(law, param, env_keys[t, env_idx[j - m]], pos[j])
                if u < p:
                    pos[j] += 1
                else:
                    pos[j] -= 1
            same = True
            home = True
            for j in range(d):
                if pos[j] != pos[0]:
                    same = False
                if pos[j] != starts[j]:
                    home = False
            if same:
                nm += 1
            if home:
                nr += 1
            while c < len(cps) and cps[c] == n:
                meet[t, c] = nm
                ret[t, c] = nr
                c += 1


def _trial_keys(cfg: ProductConfig) -> tuple[np.ndarray, np.ndarray]:
    env_keys = np.zeros((cfg.trials, max(cfg.I, 1)), dtype=np.uint64)
    walk_keys = np.zeros((cfg.trials, cfg.d), dtype=np.uint64)
    for t in range(cfg.trials):
        for i in range(cfg.I):
            env_keys[t, i] = trial_env(cfg.spec, cfg.seed, t, i).key
        for j in range(cfg.d):
            walk_keys[t, j] = walker_key(cfg.seed, t, j)
    return env_keys, walk_keys


def simulate_product(cfg: ProductConfig, workers: int | None = None) -> MeetingStats:
    """Simulate ``cfg.trials`` independent copies of the product walk up to ``cfg.N``."""
    set_workers(workers)
    cps = log_checkpoints(cfg.N, cfg.per_decade)
    env_keys, walk_keys = _trial_keys(cfg)
    meet = np.zeros((cfg.trials, len(cps)), dtype=np.int64)
    ret = np.zeros_like(meet)
    _product_kernel(
        int(cfg.N),
        int(cfg.m),
        cfg.spec.law_code,
        float(cfg.spec.param),
        cfg.env_index() if cfg.r else np.zeros(0, np.int64),
        env_keys,
        walk_keys,
        np.array(cfg.starts, dtype=np.int64),
        cps,
        meet,
        ret,
    )
    return MeetingStats(cps, meet, ret)


@dataclass(frozen=True)
class KochenStone:
    ratio: float
    se: float
    defined: bool
    mean_count: float


def kochen_stone_ratio(cfg: ProductConfig, stats: MeetingStats | None = None, workers: int | None = None) -> KochenStone:
    """``E[X]^2 / E[X^2]`` for ``X`` the number of meetings up to N.

    This equals ``(sum P[A_n])^2 / sum_{n,m} P[A_n and A_m]``. The standard
    error comes from the delta method.
    """
    if cfg.m != 2:
        raise ValueError("the ratio is defined for m = 2 configurations")
    if stats is None:
        stats = simulate_product(cfg, workers)
    X = stats.totals("meet").astype(float)
    m1, m2 = X.mean(), (X**2).mean()
    if m2 == 0.0:
        return KochenStone(float("nan"), float("nan"), False, 0.0)
    T = len(X)
    ratio = m1**2 / m2
    # gradient of f(a, b) = a^2 / b at the sample means
    g = np.array([2 * m1 / m2, -(m1**2) / m2**2])
    cov = np.cov(np.vstack([X, X**2])) / T if T > 1 else np.zeros((2, 2))
    se = float(math.sqrt(max(g @ cov @ g, 0.0)))
    return KochenStone(float(ratio), se, True, float(m1))


# ---------------------------------------------------------------- single walks


@numba.njit(cache=True, parallel=True)
def _endpoints_kernel(n, law, param, env_keys, walk_keys, start):
    T = len(walk_keys)
    out = np.empty(T, np.int64)
    for t in prange(T):
        x = start
        key = env_keys[t]
        wk = walk_keys[t]
        for s in range(1, n + 1):
            if uniform(wk, s) < omega_from_key(law, param, key, x):
                x += 1
            else:
                x -= 1
        out[t] = x
    return out


def walk_endpoints(spec: EnvSpec, n: int, env_keys, walk_keys, start: int = 0) -> np.ndarray:
    """``Z_n`` for each (environment key, walker key) pair."""
    return _endpoints_kernel(
        int(n), spec.law_code, float(spec.param), np.asarray(env_keys, np.uint64), np.asarray(walk_keys, np.uint64), int(start)
    )


@dataclass(frozen=True)
class LocalizationEstimate:
    n: int
    rate: float
    se: float
    trials: int
    undetermined: int
    outside: int

    @property
    def used(self) -> int:
        return self.trials - self.undetermined


def localization_rate(
    spec: EnvSpec,
    n: int,
    trials: int,
    c2: float = DEFAULT_C2,
    seed: int = 0,
    h_coef: float = DEFAULT_H_COEF,
    alpha: float = DEFAULT_ALPHA,
    workers: int | None = None,
) -> LocalizationEstimate:
    """Estimate ``P[Z_n not in Xi_n]`` over environments and walks.

    Trials whose landscape cannot be certified are counted in
    ``undetermined`` and excluded from the rate.
    """
    if n < 3:
        raise ValueError("n must be at least 3")
    set_workers(workers)
    envs = [trial_env(spec, seed, t) for t in range(trials)]
    wk = np.array([walker_key(seed, t, 0) for t in range(trials)], dtype=np.uint64)
    ends = walk_endpoints(spec, n, [e.key for e in envs], wk)
    outside = 0
    undetermined = 0
    for env, z in zip(envs, ends):
        try:
            xi = xi_set(env, n, c2, h_coef, alpha)
        except LandscapeUndetermined:
            undetermined += 1
            continue
        if int(z) not in xi:
            outside += 1
    used = trials - undetermined
    rate = outside / used if used else float("nan")
    se = math.sqrt(rate * (1 - rate) / used) if used else float("nan")
    return LocalizationEstimate(n, rate, se, trials, undetermined, outside)


# ---------------------------------------------------------------- exact collision sums


@dataclass(frozen=True)
class CollisionEstimate:
    horizons: np.ndarray
    per_env: np.ndarray  # trials x horizons
    error_bound: float

    @property
    def mean(self) -> np.ndarray:
        return self.per_env.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        T = self.per_env.shape[0]
        return self.per_env.std(axis=0, ddof=1) / math.sqrt(T) if T > 1 else np.zeros(self.per_env.shape[1])

    def to_csv(self) -> str:
        rows = ["n,mean,se"]
        rows += [f"{int(n)},{m:.17g},{s:.17g}" for n, m, s in zip(self.horizons, self.mean, self.se)]
        return "\n".join(rows) + "\n"


def collision_prob_indep(spec: EnvSpec, horizons, trials: int, seed: int = 0, tol: float = 1e-9) -> CollisionEstimate:
    """``P[Z^1_n = Z^2_n]`` for two walks from 0 in independent environments.

    For each sampled pair of environments the quenched probability
    ``sum_k p1(k) p2(k)`` is exact, so the only Monte Carlo error is over
    environments. One propagation to ``max(horizons)`` serves every horizon.
    """
    hs = np.atleast_1d(np.asarray(horizons, dtype=np.int64))
    if np.any(hs < 0):
        raise ValueError("horizons must be nonnegative")
    N = int(hs.max())
    out = np.zeros((trials, len(hs)))
    err = 0.0
    for t in range(trials):
        e1, e2 = trial_env(spec, seed, t, 0), trial_env(spec, seed, t, 1)
        if N == 0:
            out[t] = 1.0
            continue
        series, leak = product_meeting_series([e1, e2], [0, 0], N, tol)
        out[t] = series[hs]
        err = max(err, 2 * leak)
    return CollisionEstimate(hs, out, err)


@dataclass(frozen=True)
class MeetingSum:
    value: float
    checkpoints: np.ndarray
    curve: np.ndarray
    error_bound: float

    def to_csv(self) -> str:
        rows = ["N,normalized_sum"]
        rows += [f"{int(n)},{v:.17g}" for n, v in zip(self.checkpoints, self.curve)]
        return "\n".join(rows) + "\n"


def same_env_meeting_sum(envs, starts, N: int, tol: float = 1e-9) -> MeetingSum:
    """``(1/log N) sum_{n<=N} (1/n) sum_k prod_j P^{y_j}[Z^j_n = k]``.

    ``envs`` is either one environment shared by all walkers or one per walker
    (for the independent-environment contrast).
    """
    starts = [int(s) for s in starts]
    if isinstance(envs, Environment):
        envs = [envs] * len(starts)
    if len(envs) != len(starts) or not starts:
        raise ValueError("need one start per walker")
    if N < 2:
        raise ValueError("N must be at least 2")
    series, leak = product_meeting_series(list(envs), starts, N, tol)
    n = np.arange(1, N + 1, dtype=float)
    cum = np.cumsum(series[1:] / n)
    cps = log_checkpoints(N, start=2)
    curve = cum[cps - 1] / np.log(cps)
    return MeetingSum(float(curve[-1]), cps, curve, len(starts) * leak * float(np.sum(1 / n)) / math.log(N))


# ---------------------------------------------------------------- coupling


@dataclass(frozen=True)
class CouplingOutcome:
    """One run of the valley coupling; ``INF`` (-1) marks events beyond the horizon."""

    applicable: bool
    N: int
    b_hat: int = 0
    valley: tuple = (0, 0)
    z_hat0: int = 0
    tau_meet: int = INF
    tau_exit: int = INF
    tau_l_minus: int = INF
    tau_l_plus: int = INF
    hits: dict = field(default_factory=dict)
    z_half: int = 0
    lock_violations: int = 0
    d1: bool | None = None
    d2: bool | None = None
    d3: bool | None = None

    def row(self) -> dict:
        return {
            "applicable": int(self.applicable),
            "N": self.N,
            "b_hat": self.b_hat,
            "x0": self.valley[0],
            "x2": self.valley[1],
            "z_hat0": self.z_hat0,
            "tau_meet": self.tau_meet,
            "tau_exit": self.tau_exit,
            "tau_l_minus": self.tau_l_minus,
            "tau_l_plus": self.tau_l_plus,
            "z_half": self.z_half,
            "lock_violations": self.lock_violations,
            "d1": _flag(self.d1),
            "d2": _flag(self.d2),
            "d3": _flag(self.d3),
        }


def _flag(v):
    return "" if v is None else int(bool(v))


@numba.njit(cache=True)
def _step(w, lo, x, u):
    return x + 1 if u < w[x - lo] else x - 1


@numba.njit(cache=True)
def _coupling_kernel(w, lo, N, b, zh0, x0, x2, key_z, key_h, times, l_minus, l_plus):
    """Run Z from b and the reflected walk from zh0 for N steps.

    Returns (tau_meet, tau_exit, tau_lm, tau_lp, z_half, violations) and fills
    ``hits`` for the requested times.
    """
    z = b
    zh = zh0
    tau_meet = 0 if z == zh else -1
    tau_exit = -1
    tau_lm = -1
    tau_lp = -1
    z_half = b
    viol = 0
    hits = np.zeros(len(times), np.int64)
    ti = 0
    while ti < len(times) and times[ti] == 0:
        hits[ti] = 1 if z == b else 0
        ti += 1
    for n in range(1, N + 1):
        u = uniform(key_z, n)
        z = _step(w, lo, z, u)
        locked = tau_meet >= 0 and tau_exit < 0
        if locked:
            if z < x0 or z > x2:
                tau_exit = n
                zh = x0 + 1 if zh == x0 else x2 - 1
            else:
                # same uniform moves both; at the ends the reflection forces the same move
                zh = z
        else:
            if zh == x0:
                zh += 1
            elif zh == x2:
                zh -= 1
            else:
                zh = _step(w, lo, zh, uniform(key_h, n))
            if tau_meet < 0 and zh == z:
                tau_meet = n
        if tau_meet >= 0 and tau_exit < 0 and zh != z:
            viol += 1
        if tau_lm < 0 and z == l_minus:
            tau_lm = n
        if tau_lp < 0 and z == l_plus:
            tau_lp = n
        if n == N // 2:
            z_half = z
        while ti < len(times) and times[ti] == n:
            hits[ti] = 1 if z == b else 0
            ti += 1
    return tau_meet, tau_exit, tau_lm, tau_lp, z_half, viol, hits


@numba.njit(cache=True)
def _approach_kernel(w, lo, y, N, b, guard, x0, x2, key, cap):
    """Walk from y: first passage to b and guard, then N steps after tau(b)."""
    z = y
    tau_b = -1
    tau_g = -1
    n = 0
    while n < cap and tau_b < 0:
        n += 1
        z = _step(w, lo, z, uniform(key, n))
        if z == b:
            tau_b = n
        if z == guard and tau_g < 0:
            tau_g = n
    if tau_b < 0:
        return tau_b, tau_g, -1
    inside = 1
    if not x0 < z < x2:
        inside = 0
    for k in range(N - 1):
        n += 1
        z = _step(w, lo, z, uniform(key, n))
        if not x0 < z < x2:
            inside = 0
            break
    return tau_b, tau_g, inside


@dataclass
class CouplingSetup:
    """Everything a coupling run needs for one environment."""

    env: Environment
    N: int
    report: GoodEnvReport
    w: np.ndarray
    lo: int
    nu_sites: np.ndarray
    nu_cdf: np.ndarray

    @classmethod
    def build(cls, env: Environment, N: int, eps: Eps, start: int = 0) -> CouplingSetup:
        rep = delta_checks(env, N, eps)
        x0, x2 = rep.valley
        # the approach phase may use up to APPROACH_CAP * N + N steps
        reach = (APPROACH_CAP + 1) * N + 2
        lo = min(start, rep.b_hat, x0) - reach
        hi = max(start, rep.b_hat, x2) + reach
        w = env.omega(lo, hi)
        sites, nu = _reflected_nu(env, x0, x2)
        cdf = np.cumsum(nu)
        cdf[-1] = 1.0
        return cls(env, N, rep, w, lo, sites, cdf)

    @property
    def applicable(self) -> bool:
        return self.report.passed


def run_coupling(
    setup: CouplingSetup,
    times=(),
    seed: int = 0,
    run: int = 0,
    start: int = 0,
    approach: bool = True,
) -> CouplingOutcome:
    """One draw of the coupling for the environment in ``setup``.

    Z starts at b_hat, the reflected walk from a draw of nu_hat. The
    approach phase (a separate walk from ``start``) measures the D events.
    """
    rep = setup.report
    N = setup.N
    if not setup.applicable:
        return CouplingOutcome(False, N)
    x0, x2 = rep.valley
    b = rep.b_hat
    base = derive_seed(seed, run, COUPLING_TAG)
    kz = stream_key(base, 1)
    kh = stream_key(base, 2)
    ka = stream_key(base, 3)
    u0 = uniform(stream_key(base, 4), 0)
    zh0 = int(setup.nu_sites[min(np.searchsorted(setup.nu_cdf, u0, side="right"), len(setup.nu_sites) - 1)])
    times = np.asarray(sorted(int(t) for t in times), dtype=np.int64)
    lm = rep.l_minus if rep.l_minus is not None else b - N - 10
    lp = rep.l_plus if rep.l_plus is not None else b + N + 10
    tm, te, tlm, tlp, zhalf, viol, hits = _coupling_kernel(
        setup.w, setup.lo, N, b, zh0, x0, x2, kz, kh, times, lm, lp
    )
    d1 = d2 = d3 = None
    if approach:
        guard = rep.guard
        tb, tg, inside = _approach_kernel(setup.w, setup.lo, start, N, b, guard, x0, x2, ka, APPROACH_CAP * N)
        if tb >= 0 or tg >= 0:
            d1 = tb >= 0 and (tg < 0 or tb < tg)
            first = min(t for t in (tb, tg) if t >= 0)
            d2 = first <= N ** (1 - rep.eps.eps1)
        else:
            d1 = None
            d2 = False
        d3 = bool(inside) if tb >= 0 else None
    return CouplingOutcome(
        True,
        N,
        b,
        (x0, x2),
        zh0,
        int(tm),
        int(te),
        int(tlm),
        int(tlp),
        {int(t): int(h) for t, h in zip(times, hits)},
        int(zhalf),
        int(viol),
        d1,
        d2,
        d3,
    )


@numba.njit(cache=True)
def _plain_kernel(w, lo, b, n, key):
    z = b
    for s in range(1, n + 1):
        z = _step(w, lo, z, uniform(key, s))
    return z


def plain_positions(setup: CouplingSetup, n: int, runs: int, seed: int = 0) -> np.ndarray:
    """``Z_n`` from b_hat in independent plain runs (streams disjoint from the coupling's)."""
    b = setup.report.b_hat
    out = np.empty(runs, np.int64)
    for i in range(runs):
        key = stream_key(derive_seed(seed, i, COUPLING_TAG, 7), 5)
        out[i] = _plain_kernel(setup.w, setup.lo, b, int(n), key)
    return out


def coupling_csv(outcomes) -> str:
    outcomes = list(outcomes)
    if not outcomes:
        return ""
    cols = list(outcomes[0].row())
    rows = [",".join(cols)]
    for o in outcomes:
        r = o.row()
        rows.append(",".join(str(r[c]) for c in cols))
    return "\n".join(rows) + "\n"


def bottom_floor(env: Environment, N: int, b_hat: int, lo_exp: float = 0.9, tol: float = 1e-9) -> tuple[float, float]:
    """Minimum over even n in ``[N^lo_exp, N]`` of ``P^0[Z_n = b_hat]`` and the error bound."""
    series, err = site_series(env, 0, b_hat, N, tol)
    n0 = int(math.ceil(N**lo_exp))
    n = np.arange(len(series))
    sel = (n >= n0) & (n % 2 == 0)
    return float(series[sel].min()), err


__all__ = [
    "CollisionEstimate",
    "CouplingOutcome",
    "CouplingSetup",
    "INF",
    "KochenStone",
    "LocalizationEstimate",
    "MeetingStats",
    "MeetingSum",
    "ProductConfig",
    "bottom_floor",
    "collision_prob_indep",
    "coupling_csv",
    "kochen_stone_ratio",
    "localization_rate",
    "plain_positions",
    "run_coupling",
    "same_env_meeting_sum",
    "simulate_product",
    "trial_env",
    "walk_endpoints",
    "walker_key",
]
