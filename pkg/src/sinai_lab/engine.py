"""Exact quenched computations for one walk in a fixed environment.

Distributions are propagated on finite windows of sites. In absorbing mode the
two end sites swallow whatever reaches them and the swallowed mass is kept as
``leaked``; it bounds the error made by truncating Z to the window. In
reflecting mode the left end always steps right and the right end always steps
left, which is the reflected walk used for couplings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np
from scipy.special import logsumexp

from .env import Environment

ABSORBING = "absorbing"
REFLECTING = "reflecting"

WINDOW_CAP = 1 << 20
_TINY = 1e-280


class WindowCapExceeded(RuntimeError):
    """Leakage stayed above tolerance up to the maximum window width."""


@dataclass(frozen=True)
class WindowChain:
    """Birth-death chain on sites ``lo..hi`` with per-site up-probabilities."""

    lo: int
    hi: int
    up: np.ndarray
    mode: str = ABSORBING

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    def index(self, x: int) -> int:
        if not self.lo <= x <= self.hi:
            raise ValueError(f"site {x} outside window [{self.lo}, {self.hi}]")
        return x - self.lo


@dataclass(frozen=True)
class DistVector:
    """Mass per window site, mass absorbed at either end, and elapsed steps."""

    lo: int
    mass: np.ndarray
    leaked_left: float = 0.0
    leaked_right: float = 0.0
    time: int = 0
    parity: int = 0
    truncated: float = 0.0

    @property
    def leaked(self) -> float:
        """Mass no longer in the window (absorbed, or dropped below 1e-280)."""
        return self.leaked_left + self.leaked_right + self.truncated

    @property
    def site_parity(self) -> int:
        """Parity of every site that can carry mass at the current time."""
        return (self.parity + self.time) % 2

    @property
    def hi(self) -> int:
        return self.lo + len(self.mass) - 1

    def at(self, x: int) -> float:
        i = x - self.lo
        if 0 <= i < len(self.mass):
            return float(self.mass[i])
        return 0.0

    def total(self) -> float:
        return float(self.mass.sum()) + self.leaked


def build_chain(env: Environment, a: int, b: int, mode: str = ABSORBING) -> WindowChain:
    """Chain on ``[a, b]``; interior up-probabilities are the environment's."""
    if b - a < 2:
        raise ValueError("window must contain at least 3 sites")
    if mode not in (ABSORBING, REFLECTING):
        raise ValueError(f"unknown boundary mode {mode!r}")
    up = env.omega(a, b).copy()
    if mode == REFLECTING:
        up[0] = 1.0
        up[-1] = 0.0
    return WindowChain(a, b, up, mode)


def point_mass(chain: WindowChain, x: int) -> DistVector:
    m = np.zeros(chain.width)
    m[chain.index(x)] = 1.0
    return DistVector(chain.lo, m, parity=x & 1)


@numba.njit(cache=True)
def _step_all(P, U, steps, absorbing, rec, out, leak, abort=np.inf):
    """Advance every row of P by ``steps`` steps in place; return steps done.

    Stops early once some row has leaked more than ``abort``.

    ``rec`` selects what is written to ``out[t]`` after step t (t = 1..steps):
    0 nothing, 1 sum_k prod_rows P[:, k], 2 P[0, rec_site] with rec_site
    stored in out[0] on entry.
    """
    r, W = P.shape
    done = 0
    # padded buffers: index i + 1 holds site i, so the gather needs no branches
    A = np.zeros((r, W + 2))
    B = np.zeros((r, W + 2))
    up = np.zeros((r, W + 2))
    dn = np.zeros((r, W + 2))
    los = np.empty(r, np.int64)
    his = np.empty(r, np.int64)
    for j in range(r):
        los[j] = W
        his[j] = -1
        for i in range(W):
            A[j, i + 1] = P[j, i]
            up[j, i + 1] = U[j, i]
            dn[j, i + 1] = 1.0 - U[j, i]
            if P[j, i] != 0.0:
                los[j] = min(los[j], i)
                his[j] = i
    site = np.int64(out[0]) + 1 if rec == 2 else 0
    # parity of the padded index of occupied cells; stride 2 skips the empty ones
    par = (los[0] + 1) % 2 if his[0] >= los[0] else 0
    stride = 2
    for j in range(r):
        for i in range(W):
            if P[j, i] != 0.0 and (i + 1) % 2 != par:
                stride = 1
    trim = _TINY
    if abort < np.inf and steps > 0:
        trim = max(_TINY, 1e-3 * abort / steps)
    for t in range(1, steps + 1):
        par = 1 - par
        for j in range(r):
            lo = los[j]
            hi = his[j]
            if hi < lo:
                continue
            a = max(lo - 1, 0) + 1
            b = min(hi + 1, W - 1) + 1
            src = A[j]
            dst = B[j]
            u = up[j]
            d = dn[j]
            if stride == 2:
                if a % 2 != par:
                    a += 1
                if b % 2 != par:
                    b -= 1
            for i in range(a, b + 1, stride):
                dst[i] = src[i - 1] * u[i - 1] + src[i + 1] * d[i + 1]
            if absorbing:
                leak[j, 0] += dst[1]
                leak[j, 1] += dst[W]
                dst[1] = 0.0
                dst[W] = 0.0
            # drop subnormal tails (they stall the FPU); their mass is bounded in leak[:, 2]
            while a < b and dst[a] < trim:
                leak[j, 2] += dst[a]
                dst[a] = 0.0
                a += 1
            while b > a and dst[b] < trim:
                leak[j, 2] += dst[b]
                dst[b] = 0.0
                b -= 1
            los[j] = a - 1
            his[j] = b - 1
        A, B = B, A
        done = t
        stop = False
        for j in range(r):
            if leak[j, 0] + leak[j, 1] + leak[j, 2] > abort:
                stop = True
        if rec == 1:
            lo = los[0]
            hi = his[0]
            for j in range(1, r):
                lo = max(lo, los[j])
                hi = min(hi, his[j])
            s = 0.0
            for i in range(lo + 1, hi + 2):
                p = A[0, i]
                for j in range(1, r):
                    p *= A[j, i]
                s += p
            out[t] = s
        elif rec == 2:
            out[t] = A[0, site]
        if stop:
            break
    for j in range(r):
        for i in range(W):
            P[j, i] = A[j, i + 1]
    return done


def evolve(chain: WindowChain, dist: DistVector, steps: int) -> DistVector:
    """Push ``dist`` forward ``steps`` steps (O(width) per step)."""
    if dist.lo != chain.lo or len(dist.mass) != chain.width:
        raise ValueError("distribution and chain windows differ")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return dist
    P = dist.mass.reshape(1, -1).copy()
    leak = np.zeros((1, 3))
    _step_all(P, chain.up.reshape(1, -1), int(steps), chain.mode == ABSORBING, 0, np.zeros(1), leak)
    return replace(
        dist,
        mass=P[0],
        leaked_left=dist.leaked_left + leak[0, 0],
        leaked_right=dist.leaked_right + leak[0, 1],
        truncated=dist.truncated + leak[0, 2],
        time=dist.time + steps,
    )


def _initial_half_width(n: int) -> int:
    return int(2 * math.log(max(n, 2)) ** 2) + 8


def _run_window(env, start, n, half_left, half_right, rec, rec_site=0, abort=np.inf):
    """Absorbing window [start - half_left, start + half_right]; returns (dist, out, leak)."""
    lo, hi = start - half_left, start + half_right
    chain = build_chain(env, lo, hi, ABSORBING)
    P = np.zeros((1, chain.width))
    P[0, start - lo] = 1.0
    out = np.zeros(n + 1)
    if rec == 2:
        out[0] = rec_site - lo
    leak = np.zeros((1, 3))
    done = _step_all(P, chain.up.reshape(1, -1), int(n), True, rec, out, leak, float(abort))
    if rec == 2:
        out[0] = 1.0 if rec_site == start else 0.0
    return DistVector(lo, P[0], leak[0, 0], leak[0, 1], done, start & 1, leak[0, 2]), out


def distribution(env: Environment, y: int, n: int, tol: float = 1e-12) -> DistVector:
    """Law of Z_n under P^y on a window grown until the leaked mass is at most tol."""
    half = _initial_half_width(n)
    while True:
        h = min(half, n + 1)
        dist, _ = _run_window(env, y, n, h, h, 0, abort=tol)
        if dist.leaked <= tol:
            return dist
        if 2 * half + 1 > WINDOW_CAP:
            raise WindowCapExceeded(f"leakage {dist.leaked:.3g} > {tol} at width {2 * half + 1}")
        half *= 2


def point_prob(env: Environment, y: int, n: int, k: int, tol: float = 1e-12) -> tuple[float, float]:
    """``P_omega^y[Z_n = k]`` and a bound on the truncation error."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if n == 0:
        return (1.0 if y == k else 0.0), 0.0
    if (n + y + k) % 2 or abs(k - y) > n:
        return 0.0, 0.0
    dist = distribution(env, y, n, tol)
    return dist.at(k), dist.leaked


def _logsum_v(env, lo, hi):
    return float(logsumexp(env.potential_range(lo, hi)))


def hitting_prob(env: Environment, a: int, b: int, c: int) -> float:
    """``P^b[tau(c) < tau(a)]`` from the potential, evaluated in log space."""
    if not a < b < c:
        raise ValueError("need a < b < c")
    V = env.potential_range(a, c - 1)
    return float(math.exp(logsumexp(V[: b - a]) - logsumexp(V)))


@numba.njit(cache=True)
def _gth_solve(w, rhs, u_c):
    """Tridiagonal elimination for ``u(x) - w_x u(x+1) - (1 - w_x) u(x-1) = rhs_x``.

    Boundary values are u(a) = 0 and u(c) = u_c. The pivot of each reduced row
    is formed as ``w_x + s_x`` where ``s_x`` is the mass that row sends to
    ``a``; every operation then acts on nonnegative numbers, which keeps small
    solution components accurate to relative precision.
    """
    n = len(w)
    d = np.empty(n)
    g = np.empty(n)
    s = 1.0 - w[0]
    d[0] = w[0] + s
    g[0] = rhs[0]
    for i in range(1, n):
        q = (1.0 - w[i]) / d[i - 1]
        s = q * s
        d[i] = w[i] + s
        g[i] = rhs[i] + q * g[i - 1]
    u = np.empty(n)
    nxt = u_c
    for i in range(n - 1, -1, -1):
        nxt = (g[i] + w[i] * nxt) / d[i]
        u[i] = nxt
    return u


def _tridiag_solve(env, a, c, rhs_interior, u_c):
    """Solve u(x) - w_x u(x+1) - (1 - w_x) u(x-1) = rhs(x) on a < x < c, u(a)=0, u(c)=u_c."""
    w = np.ascontiguousarray(env.omega(a + 1, c - 1), dtype=float)
    rhs = float(rhs_interior) * np.ones(len(w))
    return _gth_solve(w, rhs, float(u_c))


def hitting_prob_oracle(env: Environment, a: int, b: int, c: int) -> float:
    """``P^b[tau(c) < tau(a)]`` by solving the first-step equations directly."""
    if not a < b < c:
        raise ValueError("need a < b < c")
    u = _tridiag_solve(env, a, c, 0.0, 1.0)
    return float(u[b - a - 1])


def expected_exit(env: Environment, a: int, b: int, c: int) -> float:
    """``E^b[tau(a) ^ tau(c)]`` from the first-step equations."""
    if not a < b < c:
        raise ValueError("need a < b < c")
    m = _tridiag_solve(env, a, c, 1.0, 0.0)
    return float(m[b - a - 1])


def exit_time_bounds(env: Environment, a: int, b: int, c: int) -> tuple[float, float]:
    """Right-hand sides of the two exit-time bounds for ``a < b < c``.

    ``eps0^-1 (c-a)^2 exp(max V(k) - V(l))`` over ``a <= l <= k <= c-1`` with
    ``k >= b`` (first) and ``exp(max V(l) - V(k))`` with ``l <= b-1`` (second).
    """
    V = env.potential_range(a, c - 1)
    pref = (c - a) ** 2 / env.spec.epsilon0
    run_min = np.minimum.accumulate(V)
    up = np.max(V[b - a :] - run_min[b - a :])
    # l <= b-1 and l <= k: max over k >= l of V(l) - V(k)
    suf_min = np.minimum.accumulate(V[::-1])[::-1]
    down = np.max(V[: b - a] - suf_min[: b - a])
    return pref * math.exp(up), pref * math.exp(down)


def hitting_tail(env: Environment, b: int, target: int, k: int) -> float:
    """``P^b[tau(target) < k]``, exact.

    The walk is absorbed at ``target``; a second absorbing wall sits on the
    other side at a distance it cannot reach in ``k - 1`` steps.
    """
    if b == target:
        raise ValueError("b must differ from target")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = abs(target - b)
    if k <= d:
        return 0.0
    far = max(4 * d, k)
    if target > b:
        dist, _ = _run_window(env, b, k - 1, far, d, 0)
        return float(dist.leaked_right)
    dist, _ = _run_window(env, b, k - 1, d, far, 0)
    return float(dist.leaked_left)


def hitting_tail_bound(env: Environment, b: int, target: int, k: int) -> float:
    """Upper bound ``k exp(min V - V(edge))`` for ``P^b[tau(target) < k]``."""
    if target > b:
        V = env.potential_range(b, target - 1)
        return k * math.exp(V.min() - V[-1])
    V = env.potential_range(target, b - 1)
    return k * math.exp(V.min() - V[0])


def first_visit_prob(env: Environment, a: int, b: int, k: int) -> float:
    """``P^b[tau(a) = k]`` (first passage exactly at step k)."""
    if a == b:
        raise ValueError("a must differ from b")
    if k < abs(a - b):
        return 0.0
    d = abs(a - b)
    far = k + 1
    if a > b:
        _, lk = _leak_series(env, b, k, far, d, right=True)
    else:
        _, lk = _leak_series(env, b, k, d, far, right=False)
    return float(lk[k] - lk[k - 1])


def _leak_series(env, start, n, half_left, half_right, right):
    lo, hi = start - half_left, start + half_right
    chain = build_chain(env, lo, hi, ABSORBING)
    P = np.zeros((1, chain.width))
    P[0, start - lo] = 1.0
    leak = np.zeros((1, 3))
    series = np.zeros(n + 1)
    up = chain.up.reshape(1, -1)
    for t in range(1, n + 1):
        _step_all(P, up, 1, True, 0, np.zeros(1), leak)
        series[t] = leak[0, 1] if right else leak[0, 0]
    return P, series


def escape_prob(env: Environment, a: int, b: int) -> float:
    """``P^b[tau(a) < tau(b)]`` where ``tau(b)`` is the return time to b."""
    if a == b:
        raise ValueError("a must differ from b")
    if a < b:
        V = env.potential_range(a, b - 1)
        return (1.0 - env.omega_at(b)) * math.exp(V[-1] - logsumexp(V))
    V = env.potential_range(b, a - 1)
    return env.omega_at(b) * math.exp(V[0] - logsumexp(V))


def first_visit_bound_check(env: Environment, a: int, b: int, k: int) -> bool:
    """Whether ``P^b[tau(a) = k] <= P^b[tau(a) < tau(b)]`` holds."""
    lhs = first_visit_prob(env, a, b, k)
    rhs = escape_prob(env, a, b)
    return lhs <= rhs * (1 + 1e-12)


def mu(env: Environment, x: int) -> float:
    """Reversible measure ``exp(-V(x)) + exp(-V(x-1))``."""
    V = env.potential_range(x - 1, x)
    return float(math.exp(-V[1]) + math.exp(-V[0]))


def reflected_log_mu(env: Environment, x0: int, x2: int) -> np.ndarray:
    """log of the reflected reversible measure on ``[x0, x2]``.

    Interior sites carry ``exp(-V(x)) + exp(-V(x-1))``; the ends carry
    ``exp(-V(x0))`` and ``exp(-V(x2 - 1))``.
    """
    V = env.potential_range(x0 - 1, x2)
    out = np.logaddexp(-V[1:], -V[:-1])
    out[0] = -V[1]
    out[-1] = -V[-2]
    return out


def reflected_nu(env: Environment, x0: int, x2: int) -> tuple[np.ndarray, np.ndarray]:
    """Invariant law of the two-step reflected chain on the even sites of ``[x0, x2]``."""
    if x0 % 2 or x2 % 2:
        raise ValueError("endpoints must be even")
    if not x0 < x2:
        raise ValueError("need x0 < x2")
    return _reflected_nu(env, x0, x2)


def _reflected_nu(env, x0, x2):
    lm = reflected_log_mu(env, x0, x2)
    sites = np.arange(x0, x2 + 1)
    even = sites % 2 == 0
    le = lm[even]
    p = np.exp(le - logsumexp(le))
    return sites[even], p


def return_probabilities(env: Environment, N: int, tol: float = 1e-9, start: int = 0) -> tuple[np.ndarray, float]:
    """``P^start[Z_n = start]`` for n = 0..N and the leaked mass bounding the error."""
    return site_series(env, start, start, N, tol)


def site_series(env: Environment, y: int, k: int, N: int, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """``P^y[Z_n = k]`` for n = 0..N from one absorbing evolution."""
    half = max(_initial_half_width(N), abs(k - y) + 2)
    while True:
        h = min(half, N + 1 + abs(k - y))
        dist, out = _run_window(env, y, N, h, h, 2, rec_site=k, abort=tol)
        if dist.leaked <= tol:
            return out, dist.leaked
        if 2 * half + 1 > WINDOW_CAP:
            raise WindowCapExceeded(f"leakage {dist.leaked:.3g} > {tol} at width {2 * half + 1}")
        half *= 2


def log_checkpoints(N: int, per_decade: int = 20, start: int = 1) -> np.ndarray:
    """Integer horizons log-spaced from ``start`` to ``N`` inclusive."""
    if N < start:
        return np.array([], dtype=np.int64)
    decades = math.log10(N / start) if N > start else 0.0
    k = max(int(math.ceil(decades * per_decade)), 1)
    pts = np.unique(np.round(start * 10 ** (np.arange(k + 1) * decades / k)).astype(np.int64))
    pts = pts[(pts >= start) & (pts <= N)]
    if pts[-1] != N:
        pts = np.append(pts, N)
    return pts


@dataclass(frozen=True)
class SeriesCurve:
    checkpoints: np.ndarray
    partial_sums: np.ndarray
    error_bound: float

    def to_csv(self) -> str:
        rows = ["n,partial_sum"]
        rows += [f"{int(n)},{s:.17g}" for n, s in zip(self.checkpoints, self.partial_sums)]
        return "\n".join(rows) + "\n"


def return_prob_series(
    env: Environment, N: int, theta: float, tol: float = 1e-9, probs: np.ndarray | None = None
) -> SeriesCurve:
    """Partial sums of ``P^0[Z_n = 0] / n^theta`` at log-spaced checkpoints up to N."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    err = 0.0
    if probs is None:
        probs, err = return_probabilities(env, N, tol)
    n = np.arange(1, N + 1, dtype=float)
    terms = probs[1 : N + 1] / n**theta
    cum = np.cumsum(terms)
    cps = log_checkpoints(N)
    return SeriesCurve(cps, cum[cps - 1], err * float(np.sum(1.0 / n**theta)))


def product_meeting_series(
    envs: list[Environment], starts: list[int], N: int, tol: float = 1e-9
) -> tuple[np.ndarray, float]:
    """``sum_k prod_j P_j^{y_j}[Z_n = k]`` for n = 0..N, walker j in ``envs[j]``.

    Returns the series and the largest leaked mass over walkers.
    """
    if len(envs) != len(starts) or not envs:
        raise ValueError("need one start per environment")
    if len({s & 1 for s in starts}) != 1:
        raise ValueError("starts must share parity")
    lo0, hi0 = min(starts), max(starts)
    half = _initial_half_width(N)
    while True:
        h = min(half, N + 1)
        lo, hi = lo0 - h, hi0 + h
        U = np.stack([build_chain(e, lo, hi, ABSORBING).up for e in envs])
        P = np.zeros_like(U)
        for j, s in enumerate(starts):
            P[j, s - lo] = 1.0
        out = np.zeros(N + 1)
        out[0] = 1.0 if lo0 == hi0 else 0.0
        leak = np.zeros((len(envs), 3))
        _step_all(P, U, int(N), True, 1, out, leak, float(tol))
        worst = float(leak.sum(axis=1).max())
        if worst <= tol:
            return out, worst
        if 2 * half + 1 > WINDOW_CAP:
            raise WindowCapExceeded(f"leakage {worst:.3g} > {tol}")
        half *= 2
