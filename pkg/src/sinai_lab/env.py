"""I.i.d. random environments on Z and their potential.

An environment is a lazily evaluated map ``x -> omega_x`` where ``omega_x`` is
the probability of a step to the right from ``x``. The value at each site is a
pure function of ``(seed, tag, x)``, so environments extend to the left and to
the right without storing history, and two instances built from the same
``(spec, tag)`` agree everywhere.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass

import numba
import numpy as np

from ._hash import stream_key, uniform

TWO_POINT = "two_point"
LOG_UNIFORM = "log_uniform"
_LAW_CODE = {TWO_POINT: 0, LOG_UNIFORM: 1}


@dataclass(frozen=True)
class EnvSpec:
    """Law of the environment.

    ``law="two_point"``: omega is ``param`` or ``1 - param`` with probability
    1/2 each (``param`` is ``p_low``). ``law="log_uniform"``: ``log rho`` is
    uniform on ``[-param, param]`` (``param`` is the half width).
    """

    law: str = TWO_POINT
    param: float = 0.3
    epsilon0: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.law not in _LAW_CODE:
            raise ValueError(f"unknown law {self.law!r}")
        if not 0.0 < self.epsilon0 < 0.5:
            raise ValueError("epsilon0 must lie in (0, 1/2)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.law == TWO_POINT:
            if self.param == 0.5:
                raise ValueError("p_low = 1/2 gives sigma^2 = 0 (deterministic environment)")
            if not self.epsilon0 <= self.param < 0.5:
                raise ValueError("two_point needs epsilon0 <= p_low < 1/2")
        else:
            if not 0.0 < self.param <= self.a0 + 1e-12:
                raise ValueError("log_uniform needs 0 < half_width <= log((1-eps0)/eps0)")

    @property
    def a0(self) -> float:
        """Bound on |V(x) - V(x-1)| implied by ellipticity."""
        return math.log((1.0 - self.epsilon0) / self.epsilon0)

    @property
    def law_code(self) -> int:
        return _LAW_CODE[self.law]

    @property
    def sigma2(self) -> float:
        """Variance of log rho under the law."""
        if self.law == TWO_POINT:
            return math.log((1.0 - self.param) / self.param) ** 2
        return self.param**2 / 3.0

    def with_seed(self, seed: int) -> EnvSpec:
        return EnvSpec(self.law, self.param, self.epsilon0, int(seed))

    def to_dict(self, tag: int = 0) -> dict:
        d = {"law": self.law, "epsilon0": self.epsilon0, "seed": int(self.seed), "tag": int(tag)}
        d["p_low" if self.law == TWO_POINT else "half_width"] = self.param
        return d

    def to_json(self, tag: int = 0) -> str:
        return json.dumps(self.to_dict(tag), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> EnvSpec:
        law = d.get("law", TWO_POINT)
        param = d["p_low"] if law == TWO_POINT else d["half_width"]
        return cls(law, float(param), float(d.get("epsilon0", 0.3)), int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> tuple[EnvSpec, int]:
        d = json.loads(text)
        return cls.from_dict(d), int(d.get("tag", 0))


@numba.njit(cache=True, inline="always")
def omega_from_key(law, param, key, x):
    u = uniform(key, x)
    if law == 0:
        return param if u < 0.5 else 1.0 - param
    return 1.0 / (1.0 + math.exp((2.0 * u - 1.0) * param))


@numba.njit(cache=True)
def _omega_block(law, param, key, lo, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = omega_from_key(law, param, key, lo + i)
    return out


class Environment:
    """A fixed realisation of the environment with a cached potential.

    The potential is stored as prefix sums anchored at ``V(0) = 0``, grown by
    doubling in either direction, so a scan of width L costs O(L).
    """

    def __init__(self, spec: EnvSpec, tag: int = 0):
        self.spec = spec
        self.tag = int(tag)
        self.key = stream_key(spec.seed, self.tag)
        self._lock = threading.Lock()
        # _vpos[i] = V(i) for i >= 0; _vneg[i] = V(-i) for i >= 0
        self._vpos = np.zeros(1)
        self._vneg = np.zeros(1)

    def __repr__(self):
        return f"Environment({self.spec!r}, tag={self.tag})"

    def omega(self, lo: int, hi: int) -> np.ndarray:
        """omega_x for x = lo..hi inclusive."""
        n = hi - lo + 1
        if n <= 0:
            return np.empty(0)
        return _omega_block(self.spec.law_code, self.spec.param, self.key, lo, n)

    def omega_at(self, x: int) -> float:
        return float(self.omega(x, x)[0])

    def log_rho(self, lo: int, hi: int) -> np.ndarray:
        w = self.omega(lo, hi)
        return np.log((1.0 - w) / w)

    def _grow(self, hi: int, lo: int) -> None:
        with self._lock:
            npos = len(self._vpos)
            if hi >= npos:
                new = max(hi + 1, 2 * npos)
                inc = self.log_rho(npos, new - 1)
                # accumulate from the cached value so the result is a single
                # running sum whatever order the cache was grown in
                ext = np.cumsum(np.concatenate([self._vpos[-1:], inc]))[1:]
                self._vpos = np.concatenate([self._vpos, ext])
            nneg = len(self._vneg)
            if -lo >= nneg:
                new = max(-lo + 1, 2 * nneg)
                # V(-i) = V(-i+1) - log rho_{-i+1}
                inc = self.log_rho(-(new - 2), -(nneg - 1))[::-1]
                ext = np.cumsum(np.concatenate([self._vneg[-1:], -inc]))[1:]
                self._vneg = np.concatenate([self._vneg, ext])

    def potential_range(self, lo: int, hi: int) -> np.ndarray:
        """V(x) for x = lo..hi inclusive."""
        if hi < lo:
            return np.empty(0)
        if hi >= len(self._vpos) or -lo >= len(self._vneg):
            self._grow(max(hi, 0), min(lo, 0))
        vpos, vneg = self._vpos, self._vneg
        if lo >= 0:
            return vpos[lo : hi + 1].copy()
        if hi <= 0:
            return vneg[-hi : -lo + 1][::-1].copy()
        return np.concatenate([vneg[1 : -lo + 1][::-1], vpos[: hi + 1]])

    def potential(self, x: int) -> float:
        return float(self.potential_range(x, x)[0])


class TabulatedEnvironment(Environment):
    """Environment with explicit omega values on ``lo..lo+len(omegas)-1``.

    Sites outside the table get ``fill`` (1/2 by default, a flat potential).
    Used to build synthetic landscapes with known structure.
    """

    def __init__(self, omegas, lo: int = 0, fill: float = 0.5, epsilon0: float | None = None):
        omegas = np.asarray(omegas, dtype=float)
        if omegas.ndim != 1 or np.any((omegas <= 0) | (omegas >= 1)):
            raise ValueError("omegas must be a 1-d array of values in (0, 1)")
        if epsilon0 is None:
            epsilon0 = float(min(omegas.min(), 1 - omegas.max(), fill, 1 - fill, 0.49))
        self.table = omegas
        self.table_lo = int(lo)
        self.fill = float(fill)
        self.spec = EnvSpec(TWO_POINT, max(epsilon0, min(0.49, 0.3)), epsilon0, 0)
        self.tag = 0
        self.key = np.uint64(0)
        self._lock = threading.Lock()
        self._vpos = np.zeros(1)
        self._vneg = np.zeros(1)

    @classmethod
    def from_potential(cls, values, lo: int = 0, fill: float = 0.5) -> TabulatedEnvironment:
        """Environment whose potential increments on ``lo+1..`` follow ``values``.

        ``values[i]`` is the target of V(lo + i) up to the additive constant
        fixed by V(0) = 0; omega_x = 1 / (1 + exp(V(x) - V(x-1))).
        """
        values = np.asarray(values, dtype=float)
        inc = np.diff(values)
        return cls(1.0 / (1.0 + np.exp(inc)), lo + 1, fill)

    def __repr__(self):
        return f"TabulatedEnvironment(lo={self.table_lo}, n={len(self.table)})"

    def omega(self, lo: int, hi: int) -> np.ndarray:
        n = hi - lo + 1
        if n <= 0:
            return np.empty(0)
        out = np.full(n, self.fill)
        a = max(lo, self.table_lo)
        b = min(hi, self.table_lo + len(self.table) - 1)
        if a <= b:
            out[a - lo : b - lo + 1] = self.table[a - self.table_lo : b - self.table_lo + 1]
        return out


def make_env(spec: EnvSpec, tag: int = 0) -> Environment:
    """Build a lazily evaluated environment; distinct tags give independent streams."""
    return Environment(spec, tag)


def omega_at(env: Environment, x: int) -> float:
    return env.omega_at(x)


def potential(env: Environment, x: int) -> float:
    return env.potential(x)


def env_moments(env: Environment, lo: int, hi: int) -> tuple[float, float]:
    """Sample mean and (population) variance of log rho over sites lo..hi."""
    if hi < lo:
        raise ValueError("empty window")
    lr = env.log_rho(lo, hi)
    return float(lr.mean()), float(lr.var())


__all__ = [
    "EnvSpec",
    "Environment",
    "LOG_UNIFORM",
    "TWO_POINT",
    "TabulatedEnvironment",
    "env_moments",
    "make_env",
    "omega_at",
    "omega_from_key",
    "potential",
]
