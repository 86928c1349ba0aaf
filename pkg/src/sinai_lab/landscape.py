"""Valleys of a discrete potential: h-extrema, localization sets, landmarks.

Everything here runs on the discrete potential ``V`` itself. A site ``y`` is an
h-minimum of ``V`` on a window when there are sites ``a < y < c`` in the window
with ``V(y) = min V[a..c]`` and ``V(a), V(c) >= V(y) + h``; h-maxima are
h-minima of ``-V``. On a finite window only some extrema can be certified; the
rest are reported as uncertified and env-level helpers widen the window until
the extrema they need are certified.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .env import Environment

MIN = -1
MAX = 1

WINDOW_CAP = 1 << 22


class LandscapeUndetermined(RuntimeError):
    """The window cap was reached before the required extrema were certified."""


@dataclass(frozen=True)
class PathWindow:
    """Values of a path on the contiguous sites ``lo .. lo + len(values) - 1``."""

    lo: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def hi(self) -> int:
        return self.lo + len(self.values) - 1

    def __len__(self):
        return len(self.values)


@numba.njit(cache=True)
def _scan(values, h):
    n = len(values)
    idx = np.empty(n + 2, np.int64)
    kind = np.empty(n + 2, np.int64)
    cert = np.empty(n + 2, np.bool_)
    m = 0
    if n == 0:
        return idx[:0], kind[:0], cert[:0]
    state = 0  # 0 undecided, 1 tracking a max, -1 tracking a min
    imin = 0
    imax = 0
    for i in range(1, n):
        v = values[i]
        if state == 0:
            if v > values[imax]:
                imax = i
            if v < values[imin]:
                imin = i
            if v - values[imin] >= h:
                ok = False
                for j in range(imin):
                    if values[j] >= values[imin] + h:
                        ok = True
                        break
                idx[m] = imin
                kind[m] = -1
                cert[m] = ok
                m += 1
                state = 1
                imax = i
            elif values[imax] - v >= h:
                ok = False
                for j in range(imax):
                    if values[j] <= values[imax] - h:
                        ok = True
                        break
                idx[m] = imax
                kind[m] = 1
                cert[m] = ok
                m += 1
                state = -1
                imin = i
        elif state == 1:
            if v > values[imax]:
                imax = i
            elif values[imax] - v >= h:
                idx[m] = imax
                kind[m] = 1
                cert[m] = True
                m += 1
                state = -1
                imin = i
        else:
            if v < values[imin]:
                imin = i
            elif v - values[imin] >= h:
                idx[m] = imin
                kind[m] = -1
                cert[m] = True
                m += 1
                state = 1
                imax = i
    # the running candidate has no witness on its right inside the window
    if state == 1:
        idx[m] = imax
        kind[m] = 1
        cert[m] = False
        m += 1
    elif state == -1:
        idx[m] = imin
        kind[m] = -1
        cert[m] = False
        m += 1
    return idx[:m], kind[:m], cert[:m]


@dataclass(frozen=True)
class Slope:
    """Segment of the path between consecutive extrema ``start`` and ``end``."""

    start: int
    end: int
    height: float
    excess: float
    certified: bool


@dataclass
class ExtremaDecomposition:
    """Alternating h-extrema of a path window.

    ``sites``, ``kinds`` (``MIN``/``MAX``), ``certified`` and ``values`` are
    parallel arrays ordered left to right.
    """

    h: float
    sites: np.ndarray
    kinds: np.ndarray
    certified: np.ndarray
    values: np.ndarray
    window: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if len(self.kinds) > 1:
            assert np.all(self.kinds[1:] == -self.kinds[:-1]), "h-extrema must alternate"

    def __len__(self):
        return len(self.sites)

    @property
    def certified_sites(self) -> np.ndarray:
        return self.sites[self.certified]

    def slopes(self) -> list[Slope]:
        out = []
        for i in range(len(self.sites) - 1):
            height = abs(self.values[i + 1] - self.values[i])
            out.append(
                Slope(
                    int(self.sites[i]),
                    int(self.sites[i + 1]),
                    float(height),
                    float(height - self.h),
                    bool(self.certified[i] and self.certified[i + 1]),
                )
            )
        return out

    def origin_index(self) -> int | None:
        """Position in the arrays of ``x_0``, the last extremum at or left of 0.

        Only certified extrema are used as anchors. Returns ``None`` if no
        certified extremum lies at or left of 0.
        """
        ok = np.nonzero(self.certified & (self.sites <= 0))[0]
        if len(ok) == 0:
            return None
        return int(ok[-1])

    def labeled(self) -> dict[int, tuple[int, int, bool]]:
        """Map ``k -> (site, kind, certified)`` with ``x_0 <= 0 < x_1``.

        If no certified extremum lies at or left of 0, the first certified one
        right of 0 is labelled ``x_1``.
        """
        i0 = self.origin_index()
        if i0 is None:
            pos = np.nonzero(self.certified & (self.sites > 0))[0]
            if len(pos) == 0:
                return {}
            i0 = int(pos[0]) - 1
        return {
            i - i0: (int(self.sites[i]), int(self.kinds[i]), bool(self.certified[i]))
            for i in range(len(self.sites))
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "kind", "value", "H", "e", "certified"])
        slopes = self.slopes()
        for i, site in enumerate(self.sites):
            H = e = ""
            if i < len(slopes):
                H, e = f"{slopes[i].height:.17g}", f"{slopes[i].excess:.17g}"
            kind = "min" if self.kinds[i] == MIN else "max"
            w.writerow([int(site), kind, f"{self.values[i]:.17g}", H, e, int(self.certified[i])])
        return buf.getvalue()


def h_extrema(path: PathWindow, h: float) -> ExtremaDecomposition:
    """Single left-to-right scan for the alternating h-extrema of ``path``.

    Within a run of equal extremal values the earliest site is kept.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if len(path) == 0:
        raise ValueError("empty window")
    idx, kind, cert = _scan(path.values, float(h))
    return ExtremaDecomposition(
        float(h),
        idx + path.lo,
        kind,
        cert,
        path.values[idx],
        (path.lo, path.hi),
    )


def brute_force_extrema(path: PathWindow, h: float) -> dict[int, int]:
    """All sites passing the two-sided h-extremum test inside the window.

    Quadratic reference implementation; returns ``{site: kind}``.
    """
    v = path.values
    n = len(v)
    out = {}
    for y in range(n):
        for sign, kind in ((1.0, MIN), (-1.0, MAX)):
            w = sign * v
            left = right = False
            for a in range(y - 1, -1, -1):
                if w[a] < w[y]:
                    break
                if w[a] >= w[y] + h:
                    left = True
                    break
            for c in range(y + 1, n):
                if w[c] < w[y]:
                    break
                if w[c] >= w[y] + h:
                    right = True
                    break
            if left and right:
                out[y + path.lo] = kind
    return out


@dataclass(frozen=True)
class ValleyLandmarks:
    """Bottoms ``b_i`` and barriers ``M_i`` (``M_i`` lies between ``b_i`` and ``b_{i+1}``)."""

    bottoms: dict[int, int]
    barriers: dict[int, int]


def valley_landmarks(decomp: ExtremaDecomposition, certified_only: bool = True) -> ValleyLandmarks:
    """Relabel h-extrema as valley bottoms and barriers.

    ``b_0`` is the first minimum at or right of ``x_0``, so ``b_i = x_{2i}``
    when ``x_0`` is a minimum and ``x_{2i+1}`` otherwise.
    """
    if len(decomp) == 0:
        raise LandscapeUndetermined("no extrema in window")
    lab = decomp.labeled()
    if not lab:
        raise LandscapeUndetermined("window too small to certify any extremum")
    if not any(kind == MIN and (cert or not certified_only) for _, kind, cert in lab.values()):
        raise LandscapeUndetermined("window too small to certify any minimum")
    kind0 = lab[0][1] if 0 in lab else -lab[1][1]
    shift = 0 if kind0 == MIN else 1
    bottoms, barriers = {}, {}
    for k, (site, kind, cert) in lab.items():
        if certified_only and not cert:
            continue
        if kind == MIN:
            bottoms[(k - shift) // 2] = site
        else:
            barriers[(k - shift - 1) // 2] = site
    return ValleyLandmarks(bottoms, barriers)


def _decompose_env(env: Environment, h: float, ks: range, start_width: int) -> tuple[ExtremaDecomposition, dict]:
    """Decompose V on [-w, w], doubling w until every x_k, k in ks, is certified."""
    w = max(int(start_width), 8)
    while True:
        path = PathWindow(-w, env.potential_range(-w, w))
        dec = h_extrema(path, h)
        lab = dec.labeled()
        if lab and all(k in lab and lab[k][2] for k in ks):
            return dec, lab
        if 2 * w + 1 >= WINDOW_CAP:
            raise LandscapeUndetermined(
                f"could not certify extrema {ks.start}..{ks.stop - 1} at h={h:.4g} within |x| <= {w}"
            )
        w *= 2


def h_level(n: float, c2: float, h_coef: float) -> float:
    """Valley depth ``log n - h_coef * c2 * log log n`` used for localization sets."""
    h = math.log(n) - h_coef * c2 * math.log(math.log(n))
    if not h > 0:
        raise ValueError(
            f"h_n = {h:.3g} <= 0 for n={n}, c2={c2}, h_coef={h_coef}; lower c2 or h_coef"
        )
    return h


DEFAULT_C2 = 3.0
DEFAULT_H_COEF = 0.5
DEFAULT_ALPHA = 3.0


def _central_valleys(env, n, c2, h_coef, alpha, jmin=-2, jmax=2):
    h = h_level(n, c2, h_coef)
    start = int(math.log(n) ** alpha)
    # b_{jmin-1}..b_{jmax+1} and M_{jmin-1}..M_{jmax} need labels x_{2 jmin - 2} .. x_{2 jmax + 3}
    ks = range(2 * jmin - 2, 2 * jmax + 4)
    dec, _ = _decompose_env(env, h, ks, start)
    marks = valley_landmarks(dec)
    need_b = range(jmin - 1, jmax + 2)
    need_m = range(jmin - 1, jmax + 1)
    if not all(j in marks.bottoms for j in need_b) or not all(j in marks.barriers for j in need_m):
        raise LandscapeUndetermined("central valleys not certified")
    return h, dec, marks


@dataclass(frozen=True)
class XiSet:
    """Low-potential sites of the five central valleys."""

    n: int
    h: float
    threshold: float
    sites: np.ndarray
    bottoms: dict[int, int]
    barriers: dict[int, int]

    def __contains__(self, x) -> bool:
        i = np.searchsorted(self.sites, x)
        return bool(i < len(self.sites) and self.sites[i] == x)

    def contains(self, xs) -> np.ndarray:
        xs = np.asarray(xs)
        i = np.clip(np.searchsorted(self.sites, xs), 0, max(len(self.sites) - 1, 0))
        return self.sites[i] == xs if len(self.sites) else np.zeros(xs.shape, bool)


def xi_set(
    env: Environment,
    n: int,
    c2: float = DEFAULT_C2,
    h_coef: float = DEFAULT_H_COEF,
    alpha: float = DEFAULT_ALPHA,
) -> XiSet:
    """Union over j = -2..2 of {x in [M_{j-1}, M_j] : V(x) <= V(b_j) + c2 log log n}."""
    if n < 3:
        raise ValueError("n must be >= 3")
    h, dec, marks = _central_valleys(env, n, c2, h_coef, alpha)
    thr = c2 * math.log(math.log(n))
    lo, hi = marks.barriers[-3], marks.barriers[2]
    V = env.potential_range(lo, hi)
    keep = []
    for j in range(-2, 3):
        a, b = marks.barriers[j - 1], marks.barriers[j]
        seg = V[a - lo : b - lo + 1]
        vb = V[marks.bottoms[j] - lo]
        keep.append(np.arange(a, b + 1)[seg <= vb + thr])
    sites = np.unique(np.concatenate(keep))
    return XiSet(int(n), h, thr, sites, dict(marks.bottoms), dict(marks.barriers))


def m_pm(
    env: Environment,
    n: int,
    j: int,
    c2: float = DEFAULT_C2,
    h_coef: float = DEFAULT_H_COEF,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[int, int]:
    """``(M_j^-, M_j^+)``: the nearest low-potential sites beyond the barriers of valley j."""
    _, dec, marks = _central_valleys(env, n, c2, h_coef, alpha, min(j - 1, -2), max(j + 1, 2))
    thr = c2 * math.log(math.log(n))
    vb = env.potential(marks.bottoms[j])
    # right: first k >= M_j with V(k) <= V(b_j) + thr, capped by b_{j+1}
    mj, bnext = marks.barriers[j], marks.bottoms[j + 1]
    V = env.potential_range(mj, bnext)
    hit = np.nonzero(V <= vb + thr)[0]
    plus = mj + int(hit[0]) if len(hit) else bnext
    plus = min(plus, bnext)
    mprev, bprev = marks.barriers[j - 1], marks.bottoms[j - 1]
    V = env.potential_range(bprev, mprev)
    hit = np.nonzero(V <= vb + thr)[0]
    minus = bprev + int(hit[-1]) if len(hit) else bprev
    minus = max(minus, bprev)
    return minus, plus


# --- landmarks of the central valley at scale log N --------------------------


@dataclass(frozen=True)
class Eps:
    """Tolerances ``eps1 .. eps6`` of the good-environment events."""

    eps1: float = 0.05
    eps2: float = 0.05
    eps3: float = 0.05
    eps4: float = 0.05
    eps5: float = 0.05
    eps6: float = 0.05

    @classmethod
    def from_seq(cls, seq) -> Eps:
        if isinstance(seq, dict):
            return cls(**seq)
        return cls(*[float(x) for x in seq])


def _theta_right(env, level, start_width=64):
    w = start_width
    while True:
        V = env.potential_range(0, w)
        rise = V - np.minimum.accumulate(V)
        hit = np.nonzero(rise >= level)[0]
        if len(hit):
            theta = int(hit[0])
            seg = V[: theta + 1]
            m = seg.min()
            beta = int(np.nonzero(seg[:theta] == m)[0][-1]) if theta > 0 else 0
            return theta, beta
        if w >= WINDOW_CAP:
            raise LandscapeUndetermined("theta_N^(R) not found within window cap")
        w *= 2


def _theta_left(env, level, start_width=64):
    w = start_width
    while True:
        V = env.potential_range(-w, 0)[::-1]  # V(0), V(-1), ...
        rise = V - np.minimum.accumulate(V)
        hit = np.nonzero(rise >= level)[0]
        if len(hit):
            t = int(hit[0])
            seg = V[: t + 1]
            m = seg.min()
            # inf{i > theta: V(i) = min} is the argmin farthest from 0
            b = int(np.nonzero(seg[:t] == m)[0][-1]) if t > 0 else 0
            return -t, -b
        if w >= WINDOW_CAP:
            raise LandscapeUndetermined("theta_N^(L) not found within window cap")
        w *= 2


@dataclass(frozen=True)
class CentralLandmarks:
    theta_r: int
    beta_r: int
    theta_l: int
    beta_l: int
    b_hat: int
    side: str


def even_floor(x: int) -> int:
    return 2 * (int(x) // 2)


def central_landmarks(env: Environment, N: int, eps1: float = 0.05) -> CentralLandmarks:
    """theta/beta on both sides of 0 and the even bottom ``b_hat(N)``.

    The side is R when ``x_1(V, (1 - 2 eps1) log N)`` is a minimum, else L.
    """
    logN = math.log(N)
    level = (1 + eps1) * logN
    tr, br = _theta_right(env, level)
    tl, bl = _theta_left(env, level)
    h = (1 - 2 * eps1) * logN
    _, lab = _decompose_env(env, h, range(0, 2), max(tr, -tl, 16))
    side = "R" if lab[1][1] == MIN else "L"
    b_hat = even_floor(br if side == "R" else bl)
    return CentralLandmarks(tr, br, tl, bl, b_hat, side)


@dataclass
class GoodEnvReport:
    """Flags of the good-environment events evaluated on V, with the landmarks."""

    N: int
    eps: Eps
    side: str
    delta0: bool
    delta1: bool
    delta2: bool
    delta3: bool
    delta4: bool
    delta5: bool
    delta6: bool
    theta_r: int
    beta_r: int
    theta_l: int
    beta_l: int
    b_hat: int
    x_hat: dict[int, int]
    l_minus: int
    l_plus: int
    sum6_r: float
    sum6_l: float
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(
            (self.delta0, self.delta1, self.delta2, self.delta3, self.delta4, self.delta5, self.delta6)
        )

    @property
    def valley(self) -> tuple[int, int]:
        """Edges of the central valley: [x_0, x_2] on side R, [x_{-1}, x_1] on side L."""
        if self.side == "R":
            return self.x_hat[0], self.x_hat[2]
        return self.x_hat[-1], self.x_hat[1]

    @property
    def guard(self) -> int:
        """Barrier on the far side of 0 from b_hat."""
        return self.x_hat[0] if self.side == "R" else self.x_hat[1]

    def flags(self) -> dict[str, bool]:
        return {f"delta{i}": getattr(self, f"delta{i}") for i in range(7)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = asdict(self.eps)
        d["x_hat"] = {str(k): v for k, v in self.x_hat.items()}
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def delta_checks(env: Environment, N: int, eps: Eps | None = None) -> GoodEnvReport:
    """Evaluate the good-environment events at scale N on the potential V."""
    eps = eps or Eps()
    logN = math.log(N)
    h = (1 - 2 * eps.eps1) * logN
    cl = central_landmarks(env, N, eps.eps1)
    start = max(cl.theta_r, -cl.theta_l, 16)
    dec, lab = _decompose_env(env, h, range(-1, 3), start)
    x = {k: lab[k][0] for k in range(-1, 3)}
    Vx = {k: env.potential(x[k]) for k in x}
    side = "R" if lab[1][1] == MIN else "L"

    d1 = all(abs(Vx[i + 1] - Vx[i]) >= (1 + 2 * eps.eps1) * logN for i in (-1, 0, 1))

    V01 = env.potential_range(0, x[1])
    V00 = env.potential_range(x[0], 0)
    if side == "R":
        d2 = bool(V01.max() < Vx[0] - eps.eps2 * logN)
        d5 = bool(V00.min() > Vx[1] + eps.eps5 * logN)
    else:
        d2 = bool(V00.max() < Vx[1] - eps.eps2 * logN)
        d5 = bool(V01.min() > Vx[0] + eps.eps5 * logN)
    bound3 = logN**2 / eps.eps3
    d3 = -bound3 <= x[-1] and x[2] <= bound3
    d4 = abs(Vx[0]) > eps.eps4 * logN and abs(Vx[1]) > eps.eps4 * logN

    Vr = env.potential_range(0, cl.theta_r)
    s6r = float(np.exp(-(Vr[: cl.theta_r] - Vr[cl.beta_r])).sum())
    Vl = env.potential_range(cl.theta_l, 0)
    s6l = float(np.exp(-(Vl[:-1] - Vl[cl.beta_l - cl.theta_l])).sum())
    d6 = s6r <= 1 / eps.eps6 and s6l <= 1 / eps.eps6

    b = cl.b_hat
    lm, lp = l_pm(env, b, (1 - eps.eps1) * logN)
    return GoodEnvReport(
        N=int(N),
        eps=eps,
        side=side,
        delta0=True,
        delta1=bool(d1),
        delta2=d2,
        delta3=bool(d3),
        delta4=bool(d4),
        delta5=d5,
        delta6=bool(d6),
        theta_r=cl.theta_r,
        beta_r=cl.beta_r,
        theta_l=cl.theta_l,
        beta_l=cl.beta_l,
        b_hat=b,
        x_hat=x,
        l_minus=lm,
        l_plus=lp,
        sum6_r=s6r,
        sum6_l=s6l,
    )


def l_pm(env: Environment, b: int, level: float) -> tuple[int, int]:
    """Nearest sites left and right of ``b`` where V exceeds V(b) by ``level``."""
    vb = env.potential(b)
    w = 64
    while True:
        V = env.potential_range(b - w, b + w)
        left = np.nonzero(V[: w + 1] - vb >= level)[0]
        right = np.nonzero(V[w:] - vb >= level)[0]
        if len(left) and len(right):
            return b - w + int(left[-1]), b + int(right[0])
        if w >= WINDOW_CAP:
            raise LandscapeUndetermined("L-hat not found within window cap")
        w *= 2


def slope_excess(env: Environment, h: float, ks=(0, 2), start_width: int | None = None) -> dict[int, float]:
    """``e(T_k) / h`` for the slopes ``T_k = [x_k, x_{k+1}]`` of V at level h."""
    if start_width is None:
        sd = math.sqrt(env.spec.sigma2) if env.spec.sigma2 > 0 else 1.0
        start_width = int(4 * (h / sd) ** 2) + 16
    need = range(min(ks), max(ks) + 2)
    _, lab = _decompose_env(env, h, need, start_width)
    out = {}
    for k in ks:
        a, b = lab[k][0], lab[k + 1][0]
        H = abs(env.potential(b) - env.potential(a))
        out[k] = (H - h) / h
    return out


def slope_law_samples(spec, count: int, h_sigmas: float = 25.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Excess heights ``e/h`` of the central slope and of one non-central slope.

    One environment per sample, so samples are independent; the non-central
    slope is ``T_2``. ``h = h_sigmas * sigma``.
    """
    from ._hash import ENV_TAG, derive_seed
    from .env import make_env

    h = h_sigmas * math.sqrt(spec.sigma2)
    central = np.empty(count)
    other = np.empty(count)
    for i in range(count):
        env = make_env(spec.with_seed(derive_seed(seed, i, ENV_TAG)), 0)
        e = slope_excess(env, h)
        central[i], other[i] = e[0], e[2]
    return central, other
