"""Scenario files, the runner that executes them, and their reports.

A scenario is a JSON document with ``name``, ``kind``, ``seed``, ``spec``,
``params`` and ``thresholds``. Every verdict compares a measured statistic with
a value taken from ``thresholds``; nothing is compared against a constant
defined in code. See SCHEMA.md for the per-kind parameters.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .engine import return_probabilities, return_prob_series
from .env import EnvSpec
from .landscape import DEFAULT_ALPHA, DEFAULT_C2, DEFAULT_H_COEF, Eps, slope_law_samples
from .montecarlo import (
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
)
from .stats import decade_increments, decreasing_at, fit_log_growth, ks_exponential, ks_two_sample

KINDS = (
    "recurrence",
    "meetings",
    "localization",
    "collision-decay",
    "same-env-sum",
    "coupling",
    "series",
    "landscape-stats",
)

_REQUIRED = {
    "recurrence": (("N", "trials", "horizons", "configs"), ("z",)),
    "meetings": (("N", "trials", "horizons", "configs"), ("z",)),
    "localization": (("n_grid", "trials"), ("max_rate", "z")),
    "collision-decay": (("horizons", "trials"), ("z",)),
    "same-env-sum": (("r", "N", "envs"), ("floor_min", "contrast_max")),
    "coupling": (("N", "envs", "marginal_runs", "runs_per_env"), ("ks_max", "floor_min", "late_meet_frac_max")),
    "series": (("N", "envs"), ("plateau_max", "growth_min")),
    "landscape-stats": (("samples", "h_sigmas"), ("ks_max", "central_mean_target", "central_mean_tol")),
}


class ScenarioError(ValueError):
    """Invalid scenario file."""


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str
    seed: int
    spec: EnvSpec
    params: dict
    thresholds: dict
    output: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        need_p, need_t = _REQUIRED[self.kind]
        missing = [k for k in need_p if k not in self.params] + [k for k in need_t if k not in self.thresholds]
        if missing:
            raise ScenarioError(f"scenario {self.name!r} ({self.kind}) lacks: {', '.join(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        for key in ("name", "kind"):
            if key not in d:
                raise ScenarioError(f"missing {key!r}")
        try:
            spec = EnvSpec.from_dict(d["spec"]) if "spec" in d else EnvSpec()
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"bad spec: {exc}") from exc
        return cls(
            d["name"],
            d["kind"],
            int(d.get("seed", 0)),
            spec,
            dict(d.get("params", {})),
            dict(d.get("thresholds", {})),
            d.get("output"),
        )

    @classmethod
    def load(cls, path) -> Scenario:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_seed(self, seed: int) -> Scenario:
        return Scenario(self.name, self.kind, int(seed), self.spec, self.params, self.thresholds, self.output)


def shipped_scenarios() -> list[str]:
    """File names of the scenarios bundled with the package."""
    return sorted(p.name for p in resources.files("sinai_lab.scenarios").iterdir() if p.name.endswith(".json"))


def load_shipped(name: str) -> Scenario:
    if not name.endswith(".json"):
        name += ".json"
    with resources.files("sinai_lab.scenarios").joinpath(name).open() as fh:
        return Scenario.from_dict(json.load(fh))


@dataclass(frozen=True)
class Verdict:
    name: str
    value: float
    op: str
    threshold: float
    passed: bool

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.6g} {self.op} {self.threshold:.6g}"


def _check(name, value, op, threshold) -> Verdict:
    value = float(value)
    ok = {"<=": value <= threshold, ">=": value >= threshold, "<": value < threshold, ">": value > threshold}[op]
    return Verdict(name, value, op, float(threshold), bool(ok and not math.isnan(value)))


@dataclass
class Report:
    scenario: Scenario
    verdicts: list[Verdict] = field(default_factory=list)
    tables: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "name": self.scenario.name,
            "kind": self.scenario.kind,
            "provenance": {"seed": self.scenario.seed, "version": __version__, "spec": self.scenario.spec.to_dict()},
            "summary": self.summary,
            "tables": sorted(self.tables),
            "verdicts": [v.__dict__ for v in self.verdicts],
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        """Write ``report.json``, one CSV per table and ``provenance.json`` (wall time)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        for name, text in self.tables.items():
            (out / f"{name}.csv").write_text(text)
        prov = {"seed": self.scenario.seed, "version": __version__, "wall_time_s": round(self.wall_time, 3)}
        (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
        return out


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _table(header, rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- kinds


def _product_kind(s: Scenario, workers, which: str) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    H = [int(h) for h in p["horizons"]]
    z = float(th["z"])
    transform = p.get("transform", "identity")
    for c in p["configs"]:
        m, r, I = int(c["m"]), int(c["r"]), int(c.get("I", 1 if c["r"] else 0))
        label = f"m{m}_r{r}_I{I}"
        cfg = ProductConfig(m, r, I, int(p["N"]), int(p["trials"]), s.spec, tuple(c.get("J", ())), tuple(c.get("starts", ())), s.seed)
        stats = simulate_product(cfg, workers)
        rep.tables[f"{which}_{label}"] = stats.to_csv()
        X = stats.at(H, "meet" if which == "meetings" else "ret")
        di = decade_increments(X, H, transform)
        info = {
            "mean_at_horizons": X.mean(axis=0).tolist(),
            "increments": di.inc.tolist(),
            "increment_se": di.se.tolist(),
            "ratio_last_first": di.ratio,
            "ratio_se": di.ratio_se,
            "transform": transform,
        }
        expect = c["expect"]
        if expect == "grow":
            zmin = float(np.min(di.inc / np.where(di.se > 0, di.se, np.inf)))
            rep.verdicts.append(_check(f"{label} every increment / se", zmin, ">", z))
            rep.verdicts.append(_check(f"{label} last/first increment ratio", di.ratio, ">=", th["grow_ratio_min"]))
        elif expect == "flatten":
            rep.verdicts.append(
                _check(f"{label} last/first increment ratio + {z:g} se", di.ratio + z * di.ratio_se, "<=", th["flatten_ratio_max"])
            )
        elif expect == "log_fit":
            mean, _ = stats.mean_se("meet" if which == "meetings" else "ret")
            sel = stats.checkpoints >= int(p.get("fit_from", H[0]))
            fit = fit_log_growth(stats.checkpoints[sel], mean[sel])
            info["log_fit"] = {"intercept": fit.intercept, "slope": fit.slope, "r2": fit.r2}
            rep.verdicts.append(_check(f"{label} R^2 of a + b log N", fit.r2 if fit.r2 is not None else float("nan"), ">=", th["r2_min"]))
        elif expect == "flat":
            lo = int(p["flat_from"])
            Y = stats.at([lo, cfg.N], "meet" if which == "meetings" else "ret").astype(float)
            d = Y[:, 1] - Y[:, 0]
            bound = d.mean() + z * d.std(ddof=1) / math.sqrt(len(d))
            total = Y[:, 1].mean()
            info["flat_increase"] = float(d.mean())
            rep.verdicts.append(_check(f"{label} relative increase after {lo} (+{z:g} se)", bound / total if total else 0.0, "<=", th["flat_rel_max"]))
        else:
            raise ScenarioError(f"unknown expectation {expect!r}")
        if c.get("kochen_stone") and m == 2:
            ks = kochen_stone_ratio(cfg, stats)
            info["kochen_stone"] = {"ratio": ks.ratio, "se": ks.se, "defined": ks.defined}
        rep.summary[label] = info
    return rep


def _localization(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    rows = []
    ests = []
    for n in p["n_grid"]:
        est = localization_rate(
            s.spec,
            int(n),
            int(p["trials"]),
            float(p.get("c2", DEFAULT_C2)),
            s.seed,
            float(p.get("h_coef", DEFAULT_H_COEF)),
            float(p.get("alpha", DEFAULT_ALPHA)),
            workers,
        )
        ests.append(est)
        rows.append((int(n), est.rate, est.se, est.used, est.undetermined))
    rep.tables["localization"] = _table(["n", "rate", "se", "trials_used", "undetermined"], rows)
    z = float(th["z"])
    rep.verdicts.append(_check(f"rate at n={ests[-1].n}", ests[-1].rate, "<=", th["max_rate"]))
    worst = -math.inf
    for a, b in zip(ests, ests[1:]):
        # b may exceed a only by noise: (b - a) / se_diff stays below z
        sd = math.hypot(a.se, b.se)
        worst = max(worst, (b.rate - a.rate) / sd if sd > 0 else (math.inf if b.rate > a.rate else -math.inf))
    rep.verdicts.append(_check("largest rise between consecutive n (in se)", worst, "<=", z))
    sd = math.hypot(ests[0].se, ests[-1].se)
    drop = (ests[0].rate - ests[-1].rate) / sd if sd > 0 else 0.0
    rep.verdicts.append(_check("drop from first to last n (in se)", drop, ">", z))
    rep.summary = {"rates": [e.rate for e in ests], "se": [e.se for e in ests], "undetermined": [e.undetermined for e in ests]}
    return rep


def _collision(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    est = collision_prob_indep(s.spec, p["horizons"], int(p["trials"]), s.seed, float(p.get("tol", 1e-9)))
    rep.tables["collision"] = est.to_csv()
    ok, diff, se = decreasing_at(est.per_env, float(th["z"]))
    zmin = float(np.min(diff / np.where(se > 0, se, np.inf)))
    rep.verdicts.append(_check("smallest paired decrease (in se)", zmin, ">", th["z"]))
    rep.summary = {"mean": est.mean.tolist(), "se": est.se.tolist(), "error_bound": est.error_bound}
    return rep


def _same_env(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    r = int(p["r"])
    starts = p.get("starts", [0] * r)
    N = int(p["N"])
    same, indep = [], []
    for t in range(int(p["envs"])):
        env = trial_env(s.spec, s.seed, t, 0)
        same.append(same_env_meeting_sum(env, starts, N).value)
        others = [trial_env(s.spec, s.seed, t, i) for i in range(r)]
        indep.append(same_env_meeting_sum(others, starts, N).value)
    rep.tables["same_env_sum"] = _table(["env", "same_env", "independent_envs"], [(i, a, b) for i, (a, b) in enumerate(zip(same, indep))])
    rep.verdicts.append(_check("min over envs of same-env sum", min(same), ">", th["floor_min"]))
    ratio = float(np.mean(indep) / np.mean(same))
    rep.verdicts.append(_check("mean independent / mean same-env", ratio, "<=", th["contrast_max"]))
    rep.summary = {"same_env": same, "independent": indep, "min_same": min(same), "contrast": ratio}
    return rep


def _coupling(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    N = int(p["N"])
    eps = Eps.from_seq(p.get("eps", [0.05] * 6))
    late = float(p.get("late_exponent", 0.9))
    want = int(p["envs"])
    setups, scanned = [], 0
    while len(setups) < want and scanned < int(p.get("scan_limit", 20 * want)):
        env = trial_env(s.spec, s.seed, scanned, 0)
        scanned += 1
        setup = CouplingSetup.build(env, N, eps)
        if setup.applicable:
            setups.append((scanned - 1, setup))
    rep.summary["envs_scanned"] = scanned
    rep.summary["envs_passing"] = len(setups)
    if not setups:
        # nothing to measure: an undefined floor fails against the declared threshold
        rep.verdicts.append(_check("floor of min P^0[Z_n = b_hat] over envs", float("nan"), ">", th["floor_min"]))
        return rep
    # marginal of Z under the coupling versus a plain walk, on the first passing environment
    _, s0 = setups[0]
    runs = int(p["marginal_runs"])
    half = [run_coupling(s0, seed=s.seed, run=i, approach=False).z_half for i in range(runs)]
    plain = plain_positions(s0, N // 2, runs, seed=s.seed)
    ks = ks_two_sample(half, plain)
    rep.verdicts.append(_check("KS of Z_{N/2}: coupled vs plain", ks, "<=", th["ks_max"]))
    rows, floors, outcomes = [], [], []
    late_count = total = 0
    for idx, st in setups:
        outs = [run_coupling(st, seed=s.seed, run=10_000 * (idx + 1) + i) for i in range(int(p["runs_per_env"]))]
        outcomes += outs
        tm = np.array([o.tau_meet for o in outs])
        late_count += int(np.sum((tm < 0) | (tm > N**late)))
        total += len(outs)
        fl, err = bottom_floor(st.env, N, st.report.b_hat, late)
        floors.append(fl)
        frac = lambda key: float(np.mean([bool(getattr(o, key)) for o in outs]))
        rows.append((idx, st.report.b_hat, st.report.side, fl, err, frac("d1"), frac("d2"), frac("d3"), float(np.mean((tm < 0) | (tm > N**late)))))
    rep.tables["coupling_envs"] = _table(["env", "b_hat", "side", "min_prob_b_hat", "error_bound", "d1_rate", "d2_rate", "d3_rate", "late_meet_rate"], rows)
    rep.tables["coupling_runs"] = coupling_csv(outcomes)
    rep.verdicts.append(_check("floor of min P^0[Z_n = b_hat] over envs", min(floors), ">", th["floor_min"]))
    rep.verdicts.append(_check(f"fraction with meeting time > N^{late:g}", late_count / total, "<=", th["late_meet_frac_max"]))
    rep.summary.update({"ks": ks, "floors": floors, "late_meet_fraction": late_count / total})
    return rep


def _series(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    N = int(p["N"])
    thetas = [float(t) for t in p.get("thetas", [1.0, 0.5])]
    rows = []
    last_frac = {t: [] for t in thetas}
    for e in range(int(p["envs"])):
        env = trial_env(s.spec, s.seed, e, 0)
        probs, err = return_probabilities(env, N, float(p.get("tol", 1e-9)))
        for t in thetas:
            curve = return_prob_series(env, N, t, probs=probs)
            total = curve.partial_sums[-1]
            prev = curve.partial_sums[np.searchsorted(curve.checkpoints, N // 10)]
            frac = (total - prev) / total
            last_frac[t].append(frac)
            rows.append((e, t, total, frac, err))
            rep.tables[f"series_env{e}_theta{t:g}"] = curve.to_csv()
    rep.tables["series_summary"] = _table(["env", "theta", "partial_sum", "last_decade_fraction", "error_bound"], rows)
    conv, div = thetas[0], thetas[-1]
    rep.verdicts.append(_check(f"max last-decade fraction, theta={conv:g}", max(last_frac[conv]), "<", th["plateau_max"]))
    rep.verdicts.append(_check(f"min last-decade fraction, theta={div:g}", min(last_frac[div]), ">", th["growth_min"]))
    rep.summary = {f"theta_{t:g}": v for t, v in last_frac.items()}
    return rep


def _landscape_stats(s: Scenario, workers) -> Report:
    p, th = s.params, s.thresholds
    rep = Report(s)
    central, other = slope_law_samples(s.spec, int(p["samples"]), float(p["h_sigmas"]), s.seed)
    ks = ks_exponential(other)
    rep.tables["slopes"] = _table(["sample", "central_e_over_h", "noncentral_e_over_h"], [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(central, other))])
    rep.verdicts.append(_check("KS(e/h, Exp(1)) non-central", ks, "<=", th["ks_max"]))
    dev = abs(float(central.mean()) - float(th["central_mean_target"]))
    rep.verdicts.append(_check("|mean central e/h - target|", dev, "<=", th["central_mean_tol"]))
    rep.summary = {"ks": ks, "central_mean": float(central.mean()), "noncentral_mean": float(other.mean())}
    return rep


_RUNNERS = {
    "recurrence": lambda s, w: _product_kind(s, w, "recurrence"),
    "meetings": lambda s, w: _product_kind(s, w, "meetings"),
    "localization": _localization,
    "collision-decay": _collision,
    "same-env-sum": _same_env,
    "coupling": _coupling,
    "series": _series,
    "landscape-stats": _landscape_stats,
}


def run_scenario(s: Scenario, workers: int | None = None, out_dir=None) -> Report:
    """Execute a scenario, write its outputs if ``out_dir`` (or ``s.output``) is set."""
    t0 = time.perf_counter()
    try:
        rep = _RUNNERS[s.kind](s, workers)
    except ScenarioError:
        raise
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"scenario {s.name!r}: bad parameter ({exc})") from exc
    except Exception as exc:
        raise RuntimeError(f"scenario {s.name!r} ({s.kind}) failed: {exc}") from exc
    rep.wall_time = time.perf_counter() - t0
    target = out_dir or s.output
    if target:
        rep.write(target)
    return rep
