"""Command line entry point ``sinai-lab``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .engine import hitting_prob, hitting_prob_oracle
from .env import EnvSpec, make_env
from .landscape import DEFAULT_ALPHA, DEFAULT_C2, DEFAULT_H_COEF, LandscapeUndetermined, _central_valleys
from .scenario import Scenario, ScenarioError, load_shipped, run_scenario, shipped_scenarios


def _spec_arg(text: str) -> tuple[EnvSpec, int]:
    """``--spec`` accepts a JSON document or a path to one."""
    p = Path(text)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    try:
        return EnvSpec.from_json(text)
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"bad --spec: {exc}") from exc


def _load_scenario(arg: str) -> Scenario:
    p = Path(arg)
    if p.exists():
        return Scenario.load(p)
    return load_shipped(arg)


def cmd_run(args) -> int:
    scen = _load_scenario(args.scenario)
    if args.seed is not None:
        scen = scen.with_seed(args.seed)
    out = args.out or scen.output or str(Path("results") / scen.name)
    rep = run_scenario(scen, args.workers, out)
    for v in rep.verdicts:
        print(v.line())
    print(f"{scen.name}: {'PASS' if rep.passed else 'FAIL'} ({rep.wall_time:.1f} s), outputs in {out}")
    return 0 if rep.passed else 1


def cmd_list(args) -> int:
    for name in shipped_scenarios():
        print(name)
    return 0


def cmd_exact_hitting(args) -> int:
    spec, tag = args.spec
    env = make_env(spec, tag)
    p = hitting_prob(env, args.a, args.b, args.c)
    q = hitting_prob_oracle(env, args.a, args.b, args.c)
    print(json.dumps({"a": args.a, "b": args.b, "c": args.c, "closed_form": p, "oracle": q}))
    return 0


def cmd_landscape(args) -> int:
    spec, tag = args.spec
    env = make_env(spec, tag)
    try:
        h, dec, marks = _central_valleys(env, args.n, args.c2, args.h_coef, args.alpha)
    except (LandscapeUndetermined, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.csv:
        sys.stdout.write(dec.to_csv())
    else:
        print(json.dumps({"h": h, "bottoms": marks.bottoms, "barriers": marks.barriers}, sort_keys=True))
    return 0


def cmd_env_sample(args) -> int:
    spec, tag = args.spec
    env = make_env(spec, tag)
    a, b = args.range
    if b < a:
        print("error: empty range", file=sys.stderr)
        return 2
    w = env.omega(a, b)
    V = env.potential_range(a, b)
    print("site,omega,V")
    for i, x in enumerate(range(a, b + 1)):
        print(f"{x},{w[i]:.17g},{V[i]:.17g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sinai-lab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file (or the name of a shipped scenario)")
    r.add_argument("scenario")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_run)

    ls = sub.add_parser("list", help="list shipped scenarios")
    ls.set_defaults(func=cmd_list)

    ex = sub.add_parser("exact", help="exact quenched quantities")
    exsub = ex.add_subparsers(dest="what", required=True)
    hit = exsub.add_parser("hitting", help="P^b[tau(c) < tau(a)]")
    hit.add_argument("--a", type=int, required=True)
    hit.add_argument("--b", type=int, required=True)
    hit.add_argument("--c", type=int, required=True)
    hit.add_argument("--spec", type=_spec_arg, default=(EnvSpec(), 0))
    hit.set_defaults(func=cmd_exact_hitting)

    la = sub.add_parser("landscape", help="h-extrema around the origin at the level used for Xi_n")
    la.add_argument("--n", type=int, required=True)
    la.add_argument("--spec", type=_spec_arg, default=(EnvSpec(), 0))
    la.add_argument("--c2", type=float, default=DEFAULT_C2)
    la.add_argument("--h-coef", type=float, default=DEFAULT_H_COEF)
    la.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    la.add_argument("--csv", action="store_true")
    la.set_defaults(func=cmd_landscape)

    en = sub.add_parser("env", help="environment utilities")
    ensub = en.add_subparsers(dest="what", required=True)
    sm = ensub.add_parser("sample", help="print omega and V on a range of sites")
    sm.add_argument("--spec", type=_spec_arg, default=(EnvSpec(), 0))
    sm.add_argument("--range", type=int, nargs=2, metavar=("A", "B"), required=True)
    sm.set_defaults(func=cmd_env_sample)
    return ap


def main(argv=None) -> int:
    # numba falls back to another threading layer when the installed TBB is too old
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
