"""Command-line runner: one subcommand per experiment, CSV outputs plus a plain-text manifest.

Measures are given inline or through a file:

    beta:a=0.5,b=1.5      Beta(a, b) density (optional scale=)
    beta_alpha:alpha=1.5  Beta(2 - alpha, alpha)
    uniform               Lebesgue measure on (0, 1]
    atom:x=0.5,m=1        atom of mass m at x (x = 0 is the Kingman part)
    kingman:m=1           Kingman component
    piece:l=0,u=1,gamma=-0.5,c=1   density c x^gamma on (l, u]
    file:path             one component per line, e.g. ``type=beta a=0.5 b=1.5``

Inline components can be joined with ``+``.  Exit codes: 0 success, 1 a checked
property failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .io import fmt, write_csv
from .measure import (
    Atom, BetaFamily, LambdaMeasure, MeasureError, PowerLawPiece, PowerLawPieces, UniformOn01, lambda_rates,
    log_binom, psi, schweinsberg_sum, total_merge_rate,
)

OUT_ENV = "LAMBDACOAL_OUT"


class ConfigError(ValueError):
    """Bad command-line configuration (exit code 2)."""


# --------------------------------------------------------------------------
# measure grammar


def _fields(text: str, sep: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(sep))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ConfigError(f"expected key=value, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"not a number: {item!r}") from None
    return out


def _component(kind: str, f: dict[str, float]):
    def need(*keys, optional=()):
        extra = set(f) - set(keys) - set(optional)
        missing = [k for k in keys if k not in f]
        if extra or missing:
            raise ConfigError(f"{kind}: expected keys {keys + tuple(optional)}, got {sorted(f)}")

    if kind == "beta":
        need("a", "b", optional=("scale",))
        return BetaFamily(f["a"], f["b"], f.get("scale", 1.0))
    if kind == "beta_alpha":
        need("alpha")
        return BetaFamily(2.0 - f["alpha"], f["alpha"])
    if kind == "uniform":
        need()
        return UniformOn01()
    if kind == "atom":
        need("x", "m")
        return Atom(f["x"], f["m"])
    if kind == "kingman":
        need("m")
        return Atom(0.0, f["m"])
    if kind == "piece":
        need("l", "u", "gamma", "c")
        return PowerLawPiece(f["l"], f["u"], f["gamma"], f["c"])
    raise ConfigError(f"unknown measure component {kind!r}")


def _assemble(parts) -> LambdaMeasure:
    pieces = [p for p in parts if isinstance(p, PowerLawPiece)]
    comps = [p for p in parts if not isinstance(p, PowerLawPiece)]
    if pieces:
        comps.append(PowerLawPieces(tuple(pieces)))
    kingman = any(isinstance(c, Atom) and c.location in (0.0, 1.0) for c in comps)
    return LambdaMeasure(tuple(comps), kingman_atom_allowed=kingman)


def read_measure_file(path) -> LambdaMeasure:
    """One component per line: ``type=<kind>`` followed by space-separated key=value pairs."""
    parts = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if not head.startswith("type="):
            raise ConfigError(f"line must start with type=: {raw!r}")
        parts.append(_component(head[5:], _fields(" ".join(tokens[1:]), " ")))
    if not parts:
        raise ConfigError(f"no components in {path}")
    return _assemble(parts)


def parse_measure(spec: str) -> LambdaMeasure:
    try:
        if spec.startswith("file:"):
            return read_measure_file(spec[5:])
        parts = []
        for term in spec.split("+"):
            kind, _, rest = term.strip().partition(":")
            parts.append(_component(kind, _fields(rest, ",")))
        return _assemble(parts)
    except (MeasureError, OSError) as err:
        raise ConfigError(str(err)) from None


def parse_grid(text: str, points: int) -> np.ndarray:
    """``lo:hi`` for ``points`` log-spaced values, or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi = (float(s) for s in text.split(":"))
            if not 0 < lo < hi:
                raise ConfigError(f"grid needs 0 < lo < hi, got {text!r}")
            return np.geomspace(lo, hi, points)
        return np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None


# --------------------------------------------------------------------------
# manifest


def write_manifest(out: Path, command: str, params: dict, seed=None, error_budget=None, results=None) -> Path:
    lines = [f"command={command}", f"lambdacoal={__version__}", f"numpy={np.__version__}",
             f"scipy={scipy.__version__}", f"python={platform.python_version()}"]
    if seed is not None:
        lines.append(f"seed={seed}")
    if error_budget is not None:
        lines.append(f"error_budget={fmt(float(error_budget))}")
    lines += [f"param.{k}={fmt(v)}" for k, v in sorted(params.items())]
    lines += [f"result.{k}={fmt(v)}" for k, v in (results or {}).items()]
    path = out / f"{command}_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _params(args) -> dict:
    skip = {"command", "func", "out"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


# --------------------------------------------------------------------------
# subcommands; each returns (exit code, results for the manifest, error budget)


def cmd_rates(args, m, out):
    b = args.b
    ks = np.arange(2, b + 1)
    lam = lambda_rates(b, ks, m)
    rate = np.exp(np.array([log_binom(b, int(k)) for k in ks])) * lam
    write_csv(out / "rates.csv", ["k", "lambda_bk", "rate"], zip(ks, lam, rate), {"b": b})
    return 0, {"total_rate": total_merge_rate(b, m)}, None


def cmd_psi(args, m, out):
    qs = parse_grid(args.q, args.points)
    write_csv(out / "psi.csv", ["q", "psi"], ((q, psi(float(q), m)) for q in qs))
    return 0, {}, None


def cmd_speed(args, m, out):
    from .speed import SpeedTable

    ts = parse_grid(args.t, args.points)
    table = SpeedTable(m, t_min=float(ts.min()), t_max=max(1.0, float(ts.max())))
    table.write_v_csv(out / "speed.csv", ts)
    return 0, {"grey": table.grey.verdict}, None


def cmd_cdi(args, m, out):
    from .speed import grey_verdict

    s = schweinsberg_sum(m, b_max=args.b_max)
    g = grey_verdict(m)
    pair = {("converges", "extinct"), ("diverges", "non_extinct")}
    if "inconclusive" in (s.verdict, g):
        agree, code = "undecided", 0
    else:
        agree = "yes" if (s.verdict, g) in pair else "no"
        code = 0 if agree == "yes" else 1
    print(f"schweinsberg={s.verdict} grey={g} agree={agree}")
    write_csv(out / "cdi.csv", ["b", "partial_sum"], zip(range(2, args.b_max + 1), s.partial_sums))
    return code, {"schweinsberg": s.verdict, "grey": g, "agree": agree}, None


def cmd_coalescent(args, m, out):
    from .coalescent import simulate_chain

    run = simulate_chain(args.n, m, args.t, args.seed)
    run.path.write_csv(out / "coalescent.csv", {"seed": args.seed, "n": args.n, "horizon": args.t})
    return 0, {"final_blocks": int(run.path.counts[-1])}, 0.0


def cmd_levy(args, m, out):
    from .levy import simulate_levy

    sk = simulate_levy(m, args.x0, args.t, args.cutoff, args.seed)
    sk.write_csv(out / "levy.csv")
    return 0, {"jumps": sk.times.size}, sk.error_variance


def cmd_csbp(args, m, out):
    from .levy import simulate_csbp

    path = simulate_csbp(m, 1.0, args.t, args.cutoff, args.seed)
    path.write_csv(out / "csbp.csv")
    return 0, {"extinct": path.extinct}, path.skeleton.error_variance


def cmd_lookdown(args, m, out):
    from .coalescent import coalescent_points
    from .lookdown import CoinSource, run_lookdown

    pts = coalescent_points(args.n, m, args.t, args.seed)
    run = run_lookdown(pts, args.n, args.t, CoinSource(args.seed))
    run.write_event_csv(out / "lookdown.csv")
    return 0, {"type_count": run.n_at(args.t)}, pts.truncation_budget


def cmd_couple(args, m, out):
    from .coupling import build_coupling

    tr = build_coupling(m, args.eps, args.eta, args.t, args.cutoff, args.seed, args.n)
    tr.write(out / "couple")
    res = {"ok": tr.ok, "T_stop": tr.T_stop, "size_violations": tr.size_violations,
           "clock_violations": tr.clock_violations, "lower": tr.lower.ok, "upper": tr.upper.ok}
    return (0 if tr.ok else 1), res, tr.error_budget


def cmd_sandwich(args, m, out):
    from .coupling import sandwich_experiment

    ts = parse_grid(args.t, args.points)
    rep = sandwich_experiment(m, args.eps, ts, args.n, args.runs, args.seed)
    if rep.branch == "finite":
        write_csv(out / "sandwich.csv", ["t", "lower", "upper", "coverage", "mean_count"],
                  zip(rep.t, rep.lower, rep.upper, rep.coverage, rep.mean_count))
        ok = rep.nondecreasing and rep.coverage[-1] >= args.min_coverage
    else:
        write_csv(out / "sandwich.csv", ["n", "min_count", "mean_count"],
                  zip(rep.n_values, rep.min_counts, rep.mean_counts))
        ok = rep.nondecreasing
    return (0 if ok else 1), {"branch": rep.branch, "ok": ok}, 0.0


def cmd_indices(args, m, out):
    from .indices import estimate_indices

    rep = estimate_indices(m, args.n_max)
    rep.write_csv(out / "indices.csv")
    print(f"beta_hat={rep.beta_hat:.4f} delta_hat={rep.delta_hat:.4f}")
    return 0, {"beta_hat": rep.beta_hat, "delta_hat": rep.delta_hat}, None


def cmd_sparse(args, out):
    from .indices import build_sparse_family, estimate_indices, limsup_schedule, oscillation_experiment

    schedule = limsup_schedule(args.beta) if args.eps == "limsup" else float(args.eps)
    fam = build_sparse_family(args.beta, schedule, cap=args.cap)
    res = {"m": " ".join(map(str, fam.m)), "series": fam.series_verdict(), "grey": fam.grey_verdict()}
    rep = estimate_indices(fam.measure, args.n_max)
    rep.write_csv(out / "sparse_indices.csv")
    res.update(beta_hat=rep.beta_hat, delta_hat=rep.delta_hat)
    if args.r_max > 0:
        osc = oscillation_experiment(fam, args.r_max)
        osc.write_csv(out / "oscillation.csv")
        res.update(spread=osc.spread)
    print(" ".join(f"{k}={fmt(v)}" for k, v in res.items() if k != "m"))
    return 0, res, None


def cmd_duality(args, m, out):
    from .lookdown import duality_test

    rep = duality_test(m, args.n, args.t, args.runs, args.seed, args.power)
    cols = ["lookdown_mean", "lookdown_se", "coalescent_mean", "coalescent_se", "exact", "z", "z_lookdown_exact",
            "z_coalescent_exact"]
    write_csv(out / "duality.csv", cols, [[getattr(rep, c) for c in cols]])
    worst = max(abs(rep.z), abs(rep.z_lookdown_exact), abs(rep.z_coalescent_exact))
    return (0 if worst <= args.z_max else 1), {"max_abs_z": worst}, 0.0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lambdacoal", description="Lambda-coalescent and CSBP experiments.")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./lambdacoal-out)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, measure=True, seed=False):
        s = sub.add_parser(name, help=help_)
        if measure:
            s.add_argument("--measure", required=True, help="measure, e.g. beta:a=0.5,b=1.5 (see README)")
        if seed:
            s.add_argument("--seed", type=int, required=True)
        s.set_defaults(func=func, needs_measure=measure)
        return s

    s = add("rates", cmd_rates, "merger rates lambda_{b,k} for one b")
    s.add_argument("--b", type=int, required=True)
    s = add("psi", cmd_psi, "branching mechanism on a q grid")
    s.add_argument("--q", default="1:1e8")
    s.add_argument("--points", type=int, default=41)
    s = add("speed", cmd_speed, "speed of coming down v(t)")
    s.add_argument("--t", default="1e-4:1e-1")
    s.add_argument("--points", type=int, default=31)
    s = add("cdi", cmd_cdi, "coming down from infinity vs extinction")
    s.add_argument("--b-max", type=int, default=2000)
    s = add("coalescent", cmd_coalescent, "block-count path of the coalescent", seed=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=float, default=1.0)
    s = add("levy", cmd_levy, "jump skeleton of the Levy process", seed=True)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--x0", type=float, default=1.0)
    s.add_argument("--cutoff", type=float, default=1e-3)
    s = add("csbp", cmd_csbp, "CSBP by the Lamperti transform", seed=True)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--cutoff", type=float, default=1e-3)
    s = add("lookdown", cmd_lookdown, "lookdown driven by coalescent atoms", seed=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=float, default=1.0)
    s = add("couple", cmd_couple, "one coupled path with domination checks", seed=True)
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--eta", type=float, default=1.0)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--cutoff", type=float, default=1e-3)
    s.add_argument("--n", type=int, default=64)
    s = add("sandwich", cmd_sandwich, "coverage of N(t) by the v-sandwich", seed=True)
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--t", default="0.05,0.02,0.01")
    s.add_argument("--points", type=int, default=3)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--runs", type=int, default=200)
    s.add_argument("--min-coverage", type=float, default=0.95)
    s = add("indices", cmd_indices, "upper and lower index estimates")
    s.add_argument("--n-max", type=int, default=100)
    s = add("sparse", cmd_sparse, "sparse-interval family: indices and oscillation", measure=False)
    s.add_argument("--beta", type=float, default=1.5)
    s.add_argument("--eps", default="0.3", help="constant eps or 'limsup'")
    s.add_argument("--cap", type=int, default=200)
    s.add_argument("--n-max", type=int, default=200)
    s.add_argument("--r-max", type=int, default=2)
    s = add("duality", cmd_duality, "lookdown vs coalescent product moment", seed=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--runs", type=int, default=2000)
    s.add_argument("--power", type=float, default=1.0)
    s.add_argument("--z-max", type=float, default=4.0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Path(args.out or os.environ.get(OUT_ENV) or "lambdacoal-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.needs_measure:
            measure = parse_measure(args.measure)
            code, res, budget = args.func(args, measure, out)
        else:
            code, res, budget = args.func(args, out)
    except (ConfigError, MeasureError) as err:
        print(f"lambdacoal: configuration error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"lambdacoal: invalid parameters: {err}", file=sys.stderr)
        return 2
    params = _params(args)
    params.pop("needs_measure", None)
    write_manifest(out, args.command, params, getattr(args, "seed", None), budget, res)
    return code


if __name__ == "__main__":
    sys.exit(main())
