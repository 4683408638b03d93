"""Command-line entry point: contractlab <subcommand> [options].

Exit codes: 0 success, 2 domain or configuration error, 3 solver
non-convergence, 64 usage error.
"""
from __future__ import annotations

import argparse
import html
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import boundary_values as BV
from . import contracts as K
from . import hjb_interior as H
from . import simulation as S
from .credible_set import geometry
from .errors import ConvergenceError, DependencyError, DomainError
from .model import ModelParams, figure_one_params, validate_assumptions
from .pure_moral_hazard import solve_pmh_all

EXIT_OK, EXIT_DOMAIN, EXIT_CONVERGENCE, EXIT_USAGE = 0, 2, 3, 64
CONFIG_KEYS = {"model", "run"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# formatting and atomic output


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(config: dict, header: list[str], rows) -> str:
    lines = ["# config: " + json.dumps(_jsonable(config), sort_keys=True), ",".join(header)]
    for r in rows:
        lines.append(",".join(fmt(v) for v in r))
    return "\n".join(lines) + "\n"


# minimal SVG renderer


def svg_plot(series, markers=(), title="", xlabel="", ylabel="", width=640, height=480) -> str:
    """Static line plot: series is [(label, xs, ys)], markers is [(label, x, y)]."""
    xs = np.concatenate([np.asarray(s[1], dtype=float) for s in series] + [np.array([m[1] for m in markers])])
    ys = np.concatenate([np.asarray(s[2], dtype=float) for s in series] + [np.array([m[2] for m in markers])])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        tx = x0 + (x1 - x0) * k / 5
        ty = y0 + (y1 - y0) * k / 5
        out.append(f'<line x1="{X(tx):.2f}" y1="{mt + ph}" x2="{X(tx):.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X(tx):.2f}" y="{mt + ph + 18}" text-anchor="middle" font-size="11">{tx:.4g}</text>')
        out.append(f'<line x1="{ml - 5}" y1="{Y(ty):.2f}" x2="{ml}" y2="{Y(ty):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{Y(ty) + 4:.2f}" text-anchor="end" font-size="11">{ty:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="13">{xlabel}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>')
    for n, (label, sx, sy) in enumerate(series):
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(sx, sy))
        col = colors[n % len(colors)]
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + 10}" y="{mt + 16 + 14 * n}" font-size="12" fill="{col}">{label}</text>')
    for label, mx, my in markers:
        out.append(f'<circle cx="{X(mx):.2f}" cy="{Y(my):.2f}" r="3.5" fill="black"/>')
        out.append(f'<text x="{X(mx) + 6:.2f}" y="{Y(my) - 6:.2f}" font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# configuration


def load_config(path: str | None) -> dict:
    if path is None:
        return {"model": figure_one_params().to_dict(), "run": {}}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as exc:
        raise DomainError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DomainError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DomainError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    if "model" not in cfg or not isinstance(cfg["model"], dict):
        raise DomainError("config needs a 'model' object")
    run = cfg.get("run", {})
    if not isinstance(run, dict):
        raise DomainError("'run' must be an object")
    return {"model": cfg["model"], "run": run}


def _effective(args, cfg: dict, names) -> dict:
    """Merge run settings: command-line flags override the config file."""
    run = dict(cfg["run"])
    for n in names:
        v = getattr(args, n, None)
        if v is not None:
            run[n] = v
    return run


def _need(run: dict, key: str, default=None):
    v = run.get(key, default)
    if v is None:
        raise DomainError(f"missing setting '{key}' (flag or config 'run' entry)")
    return v


def _int_j(p: ModelParams, run: dict) -> int:
    j = int(_need(run, "j", 1))
    if not (1 <= j <= p.I):
        raise DomainError(f"j={j} outside 1..{p.I}")
    return j


# subcommands


def cmd_validate(p, run, out):
    rep = validate_assumptions(p)
    return {"assumptions": rep.to_dict(), "all_hold": rep.all_hold}, []


def _region_rows(p, j, n):
    g = geometry(p, j)
    top = g.u_max()
    u = np.unique(np.concatenate([np.linspace(g.c1, top, n), [g.x_star, g.b_hat, g.C_j]]))
    u = u[(u >= g.c1) & (u <= top)]
    return u, np.asarray(g.lower(u)), np.asarray(g.upper(u))


def _kinks(p, j):
    g = geometry(p, j)
    return {"left_endpoint": [g.c1, g.c1], "x_star": [g.x_star, g.upper(g.x_star)],
            "b_hat": [g.b_hat, g.upper(g.b_hat)], "C": [g.C_j, g.lower(g.C_j)],
            "c_table": list(g.c_table)}


def cmd_credible_set(p, run, out):
    j = _int_j(p, run)
    n = int(run.get("points", 401))
    u, lo, up = _region_rows(p, j, n)
    files = [("credible_set_j%d.csv" % j, ("csv", ["u_b", "lower", "upper"], zip(u, lo, up)))]
    return {"j": j, "kinks": _kinks(p, j)}, files


def cmd_pmh(p, run, out):
    j = _int_j(p, run)
    sols = solve_pmh_all(p.with_pool(p.alpha[:j]))
    s = sols[-1]
    n = int(run.get("points", 201))
    u = np.linspace(s.b_hat, 2.0 * s.gamma_b, n)
    rows = zip(u, np.asarray(s.value(u)), np.asarray(s.derivative(u)))
    summary = {"j": j, "gammas": [x.gamma_b for x in sols], "W_at_b_hat": [x.value_at_bhat for x in sols],
               "payment_rate": s.payment_rate(p)}
    return summary, [("pmh_j%d.csv" % j, ("csv", ["u_b", "W", "dW"], rows))]


def cmd_boundary_values(p, run, out):
    j = _int_j(p, run)
    n = int(run.get("points", 101))
    q = p.with_pool(p.alpha[:j])
    pmh = solve_pmh_all(q)[-1]
    g = geometry(p, j)
    u = np.linspace(g.c1, g.u_max(), n)
    low = BV.value_lower(q, j, u)
    ug = BV.value_upper_good(q, j, u, pmh)
    ub = BV.value_upper_bad(q, j, u, pmh)
    k = BV.upper_constants(q, j, pmh)
    summary = {"j": j, "constants": {"bad": k.bad, "good_low": k.good_low, "good_mid": k.good_mid},
               "published_constants": BV.published_constants(q, j, pmh), "gamma": pmh.gamma_b}
    return summary, [("boundary_values_j%d.csv" % j,
                      ("csv", ["u_b", "V_lower", "V_upper_good", "V_upper_bad"], zip(u, low, ug, ub)))]


def cmd_solve_hjb(p, run, out):
    bank = _need(run, "bank")
    if bank not in ("good", "bad"):
        raise DomainError("bank must be 'good' or 'bad'")
    res = int(run.get("resolution", 64))
    j_max = int(run.get("j_max", p.I))
    if not (1 <= j_max <= p.I):
        raise DomainError(f"j_max={j_max} outside 1..{p.I}")
    pmh = solve_pmh_all(p)
    sols = H.solve_all(p, bank, pmh, res, j_max)
    files, report = [], []
    for V in sols:
        pol = H.extract_policy(V)
        files.append((f"hjb_{bank}_j{V.j}.csv", ("csv", ["u_b", "u_g", "V", "theta", "h1b", "h1g", "pay_flag"],
                                                 pol.rows())))
        report.append({"j": V.j, "iterations": V.iterations, "residual": V.residual,
                       "gradient_slack": V.gradient_slack, "boundary_error": V.boundary_error,
                       "nodes": V.domain.n_nodes})
    summary = {"bank": bank, "resolution": res, "convergence": report}
    files.append((f"hjb_{bank}_report.json", ("json", summary)))
    return summary, files


def cmd_policy(p, run, out):
    side = _need(run, "side")
    j = _int_j(p, run)
    n = int(run.get("points", 201))
    g = geometry(p, j)
    top = g.u_max()
    u = np.linspace(g.c1, top, n)
    rows = []
    if side == "upper":
        pmh = solve_pmh_all(p.with_pool(p.alpha[:j]))[-1]
        for x in u:
            c = K.upper_boundary_policy(p, j, float(x), pmh)
            rows.append((x, c.delta, c.theta, c.h1, c.h2, c.k_b, c.k_g))
    elif side == "lower":
        for x in u:
            c = K.lower_boundary_policy(p, j, float(x))
            rows.append((x, c.delta, c.theta, c.h1, c.h2, c.k_b, c.k_g))
    else:
        raise DomainError("side must be 'upper' or 'lower'")
    return {"side": side, "j": j, "points": n}, [(f"policy_{side}_j{j}.csv",
                                                  ("csv", ["u", "delta", "theta", "h1", "h2", "kb", "kg"], rows))]


def cmd_reservation(p, run, out):
    bank = _need(run, "type")
    res = K.reservation_utility_for(p, bank)
    arr = [{"j": n, "R": float(res.values[n]), "k": int(res.actions[n - 1])} for n in range(1, p.I + 1)]
    return {"type": bank, "reservation": arr}, []


POLICY_KEYS = {"kind", "j", "u_b", "bank", "strategy", "quantity", "c", "t_star", "lump", "theta", "pay"}


def _policy_from_file(p: ModelParams, path: str):
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise DomainError(f"cannot read policy file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DomainError(f"policy file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DomainError("policy file must hold a JSON object")
    unknown = set(doc) - POLICY_KEYS
    if unknown:
        raise DomainError(f"unknown policy keys: {sorted(unknown)}")
    kind = doc.get("kind")
    j = doc.get("j")
    if not isinstance(j, int) or not (1 <= j <= p.I):
        raise DomainError("policy needs an integer 'j' within the pool size")
    bank = doc.get("bank", "bad")
    strategy = doc.get("strategy", "recommended")
    quantity = doc.get("quantity", "bank")
    if quantity not in ("bank", "investor"):
        raise DomainError("quantity must be 'bank' or 'investor'")

    def num(key, default=None):
        v = doc.get(key, default)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise DomainError(f"policy field '{key}' must be a finite number")
        return float(v)

    x0 = [1.0]
    if kind == "upper":
        pol = S.UpperBoundaryPolicy(p, solve_pmh_all(p))
        x0 = [num("u_b")]
        geometry(p, j)._check(x0[0])
    elif kind == "lower":
        pol = S.LowerBoundaryPolicy(p)
        x0 = [num("u_b")]
        geometry(p, j)._check(x0[0])
    elif kind == "cutoff":
        d = BV.solve_nu(p, j, num("u_b"))
        pol = S.CutoffPolicy(p, j, d.cutoffs)
    elif kind == "short-term":
        pol = S.ShortTermPolicy(p, K.ShortTermContract(num("c"), num("t_star", 0.0), num("lump", 0.0)), j)
    elif kind == "keep-all":
        pol = S.KeepAllPolicy(p, num("lump", 0.0))
    elif kind == "constant":
        th = num("theta", 0.0)
        if not 0 <= th <= 1:
            raise DomainError("theta must lie in [0, 1]")
        pol = S.ConstantPolicy(p, th, num("pay", 0.0))
    else:
        raise DomainError("policy kind must be one of upper, lower, cutoff, short-term, keep-all, constant")
    return pol, j, x0, bank, strategy, quantity, doc


def cmd_simulate(p, run, out):
    path = _need(run, "policy")
    n = int(_need(run, "paths", 10000))
    seed = int(_need(run, "seed", 0))
    pol, j, x0, bank, strategy, quantity, doc = _policy_from_file(p, path)
    if n < 100:
        raise DomainError("need at least 100 paths")
    res = S.simulate(pol, j, x0, n, seed, bank, strategy, log_paths=(0,))
    vals = res.bank_pv if quantity == "bank" else res.investor
    est = S.McEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n)), n, seed)
    summary = {"policy": doc, **est.to_dict()}
    files = []
    if run.get("events"):
        log = res.logs[0]
        files.append((run["events"], ("csv", ["time", "event", "pool", "u_b", "u_g", "cumulative_payments"],
                                      [(t, ev, jj, a, b, c) for t, ev, jj, a, b, c in log.events])))
    return summary, files


def cmd_figure(p, run, out):
    j = _int_j(p, run)
    n = int(run.get("points", 401))
    u, lo, up = _region_rows(p, j, n)
    k = _kinks(p, j)
    markers = [("left", *k["left_endpoint"]), ("x*", *k["x_star"]), ("b_hat", *k["b_hat"])]
    if k["C"][0] > k["left_endpoint"][0]:
        markers.append(("C", *k["C"]))
    svg = svg_plot([("upper boundary", u, up), ("lower boundary", u, lo)], markers,
                   title=f"Credible set, {j} loan(s) left", xlabel="bad bank value", ylabel="good bank value")
    files = [(f"figure_j{j}.csv", ("csv", ["u_b", "lower", "upper"], zip(u, lo, up))),
             (f"figure_j{j}.svg", ("raw", svg))]
    return {"j": j, "kinks": k}, files


COMMANDS = {
    "validate": cmd_validate,
    "credible-set": cmd_credible_set,
    "pmh": cmd_pmh,
    "boundary-values": cmd_boundary_values,
    "solve-hjb": cmd_solve_hjb,
    "policy": cmd_policy,
    "reservation": cmd_reservation,
    "simulate": cmd_simulate,
    "figure": cmd_figure,
}

RUN_FLAGS = ("j", "points", "bank", "resolution", "j_max", "side", "type", "policy", "paths", "seed", "events")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="contractlab", description="Contracts for a bank of unknown efficiency running a loan pool.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with 'model' and optional 'run' objects")
        sp.add_argument("--out-dir", default=".", help="directory for CSV/JSON/SVG outputs")

    sp = sub.add_parser("validate", help="check the standing assumptions")
    common(sp)
    sp = sub.add_parser("credible-set", help="boundaries of the credible set")
    common(sp)
    sp.add_argument("--j", type=int)
    sp.add_argument("--points", type=int)
    sp = sub.add_parser("pmh", help="investor value when the bank always monitors")
    common(sp)
    sp.add_argument("--j", type=int)
    sp.add_argument("--points", type=int)
    sp = sub.add_parser("boundary-values", help="investor value on both boundaries")
    common(sp)
    sp.add_argument("--j", type=int)
    sp.add_argument("--points", type=int)
    sp = sub.add_parser("solve-hjb", help="interior value function on a grid")
    common(sp)
    sp.add_argument("--bank", choices=["good", "bad"])
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--j-max", dest="j_max", type=int)
    sp = sub.add_parser("policy", help="boundary contract controls")
    common(sp)
    sp.add_argument("--side", choices=["upper", "lower"])
    sp.add_argument("--j", type=int)
    sp.add_argument("--points", type=int)
    sp = sub.add_parser("reservation", help="reservation utilities")
    common(sp)
    sp.add_argument("--type", choices=["good", "bad"])
    sp = sub.add_parser("simulate", help="Monte Carlo value of a contract policy")
    common(sp)
    sp.add_argument("--policy")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--events", help="CSV file for the event log of the first path")
    sp = sub.add_parser("figure", help="credible-set figure data and SVG")
    common(sp)
    sp.add_argument("--j", type=int)
    sp.add_argument("--points", type=int)
    return ap


def _apply_threads():
    v = os.environ.get("CONTRACTLAB_THREADS")
    if not v:
        return
    try:
        n = int(v)
    except ValueError as exc:
        raise DomainError(f"CONTRACTLAB_THREADS must be an integer, got {v!r}") from exc
    if n < 1:
        raise DomainError("CONTRACTLAB_THREADS must be at least 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"contractlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        _apply_threads()
        cfg = load_config(args.config)
        p = ModelParams.from_dict(cfg["model"])
        run_cfg = _effective(args, cfg, RUN_FLAGS)
        effective = {"command": args.command, "model": p.to_dict(), "run": run_cfg}
        summary, files = COMMANDS[args.command](p, run_cfg, args.out_dir)
        # render everything before writing anything, so failures leave no partial outputs
        rendered = []
        for name, (kind, *payload) in files:
            if kind == "csv":
                text = csv_text(effective, *payload)
            elif kind == "json":
                text = dumps({"config": effective, **payload[0]}) + "\n"
            else:
                tag = html.escape(json.dumps(_jsonable(effective), sort_keys=True), quote=True)
                text = payload[0].replace("<svg ", f'<svg data-config="{tag}" ', 1)
            target = Path(name) if os.path.isabs(name) else Path(args.out_dir) / name
            rendered.append((target, text))
        for target, text in rendered:
            atomic_write(target, text)
        print(dumps({"config": effective, "outputs": [str(t) for t, _ in rendered], **summary}))
        return EXIT_OK
    except ConvergenceError as exc:
        print(f"contractlab: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DomainError, DependencyError, ValueError, KeyError, TypeError) as exc:
        print(f"contractlab: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
