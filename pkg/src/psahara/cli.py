"""Command line front-end for the utility, policy, and market tools.

Seven subcommands cover the pipeline end to end: raw utility validation
and envelope construction, policy solving, path simulation, price panel
backtesting, implied volatility, and curve extraction for plotting.
Every JSON document the tool writes is accepted back by the subcommand
that reads that format, and identical invocations produce byte-identical
outputs.

Exit codes: 0 success, 2 validation failure (error JSON on stderr),
64 usage, 66 missing input file.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .backtest import PricePanel, estimate_market, run_backtest, sharpe_ratio
from .envelope import RawPiecewiseUtility, concave_envelope, verify_envelope
from .market import MarketModel
from .montecarlo import SimConfig, martingale_check, simulate
from .policy import OptimalPolicy
from .utility import PiecewiseUtility, UtilityPiece, compose_with_map, incentive_contract
from .volatility import implied_vol


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract reserves 2 for
    # validation failures, so usage problems are rerouted to 64 instead.
    def error(self, message):
        raise _UsageError(self, message)


def _print_error(message: str):
    print(json.dumps({"error": message}, sort_keys=True), file=sys.stderr)


def _json_safe(obj):
    """Strict JSON has no Infinity/NaN literals; encode them as strings."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _load_json(path: str) -> dict:
    with open(_require_file(path), encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return doc


def _write_json(payload: dict, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"[OK] {path}")


def _utility_doc(doc: dict) -> dict:
    """Accept both a bare utility document and a wrapper that carries one."""
    if "pieces" not in doc and isinstance(doc.get("utility"), dict):
        return doc["utility"]
    return doc


def _parse_assignments(text: str, fields: tuple[str, ...], flag: str) -> dict[str, float]:
    values: dict[str, float] = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"{flag} expects comma-separated name=value pairs, got {part!r}")
        name, _, raw = part.partition("=")
        name = name.strip()
        if name not in fields:
            raise ValueError(f"{flag} got unknown field {name!r}; expected {', '.join(fields)}")
        if name in values:
            raise ValueError(f"{flag} sets {name!r} twice")
        try:
            values[name] = float(raw)
        except ValueError as exc:
            raise ValueError(f"{flag}: {name} is not a number: {raw!r}") from exc
    missing = [f for f in fields if f not in values]
    if missing:
        raise ValueError(f"{flag} is missing fields: {', '.join(missing)}")
    return values


def _parse_range(text: str) -> tuple[float, float]:
    lo_text, sep, hi_text = text.partition(":")
    if not sep:
        raise ValueError(f"--range expects lo:hi, got {text!r}")
    try:
        lo, hi = float(lo_text), float(hi_text)
    except ValueError as exc:
        raise ValueError(f"--range bounds must be numbers: {text!r}") from exc
    if not lo < hi:
        raise ValueError(f"--range needs lo < hi, got {text!r}")
    return lo, hi


def _float_cell(value: float) -> str:
    return repr(float(value))


def _write_csv(path: str, header: list[str], columns: list[np.ndarray]):
    rows = len(columns[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(rows):
            fh.write(",".join(_float_cell(col[i]) for col in columns) + "\n")
    print(f"[OK] {path}")


def _figure():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _save_png(fig, path: str):
    # a fixed dpi and stripped Software tag keep the bytes reproducible
    fig.savefig(path, dpi=150, metadata={"Software": None})
    print(f"[OK] {path}")


def _png_path(out: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + ".png"


def _load_policy(path: str) -> OptimalPolicy:
    doc = _load_json(path)
    missing = {"utility", "market", "y_star"} - set(doc)
    if missing:
        raise ValueError(f"policy document is missing fields: {sorted(missing)}")
    return OptimalPolicy.from_multiplier(
        utility=PiecewiseUtility.from_dict(doc["utility"]),
        market=MarketModel.from_dict(doc["market"]),
        y_star=float(doc["y_star"]),
    )


def _cmd_envelope(args) -> int:
    raw = RawPiecewiseUtility.from_dict(_utility_doc(_load_json(args.utility)))
    result = concave_envelope(raw)
    payload = {
        "utility": result.utility.to_dict(),
        "kinks": [float(k) for k in result.kinks],
        "bridges": [
            {
                "lower": b.lower,
                "upper": b.upper,
                "slope": b.slope,
                "value_lower": b.value_lower,
            }
            for b in result.bridges
        ],
    }
    if args.grid_check is not None:
        report = verify_envelope(result, rel_tol=args.grid_check)
        if not report["passed"]:
            raise ValueError(f"envelope grid check failed: {json.dumps(report, sort_keys=True)}")
        payload["grid_check"] = report
    _write_json(payload, args.out)
    return 0


def _policy_payload(policy: OptimalPolicy) -> dict:
    return {
        "x0": policy.x0,
        "y_star": policy.y_star,
        "budget_residual": abs(policy.budget() - policy.x0),
        "utility": policy.utility.to_dict(),
        "market": policy.market.to_dict(),
    }


def _cmd_policy(args) -> int:
    utility = PiecewiseUtility.from_dict(_utility_doc(_load_json(args.utility)))
    market_doc = _load_json(args.market)
    market = MarketModel.from_dict(market_doc.get("market", market_doc))
    policy = OptimalPolicy.solve(utility, market, args.x0)
    evaluation = None
    if args.eval is not None:
        state = _parse_assignments(args.eval, ("t", "xi"), "--eval")
        t, xi = state["t"], state["xi"]
        comp = policy.wealth_components(t, xi)
        terms = policy.portfolio(t, xi)
        evaluation = {
            "t": t,
            "xi": xi,
            "X_total": float(comp.total),
            "X_D": float(comp.atoms_total),
            "X_B": float(comp.anchors_total),
            "X_R": float(comp.growth_total),
            "X_Rbar": float(comp.hedge_total),
            "pi_total": [float(v) for v in terms.total],
            "pi_1": [float(v) for v in terms.merton],
            "pi_2": [float(v) for v in terms.adjustment],
            "pi_3": [float(v) for v in terms.kink],
            "pi_4": [float(v) for v in terms.anchor],
        }
    if args.out:
        _write_json(_policy_payload(policy), args.out)
    if evaluation is not None:
        print(json.dumps(_json_safe(evaluation), sort_keys=True, indent=2))
    elif not args.out:
        summary = {"x0": policy.x0, "y_star": policy.y_star}
        print(json.dumps(_json_safe(summary), sort_keys=True, indent=2))
    return 0


def _cmd_simulate(args) -> int:
    policy = _load_policy(args.policy)
    config = SimConfig(
        n_paths=args.paths, n_steps=args.steps, seed=args.seed, antithetic=args.antithetic
    )
    result = simulate(policy, config)
    payload = result.summary()
    payload["martingale"] = martingale_check(result)
    _write_json(payload, args.out)
    return 0


def _cmd_backtest(args) -> int:
    incentive = _parse_assignments(args.incentive, ("w", "v"), "--incentive")
    panel = PricePanel.from_csv(_require_file(args.prices))
    if args.est_days:
        if not 1 <= args.est_days <= panel.n_days - 2:
            raise ValueError(
                f"--est-days must leave at least two trading rows, got {args.est_days} "
                f"for a {panel.n_days}-row panel"
            )
        est_panel = panel.window(0, args.est_days + 1)
        trade_panel = panel.window(args.est_days, panel.n_days)
    else:
        est_panel = trade_panel = panel
    horizon = (trade_panel.n_days - 1) * args.h
    rate = args.rf if args.rate is None else args.rate
    norms = None
    if args.implied_norms is not None:
        try:
            norms = [float(v) for v in args.implied_norms.split(",")]
        except ValueError as exc:
            raise ValueError(f"--implied-norms must be comma-separated numbers: {exc}") from exc
    market = estimate_market(
        est_panel,
        horizon=horizon,
        rate=rate,
        h=args.h,
        estimator=args.estimator,
        implied_norms=norms,
    )
    benchmark = args.benchmark
    if benchmark is None:
        benchmark = args.x0 * math.exp(rate * horizon)
    contract = incentive_contract(
        participation=incentive["w"], base_share=incentive["v"], benchmark=benchmark
    )
    base = PiecewiseUtility((), (UtilityPiece(alpha=args.alpha, beta=args.beta, d=args.d, gamma=1.0),))
    envelope = concave_envelope(compose_with_map(base, contract))
    policy = OptimalPolicy.solve(envelope.utility, market, args.x0)
    report = run_backtest(policy, trade_panel, h=args.h)
    rf_step = math.expm1(args.rf * args.h)
    payload = {
        "config": {
            "prices": args.prices,
            "incentive": {"w": incentive["w"], "v": incentive["v"]},
            "alpha": args.alpha,
            "beta": args.beta,
            "d": args.d,
            "estimator": args.estimator,
            "rf": args.rf,
            "rate": rate,
            "x0": args.x0,
            "h": args.h,
            "est_days": args.est_days,
            "benchmark": benchmark,
        },
        "market": market.to_dict(),
        "y_star": policy.y_star,
        "summary": report.summary(),
        "sharpe": sharpe_ratio(report, risk_free=rf_step),
        "paths": {
            "times": report.times.tolist(),
            "wealth": report.wealth.tolist(),
            "kernel": report.kernel.tolist(),
            "holdings": report.holdings.tolist(),
            "daily_returns": report.daily_returns.tolist(),
        },
    }
    _write_json(payload, args.out)
    plt = _figure()
    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    ax.plot(report.times, report.wealth, lw=1.2)
    ax.set_xlabel("t (years)")
    ax.set_ylabel("wealth")
    ax.set_title("backtest wealth path")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_png(fig, _png_path(args.out))
    plt.close(fig)
    return 0


def _cmd_implied_vol(args) -> int:
    vol = implied_vol(args.price, spot=args.S, strike=args.K, rate=args.r, maturity=args.T)
    payload = {
        "implied_vol": vol,
        "price": args.price,
        "S": args.S,
        "K": args.K,
        "r": args.r,
        "T": args.T,
    }
    if args.out:
        _write_json(payload, args.out)
    else:
        print(json.dumps(_json_safe(payload), sort_keys=True, indent=2))
    return 0


def _cmd_plot_data(args) -> int:
    if args.sweep != "xi":
        raise ValueError(f"--sweep supports only 'xi', got {args.sweep!r}")
    policy = _load_policy(args.policy)
    lo, hi = _parse_range(args.range)
    if args.log:
        if lo <= 0:
            raise ValueError("--log needs a positive range lower bound")
        xs = np.geomspace(lo, hi, args.points)
    else:
        xs = np.linspace(lo, hi, args.points)
    comp = policy.wealth_components(args.t, xs)
    terms = policy.portfolio(args.t, xs)
    total = comp.total
    pi_total = terms.total
    n_assets = pi_total.shape[-1]
    header = ["xi", "X_total", "X_D", "X_B", "X_R", "X_Rbar"]
    columns = [
        xs,
        total,
        comp.atoms_total,
        comp.anchors_total,
        comp.growth_total,
        comp.hedge_total,
    ]
    term_arrays = (terms.merton, terms.adjustment, terms.kink, terms.anchor)
    for j in range(n_assets):
        suffix = "" if n_assets == 1 else f"_{j + 1}"
        for k, arr in enumerate(term_arrays, start=1):
            header.append(f"pi_{k}{suffix}")
            columns.append(arr[:, j])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(total != 0.0, pi_total.sum(axis=-1) / total, np.nan)
    header.append("pi_over_X")
    columns.append(ratio)
    _write_csv(args.out, header, columns)

    plt = _figure()
    fig, (ax_top, ax_bot) = plt.subplots(2, 1, figsize=(8.0, 6.0), sharex=True)
    ax_top.plot(xs, total, lw=1.4, label="X_total")
    ax_top.plot(xs, comp.growth_total, lw=0.9, label="X_R")
    ax_top.plot(xs, comp.hedge_total, lw=0.9, label="X_Rbar")
    ax_top.plot(xs, comp.anchors_total, lw=0.9, label="X_B")
    ax_top.plot(xs, comp.atoms_total, lw=0.9, label="X_D")
    ax_top.set_ylabel("wealth")
    ax_top.legend(loc="best", fontsize=8)
    ax_top.grid(True, alpha=0.3)
    ax_bot.plot(xs, ratio, lw=1.2, color="tab:red")
    ax_bot.set_xlabel("xi")
    ax_bot.set_ylabel("pi / X")
    ax_bot.grid(True, alpha=0.3)
    if args.log:
        ax_bot.set_xscale("log")
    fig.tight_layout()
    _save_png(fig, _png_path(args.out))
    plt.close(fig)
    return 0


def _cmd_validate(args) -> int:
    raw = RawPiecewiseUtility.from_dict(_utility_doc(_load_json(args.utility)))
    findings = raw.report()
    payload = {"findings": findings, "count": len(findings)}
    print(json.dumps(_json_safe(payload), sort_keys=True, indent=2))
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="psahara", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")

    p = sub.add_parser("envelope", help="concavify a raw piecewise utility")
    p.add_argument("--utility", required=True, help="raw utility JSON")
    p.add_argument("--out", required=True, help="envelope JSON to write")
    p.add_argument("--grid-check", type=float, default=None, metavar="RTOL",
                   help="verify the envelope on a dense grid at this relative tolerance")
    p.set_defaults(run=_cmd_envelope)

    p = sub.add_parser("policy", help="solve the optimal policy for a budget")
    p.add_argument("--utility", required=True, help="concave utility JSON (bare or envelope output)")
    p.add_argument("--market", required=True, help="market JSON")
    p.add_argument("--x0", type=float, required=True, help="initial wealth")
    p.add_argument("--out", default=None, help="policy JSON to write")
    p.add_argument("--eval", default=None, metavar="t=...,xi=...",
                   help="print wealth and portfolio at one state")
    p.set_defaults(run=_cmd_policy)

    p = sub.add_parser("simulate", help="Monte Carlo paths under a solved policy")
    p.add_argument("--policy", required=True, help="policy JSON from the policy subcommand")
    p.add_argument("--paths", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--antithetic", action="store_true")
    p.add_argument("--out", required=True, help="summary JSON to write")
    p.set_defaults(run=_cmd_simulate)

    p = sub.add_parser("backtest", help="daily-rebalanced backtest on a price panel")
    p.add_argument("--prices", required=True, help="CSV panel: date,asset1,asset2,...")
    p.add_argument("--incentive", required=True, metavar="w=...,v=...",
                   help="participation rate w and base share v")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--estimator", choices=("historical", "implied", "mle"), default="historical")
    p.add_argument("--rf", type=float, default=0.0, help="annualized risk-free rate")
    p.add_argument("--rate", type=float, default=None,
                   help="market short rate (defaults to --rf)")
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--h", type=float, default=1.0 / 252.0, help="observation spacing in years")
    p.add_argument("--est-days", type=int, default=0,
                   help="fit the estimator on the first N rows and trade on the rest")
    p.add_argument("--benchmark", type=float, default=None,
                   help="incentive benchmark B_T (defaults to x0*exp(rate*T))")
    p.add_argument("--implied-norms", default=None, metavar="V1,V2,...",
                   help="per-asset implied vols for --estimator implied")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.set_defaults(run=_cmd_backtest)

    p = sub.add_parser("implied-vol", help="invert a Black-Scholes put price")
    p.add_argument("--S", type=float, required=True, help="spot")
    p.add_argument("--K", type=float, required=True, help="strike")
    p.add_argument("--r", type=float, required=True, help="rate")
    p.add_argument("--T", type=float, required=True, help="maturity in years")
    p.add_argument("--price", type=float, required=True, help="observed put price")
    p.add_argument("--out", default=None, help="JSON to write (default: stdout)")
    p.set_defaults(run=_cmd_implied_vol)

    p = sub.add_parser("plot-data", help="tabulate policy curves for plotting")
    p.add_argument("--policy", required=True, help="policy JSON from the policy subcommand")
    p.add_argument("--sweep", default="xi", help="sweep variable (only 'xi')")
    p.add_argument("--range", required=True, metavar="LO:HI")
    p.add_argument("--log", action="store_true", help="log-spaced sweep")
    p.add_argument("--t", type=float, default=0.0, help="evaluation time")
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--out", required=True, help="CSV to write")
    p.set_defaults(run=_cmd_plot_data)

    p = sub.add_parser("validate", help="report structural problems in a raw utility")
    p.add_argument("--utility", required=True, help="raw utility JSON")
    p.set_defaults(run=_cmd_validate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 64
    try:
        args = parser.parse_args(argv)
        if getattr(args, "run", None) is None:
            parser.print_usage(sys.stderr)
            return 64
        return args.run(args)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 64
    except FileNotFoundError as exc:
        _print_error(str(exc))
        return 66
    except ValueError as exc:
        _print_error(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
