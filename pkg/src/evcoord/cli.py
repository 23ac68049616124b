"""Command-line entry point: ``evcoord <command> --config scenario.toml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, coordination, grid, report, scenario
from .flex import FlexibilityError, OutOfRegionError, UnservableSession, disaggregate, validate_dispatch
from .station import StationInfeasible

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3

log = logging.getLogger("evcoord")


class CommandError(RuntimeError):
    def __init__(self, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario TOML file")
    common.add_argument("--seed", type=int, help="override the generator seed")
    common.add_argument("--rho", type=float, help="price step / penalty weight ($/kW^2h)")
    common.add_argument("--delta", type=float, help="stopping threshold on the residuals")
    common.add_argument("--w", type=float, help="flexibility regularization weight")
    common.add_argument("--max-iter", type=int, help="coordination iteration cap")
    common.add_argument("--out-dir", type=Path, default=Path("out"), help="directory for artifacts (default: out)")
    common.add_argument("--figures", action="store_true", help="also render PNG figures")
    common.add_argument("--workers", type=int, default=1, help="threads for station solves")
    common.add_argument("--price-only-stop", action="store_true", help="stop on the price change alone")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evcoord", description="Two-stage EV charging station coordination on a radial feeder.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write the reference scenario files")
    g.add_argument("--placement", choices=["near", "far"], default="near")
    g.add_argument("--null", action="store_true", help="single empty station, no load")
    sub.add_parser("flex", parents=[common], help="stage-1 envelopes per station")
    d = sub.add_parser("disaggregate", parents=[common], help="per-EV dispatch for an aggregate trajectory")
    d.add_argument("--station", required=True)
    d.add_argument("--trajectory", type=Path, required=True, help="CSV with columns t, p_kw")
    sub.add_parser("coordinate", parents=[common], help="run the price coordination loop")
    sub.add_parser("baseline", parents=[common], help="uniform-price stand-alone operation")
    sub.add_parser("centralized", parents=[common], help="joint problem and its coupling duals")
    sub.add_parser("compare", parents=[common], help="proposed vs baseline cost table")
    a = sub.add_parser("audit", parents=[common], help="SOCP gaps and limit checks on a saved state")
    a.add_argument("--state-dir", type=Path, required=True)
    a.add_argument("--tol", type=float, default=1e-6)
    return p


def _scenario(args) -> scenario.Scenario:
    if args.config is None:
        raise CommandError("--config is required for this command", EXIT_USAGE)
    cfg = scenario.load_config(args.config)
    for key in ("rho", "delta", "w", "max_iter"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if cfg.rho <= 0 or cfg.delta <= 0 or cfg.w < 0 or cfg.max_iter < 1:
        raise CommandError("need rho > 0, delta > 0, w >= 0, max_iter >= 1", EXIT_USAGE)
    return scenario.load_scenario(cfg, seed=args.seed)


def _params(scn, args) -> dict:
    c = scn.config
    return {"seed": c.seed, "w": c.w, "rho": c.rho, "delta": c.delta, "max_iter": c.max_iter, "price_only_stop": bool(args.price_only_stop)}


def cmd_generate(args) -> int:
    seed = 1 if args.seed is None else args.seed
    if args.null:
        scn = scenario.null_scenario(scenario.ScenarioConfig(seed=seed, generator="null"))
    else:
        scn = scenario.reference_scenario(seed, args.placement)
    path = scenario.save_scenario(scn, args.out_dir)
    print(path)
    return EXIT_OK


def cmd_flex(args) -> int:
    scn = _scenario(args)
    out = args.out_dir
    regions = scn.regions()
    summary = {}
    for sid, reg in regions.items():
        report.write_envelope(out / f"envelope_{sid}.csv", reg)
        summary[sid] = {"total_width_kw": reg.total_width(), "n_ev": len(scn.fleets[sid].sessions)}
    report.write_json(out / "flex_summary.json", {"command": "flex", "params": _params(scn, args), "stations": summary})
    if args.figures:
        from . import plotting

        plotting.envelopes(regions, out / "envelopes.png")
    return EXIT_OK


def cmd_disaggregate(args) -> int:
    scn = _scenario(args)
    if args.station not in scn.fleets:
        raise CommandError(f"unknown station {args.station!r}", EXIT_USAGE)
    fleet = scn.fleets[args.station]
    reg = scn.regions()[args.station]
    traj = report.read_trajectory(args.trajectory)
    dispatch = disaggregate(reg, traj)
    vr = validate_dispatch(fleet, dispatch)
    report.write_dispatch(args.out_dir / f"dispatch_{args.station}.csv", dispatch)
    report.write_json(args.out_dir / f"violations_{args.station}.json", report.violation_payload(vr))
    if not vr.ok:
        raise CommandError(f"dispatch violates constraints by {vr.max_violation:.3g}")
    return EXIT_OK


def _write_run(out, scn, net, settle, state, decisions, prices, dispatches=None):
    report.write_settlement(out / "settlement.csv", settle)
    report.write_losses(out / "losses.csv", state, net)
    report.write_decisions(out / "decisions.csv", decisions, scn.stations)
    report.write_state(out / "state", state, net)
    if prices is not None:
        report.write_prices(out / "prices.csv", prices)
    for sid, disp in (dispatches or {}).items():
        report.write_dispatch(out / f"dispatch_{sid}.csv", disp)


def _coordinate(scn, args, system):
    c = scn.config
    return coordination.run_coordination(
        system, rho=c.rho, delta=c.delta, max_iter=c.max_iter, workers=args.workers, check_schedules=not args.price_only_stop
    )


def cmd_coordinate(args) -> int:
    scn = _scenario(args)
    system = scn.system()
    res = _coordinate(scn, args, system)
    out = args.out_dir
    report.write_trace(out / "trace.csv", res.trace, system.ids)
    _write_run(out, scn, system.net, res.settlement, res.state, res.decisions, res.prices, res.dispatches)
    summary = {
        "command": "coordinate",
        "params": _params(scn, args),
        "converged": res.converged,
        "iterations": res.iterations,
        "final_residual": res.trace[-1].residual if res.trace else None,
        "max_socp_gap": float(np.max(np.abs(grid.socp_gap(res.state)))) if res.state.l.size else 0.0,
        "settlement": report.settlement_payload(res.settlement),
    }
    report.write_json(out / "summary.json", summary)
    if args.figures:
        from . import plotting

        plotting.residuals(res.trace, out / "residuals.png")
        plotting.prices(res.prices, out / "prices.png", reference=system.net.price_buy)
        plotting.station_voltages(res.state, system.net, out / "voltages.png")
        plotting.line_losses(res.state, system.net, out / "losses.png")
        plotting.station_power(res.decisions, scn.stations, out / "station_power.png")
    if not res.converged:
        raise CommandError(f"no convergence within {scn.config.max_iter} iterations", EXIT_NOT_CONVERGED)
    return EXIT_OK


def cmd_baseline(args) -> int:
    scn = _scenario(args)
    system = scn.system()
    res = coordination.run_baseline(system)
    out = args.out_dir
    _write_run(out, scn, system.net, res.settlement, res.state, res.decisions, None, res.dispatches)
    report.write_json(out / "summary.json", {"command": "baseline", "params": _params(scn, args), "settlement": report.settlement_payload(res.settlement)})
    if args.figures:
        from . import plotting

        plotting.line_losses(res.state, system.net, out / "losses.png")
        plotting.station_power(res.decisions, scn.stations, out / "station_power.png")
    return EXIT_OK


def cmd_centralized(args) -> int:
    scn = _scenario(args)
    system = scn.system()
    res = coordination.solve_centralized(system)
    out = args.out_dir
    _write_run(out, scn, system.net, res.settlement, res.state, res.decisions, res.prices)
    report.write_json(
        out / "summary.json",
        {"command": "centralized", "params": _params(scn, args), "objective": res.objective, "settlement": report.settlement_payload(res.settlement)},
    )
    if args.figures:
        from . import plotting

        plotting.prices(res.prices, out / "prices.png", reference=system.net.price_buy)
    return EXIT_OK


def cmd_compare(args) -> int:
    scn = _scenario(args)
    system = scn.system()
    prop = _coordinate(scn, args, system)
    base = coordination.run_baseline(system)
    out = args.out_dir
    report.write_comparison(out / "comparison.csv", base.settlement, prop.settlement)
    report.write_losses(out / "losses_proposed.csv", prop.state, system.net)
    report.write_losses(out / "losses_baseline.csv", base.state, system.net)
    red = coordination.reduction(base.settlement, prop.settlement)
    report.write_json(
        out / "summary.json",
        {
            "command": "compare",
            "params": _params(scn, args),
            "converged": prop.converged,
            "iterations": prop.iterations,
            "baseline_total": base.settlement.total,
            "proposed_total": prop.settlement.total,
            "reduction": red,
        },
    )
    if args.figures:
        from . import plotting

        plotting.cost_comparison(base.settlement, prop.settlement, out / "costs.png")
        plotting.line_losses(prop.state, system.net, out / "losses.png", other=base.state)
    print(f"reduction {100 * red:.3f}%")
    if not prop.converged:
        raise CommandError(f"no convergence within {scn.config.max_iter} iterations", EXIT_NOT_CONVERGED)
    return EXIT_OK


def cmd_audit(args) -> int:
    scn = _scenario(args)
    net = scn.network()
    state = report.read_state(args.state_dir, net)
    payload = report.audit_payload(state, net, args.tol)
    report.write_json(args.out_dir / "audit.json", payload)
    print(json.dumps({"ok": payload["ok"], "max_gap": payload["max_gap"]}))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "flex": cmd_flex,
    "disaggregate": cmd_disaggregate,
    "coordinate": cmd_coordinate,
    "baseline": cmd_baseline,
    "centralized": cmd_centralized,
    "compare": cmd_compare,
    "audit": cmd_audit,
}


def _fail(exc, code) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CommandError as exc:
        return _fail(exc, exc.code)
    except (scenario.ConfigError, grid.NetworkConfigError, UnservableSession, OutOfRegionError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (StationInfeasible, grid.NetworkInfeasible, FlexibilityError) as exc:
        return _fail(exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
