"""Command-line entry points: single runs, sweeps, and plots."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, plots, scenarios
from .world import Scenario, load_scenario, save_scenario


def _resolve_scenario(spec: str, bias: float | None) -> Scenario:
    if spec in scenarios.BUILDERS:
        kwargs = {} if bias is None else {"bias": bias}
        return scenarios.build(spec, **kwargs)
    path = Path(spec)
    if path.exists():
        scen = load_scenario(path)
        if bias is not None:
            scen = harness.scale_attacks(scen, bias)
        return scen
    raise SystemExit(
        f"error: {spec!r} is neither a built-in scenario "
        f"({sorted(scenarios.BUILDERS)}) nor a YAML file"
    )


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _cmd_simulate(args) -> int:
    scen = _resolve_scenario(args.scenario, args.bias)
    config = harness.RunConfig(steps=args.steps)
    record = harness.run_scenario(scen, args.seed, config)
    out = Path(args.out)
    harness.write_run_csvs(record, out)
    save_scenario(scen, out / "scenario.yaml")
    print(f"scenario     {record.scenario}")
    print(f"steps        {record.steps_run}")
    print(f"final mode   {record.modes[-1]}")
    for c in record.mode_changes:
        print(f"  step {c.step:5d}  {c.source.value} -> {c.target.value}"
              f"  ({c.trigger}, {c.live} live)")
    for v in record.verdicts:
        word = "accepted" if v.accepted else "rejected"
        print(f"  step {v.step:5d}  {v.viewpoint} {word}: {v.reason}")
    print(f"blacklist    {sorted(record.blacklist) or '(empty)'}")
    print(f"rms pos err  {record.rms_position_error():.3f} m")
    if record.failed:
        print(f"FAILED: {record.failed}", file=sys.stderr)
        return 1
    return 0


def _cmd_sweep(args) -> int:
    scen = _resolve_scenario(args.scenario, None)
    spec = harness.SweepSpec(
        scenario=scen,
        alpha_chi_grid=_floats(args.alpha_chi),
        beta_grid=_floats(args.beta),
        alpha_merge_grid=_floats(args.alpha_merge),
        bias_grid=_floats(args.bias),
        realizations=args.realizations,
        master_seed=args.master_seed,
        steps=args.steps,
        jobs=args.jobs,
    )
    rows = harness.run_sweep(spec)
    out = Path(args.out) / "sweep_results.csv"
    harness.write_sweep_csv(rows, out)
    print(f"wrote {out} ({len(rows)} cells)")
    return 0


def _cmd_plot(args) -> int:
    wrote = []
    if args.sweep_csv:
        wrote.append(plots.plot_sweep(args.sweep_csv,
                                      Path(args.out) / "sweep_rates.png"))
    if args.run_dir:
        scen = None
        yaml_path = Path(args.run_dir) / "scenario.yaml"
        if args.scenario:
            scen = _resolve_scenario(args.scenario, None)
        elif yaml_path.exists():
            scen = load_scenario(yaml_path)
        wrote.extend(plots.plot_run(args.run_dir, args.out, scen))
    if not wrote:
        raise SystemExit("error: nothing to plot; pass --sweep-csv "
                         "and/or --run-dir")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resnav",
        description="Resilient navigation stack: closed-loop simulation, "
                    "detector operating-point sweeps, and plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one closed-loop realization")
    sim.add_argument("--scenario", default="patrol-loop",
                     help="built-in name or scenario YAML path")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--steps", type=int, default=460)
    sim.add_argument("--bias", type=float, default=None,
                     help="attack magnitude in metres (0 disables attacks)")
    sim.add_argument("--out", default="out/run")
    sim.set_defaults(func=_cmd_simulate)

    swp = sub.add_parser("sweep", help="Monte-Carlo FPR/TPR grid")
    swp.add_argument("--scenario", default="circle-sweep")
    swp.add_argument("--alpha-chi", default="0.90,0.9545,0.99")
    swp.add_argument("--beta", default="0.90,0.999,0.9999")
    swp.add_argument("--alpha-merge", default="0.0995")
    swp.add_argument("--bias", default="0,1,3,5",
                     help="attack magnitudes; 0 rows measure FPR")
    swp.add_argument("--realizations", type=int, default=30)
    swp.add_argument("--master-seed", type=int, default=0)
    swp.add_argument("--steps", type=int, default=350)
    swp.add_argument("--jobs", type=int, default=1)
    swp.add_argument("--out", default="out/sweep")
    swp.set_defaults(func=_cmd_sweep)

    plo = sub.add_parser("plot", help="render figures from CSV artifacts")
    plo.add_argument("--sweep-csv", default=None)
    plo.add_argument("--run-dir", default=None)
    plo.add_argument("--scenario", default=None,
                     help="overlay geometry (defaults to the run's YAML)")
    plo.add_argument("--out", default="out/plots")
    plo.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
