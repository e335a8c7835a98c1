"""Command-line entry point: ``cwm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 ordering check failed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import storage

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out() -> str | None:
    return os.environ.get("CWM_OUTPUT_ROOT")


def _out_path(args, *sub) -> Path:
    out = args.output or _default_out()
    if out is None:
        raise UsageError("no output directory: pass -o or set CWM_OUTPUT_ROOT")
    return Path(out, *sub)


def _echo(args, out: Path) -> None:
    """Record the invocation next to its outputs."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: (v if isinstance(v, (bool, int, float, str)) else str(v)) for k, v in vars(args).items()
           if k not in ("func", "verbose") and v is not None}
    storage.dump_json({"command": args.command, "args": cfg, "version": 1}, out / "config.json")


def _on_off(v: str) -> bool:
    v = v.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _bins(v: str):
    from .environment import parse_bins
    try:
        return parse_bins(v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def cmd_gen_data(args) -> int:
    from .environment import EnvConfig, generate_dataset
    cfg = EnvConfig(bins_per_agent=args.bins, noise_std=args.noise_std, episode_length=args.steps,
                    action_limit=args.action_limit, seed=args.seed)
    out = _out_path(args)
    # short CLI episodes are allowed to clip; the experiment harness never does
    generate_dataset(cfg, args.episodes, allow_clipping=True).save(out)
    _echo(args, out)
    print(f"wrote {args.episodes} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .environment import Dataset
    from .training import TrainingConfig, fit
    data = Dataset.load(args.data)
    cfg = TrainingConfig(condition=args.condition, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.lr, w_kld=args.w_kld, w_nce=args.w_nce, tau=args.tau,
                         grad_clip=args.grad_clip)
    out = _out_path(args)
    out.mkdir(parents=True, exist_ok=True)
    storage.dump_json({"training": cfg.to_dict(), "env": data.cfg.to_dict(), "data": str(args.data), "version": 1},
                      out / "config.json")
    _, history = fit(data, cfg, out)
    if history:
        print(f"final total_A={history[-1].total_A:.4f}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .environment import Dataset, EnvConfig
    from .evaluation import append_result, evaluate_condition, read_results
    from .harness import check_orderings
    from .training import load_checkpoint
    team, env_cfg = load_checkpoint(args.checkpoint)
    if env_cfg is None:
        env_cfg = EnvConfig()
    test = Dataset.load(args.test_data) if args.test_data else None
    summary, rec = evaluate_condition(team, env_cfg, args.trials, args.communication, seed=args.seed,
                                      window=args.window, test_data=test)
    out = _out_path(args)
    _echo(args, out)
    tag = "on" if args.communication else "off"
    rec.save(out / f"rollout_{tag}")
    storage.dump_json({**summary.to_dict(), "checkpoint": str(args.checkpoint)}, out / f"summary_{tag}.json")
    results = Path(args.results) if args.results else out / "results.csv"
    append_result(results, summary)
    print(f"{summary.condition} bins={summary.bins} com={tag} mean={summary.mean:.4f} std={summary.std:.4f} "
          f"excluded={summary.exclusions} rsa={summary.rsa_mean:.4f}")
    if args.assert_ordering:
        failed = False
        for chk in check_orderings(read_results(results)):
            print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.detail}")
            failed |= not chk.passed
        if failed:
            return EXIT_CHECK
    return EXIT_OK


def cmd_analyze_rsa(args) -> int:
    import csv
    from .environment import Dataset
    from .evaluation import rsa_for_team
    from .harness import export_message_example
    from .training import load_checkpoint
    team, _ = load_checkpoint(args.checkpoint)
    data = Dataset.load(args.data)
    per = rsa_for_team(team, data, args.seed)
    out = _out_path(args)
    _echo(args, out)
    T = data.cfg.episode_length
    with (out / "rsa.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "stream", "episode", "spearman_rho", "n_pairs"])
        for stream, vals in per.items():
            for i, v in enumerate(vals):
                w.writerow([team.condition, stream, i, repr(v), T * (T - 1) // 2])
    export_message_example(team, data, out / "messages_example", args.example, args.seed)
    for stream, vals in per.items():
        print(f"{stream}: mean rho={np.mean(vals):.4f} over {len(vals)} episodes")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .harness import render_figures
    out = _out_path(args)
    _echo(args, out)
    paths = render_figures(args.results, out, args.format, args.messages)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_run_plan(args) -> int:
    from .harness import ExperimentPlan, check_orderings, run_plan
    from .evaluation import read_results
    if args.plan:
        plan = ExperimentPlan.load(args.plan)
    elif args.paper:
        plan = ExperimentPlan.paper()
    else:
        plan = ExperimentPlan.scaled()
    root = _out_path(args)
    print(f"plan: {len(list(plan.cells()))} cells, ~{plan.estimated_hours():.1f} h single-core")
    if args.dry_run:
        return EXIT_OK
    results = run_plan(plan, root, resume=not args.no_resume, jobs=args.jobs, figure_format=args.format)
    for chk in check_orderings(read_results(results)):
        print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.detail}")
    print(f"results: {results}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cwm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--bins", type=_bins, default="inf")
    g.add_argument("--episodes", type=int, default=2000)
    g.add_argument("--steps", type=int, default=200)
    g.add_argument("--noise-std", type=float, default=0.01)
    g.add_argument("--action-limit", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one condition")
    t.add_argument("--condition", required=True, type=str.lower, choices=["ec", "bc", "nc", "baseline"])
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=500)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--w-kld", type=float, default=0.01)
    t.add_argument("--w-nce", type=float, default=0.005)
    t.add_argument("--tau", type=float, default=2.0)
    t.add_argument("--grad-clip", type=float, default=100.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--communication", type=_on_off, default=True)
    e.add_argument("--window", type=int, default=10)
    e.add_argument("--test-data", help="held-out expert episodes for RSA")
    e.add_argument("--results", help="results table to append to (default <out>/results.csv)")
    e.add_argument("--assert-ordering", action="store_true", help="exit 3 if an expected ordering fails")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("analyze-rsa", help="RSA of teacher-forced messages against P")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--example", type=int, default=0, help="episode exported for the message figure")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_analyze_rsa)

    pl = sub.add_parser("plot", help="render figures from a results table")
    pl.add_argument("--results", required=True)
    pl.add_argument("--messages", help="messages_example directory from analyze-rsa")
    pl.add_argument("--format", default="png", choices=["png", "pdf", "svg"])
    pl.add_argument("-o", "--output")
    pl.set_defaults(func=cmd_plot)

    rp = sub.add_parser("run-plan", help="full sweep of conditions x bins x seeds")
    rp.add_argument("plan", nargs="?", help="plan JSON file")
    preset = rp.add_mutually_exclusive_group()
    preset.add_argument("--scaled", action="store_true", help="desk-scale preset (default)")
    preset.add_argument("--paper", action="store_true", help="full replication settings")
    rp.add_argument("--jobs", type=int, default=1)
    rp.add_argument("--no-resume", action="store_true", help="retrain even if a matching checkpoint exists")
    rp.add_argument("--dry-run", action="store_true", help="print the plan size and time estimate only")
    rp.add_argument("--format", default="png", choices=["png", "pdf", "svg"])
    rp.add_argument("-o", "--output")
    rp.set_defaults(func=cmd_run_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cwm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"cwm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
