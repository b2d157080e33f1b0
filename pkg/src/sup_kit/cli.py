"""``sup-kit`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import harness, oracle
from .config import load_config

PHASE_COMMANDS = ("gen-demos", "train-wm", "synth", "train-scheduler", "eval")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_phase(args):
    cfg = _config(args)
    variants = [args.variant] if args.variant else None
    ran = harness.run_phase(cfg, args.out, args.command, force=args.force, variants=variants, trials=args.trials)
    path = os.path.join(args.out, harness.ARTIFACTS[args.command])
    print(f"{args.command}: {'wrote' if ran else 'up to date'} {path}")
    if args.command == "eval":
        with open(os.path.join(args.out, "report.csv")) as f:
            sys.stdout.write(f.read())
    return 0


def cmd_case_study(args):
    cfg = _config(args)
    variant = args.variant or "sup"
    kind = variant.split("-")[0]
    wm = harness.load_wm(args.out) if kind == "mpc" else None
    nets = harness.load_scheduler(args.out) if kind == "sup" else None
    rows, ep = harness.case_study(variant, args.task, args.case_seed, cfg, wm, nets)
    path = os.path.join(args.out, f"case_study_{variant}_{args.task}.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["chunk", "k", "phase", "contact"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['chunk']:3d}  k={r['k']}  {r['phase']:<10s} {'contact' if r['contact'] else ''}")
    print(f"success={ep.success} steps={ep.length} -> {path}")
    return 0


def verify_theory(trials=None):
    n_pen = trials or 500
    n_dom = trials or 1000
    pen_fail = oracle.penalty_bound_suite(n_pen)
    thr = oracle.lower_bound_threshold(0.9, 4)
    lb = oracle.lower_bound_instance(0.9, 4)
    checked, dom_bad = oracle.chunk_dominance_suite(n_dom)
    flagged = oracle.verify_chunk_dominance(oracle.premise_violating_instance())
    trap = oracle.trap_instance()
    pen = trap.penalized(1.1 * oracle.min_penalty_bound(trap.k_max, trap.gamma))
    rates, ret = oracle.brute_force_scheduler(pen, 2)
    return {
        "penalty_bound": {"instances": n_pen, "counterexamples": len(pen_fail)},
        "lower_bound": {"threshold": thr,
                        "below": oracle.verify_penalty_bound(lb, thr - 0.5)["zero_violation"],
                        "above": oracle.verify_penalty_bound(lb, thr + 0.5)["zero_violation"]},
        "chunk_dominance": {"instances": checked, "counterexamples": len(dom_bad),
                            "flagged_premise_holds": flagged["premise_holds"],
                            "flagged_conclusion_holds": flagged["conclusion_holds"]},
        "trap": {"optimum_rates": [int(k) for k in rates], "optimum_return": ret,
                 "greedy_return": oracle.policy_return(pen, oracle.greedy_policy(trap))},
    }


def cmd_verify_theory(args):
    rep = verify_theory(args.trials)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "theory.json")
    with open(path, "w") as f:
        json.dump(rep, f, indent=1, sort_keys=True, default=float)
        f.write("\n")
    print(json.dumps(rep, indent=1, sort_keys=True, default=float))
    ok = (rep["penalty_bound"]["counterexamples"] == 0 and rep["chunk_dominance"]["counterexamples"] == 0
          and not rep["lower_bound"]["below"] and not rep["chunk_dominance"]["flagged_premise_holds"])
    return 0 if ok else 1


def cmd_accept(args):
    from .acceptance import Context, run_all

    only = {int(x) for x in args.criteria.split(",")} if args.criteria else None
    ctx = Context(os.path.join(args.out, "accept"), args.config)
    results = run_all(ctx, only)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="sup-kit", description="Learned per-chunk speedup scheduler toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (unknown keys are errors)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--force", action="store_true", help="recompute even if the artifact is current")
    common.add_argument("--out", default="runs/default", help="artifact directory")
    common.add_argument("--variant", help="base | ds-<k> | mpc-<eps> | sup")
    common.add_argument("--trials", type=int, help="evaluation trials per task")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PHASE_COMMANDS:
        s = sub.add_parser(name, parents=[common], help=f"run the {name} phase")
        s.set_defaults(func=cmd_phase)
    s = sub.add_parser("case-study", parents=[common], help="per-chunk rate trace of one episode")
    s.add_argument("--task", default="fold")
    s.add_argument("--case-seed", type=int, default=0, help="episode seed")
    s.set_defaults(func=cmd_case_study)
    s = sub.add_parser("verify-theory", parents=[common], help="tabular checks of both propositions")
    s.set_defaults(func=cmd_verify_theory)
    s = sub.add_parser("accept", parents=[common], help="run the acceptance suite")
    s.add_argument("--criteria", help="comma-separated subset, e.g. 1,2,5")
    s.set_defaults(func=cmd_accept)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except harness.DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
