"""Command-line interface.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 property
violation.  Argument errors are funneled through the same mapping, so a
bad flag exits 1 like any other validation problem.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .counterexample import CounterexampleSpec, build_counterexample
from .diffusion import DiffusionToy, default_noise_levels, diffusion_train, loss_gap
from .divergence import builtin_generator, f_divergence
from .errors import NumericalError, PropertyViolation, ValidationError
from .fairness import ClosureFamily, check_ego, check_egt, check_mgo, fairness_report, verify_lower_bound
from .grid import warmup_target
from .levelset import SweepGrid, extract_level_set, imbalance_extremes, sweep
from .runner import SCENARIOS, load_grouped, load_run_record, render_table, run_scenario
from .sampling import REJECTION_MODES, make_rejection_plan, rejection_filter, sample
from .storage import atomic_write_text, load_distribution, save_distribution
from .training import METHODS, HistogramModel, TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _emit(payload: dict, fmt: str, out=None) -> None:
    if fmt == "csv":
        lines = ["key,value"]
        for k, v in payload.items():
            lines.append(f"{k},{v}")
        text = "\n".join(lines) + "\n"
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _generator(args):
    return builtin_generator(args.generator, args.log_base)


def _load_any(path):
    density, partition = load_distribution(path)
    return density, partition


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_divergence(args):
    f = _generator(args)
    p_density, p_part = _load_any(args.p)
    q_density, q_part = _load_any(args.q)
    if p_part is not None and q_part is not None:
        p = load_grouped(args.p)
        q = load_grouped(args.q)
        report = fairness_report(f, p, q, args.support_tol)
        _emit(report.as_dict(), args.format, args.out)
        return
    value = f_divergence(f, p_density, q_density, args.support_tol)
    _emit({"generator": f.name, "divergence": value}, args.format, args.out)


def _cmd_check(args):
    if args.criterion != "ego" and not args.p:
        raise ValidationError(f"criterion {args.criterion!r} needs -p")
    if args.criterion == "ego":
        result = check_ego(load_grouped(args.q), args.delta)
    elif args.criterion == "mgo":
        result = check_mgo(load_grouped(args.p), load_grouped(args.q), args.delta)
    else:
        result = check_egt(_generator(args), load_grouped(args.p),
                           load_grouped(args.q), args.delta, args.support_tol)
    _emit({
        "criterion": result.criterion,
        "passed": result.passed,
        "delta": result.delta,
        "threshold": result.threshold,
        "per_group": list(result.per_group),
    }, args.format, args.out)


def _cmd_bound(args):
    f = _generator(args)
    p = load_grouped(args.p)
    family = ClosureFamily([load_grouped(m) for m in args.members])
    report = verify_lower_bound(f, p, family, args.delta, args.support_tol)
    violated = [c.index for c in report.violations]
    _emit({
        "bound_base": report.bound_base,
        "delta": report.delta,
        "n_members": len(report.candidates),
        "n_equal_treatment": sum(c.egt_passed for c in report.candidates),
        "violations": violated,
    }, args.format, args.out)
    if violated:
        raise PropertyViolation(
            f"lower bound violated by members {violated}")


def _cmd_counterexample(args):
    f = _generator(args)
    target = load_grouped(args.p) if args.p else warmup_target()
    spec = CounterexampleSpec(args.epsilon, args.gamma, args.bar_a)
    result = build_counterexample(f, target, spec)
    if args.out:
        save_distribution(args.out, result.model.mixture(), result.model.partition)
    payload = result.report.as_dict()
    payload["targets"] = list(result.targets)
    if args.out:
        payload["model_file"] = str(args.out)
    _emit(payload, args.format, None)


def _cmd_levelset(args):
    f = _generator(args)
    target = load_grouped(args.p) if args.p else warmup_target()
    lattice = SweepGrid(n_mu=args.n_mu, n_sigma=args.n_sigma)
    field = sweep(target, f, lattice, args.support_tol)
    points = extract_level_set(target, f, field, args.epsilon,
                               args.level_tol, args.support_tol)
    if not points:
        raise ValidationError(f"level set at epsilon={args.epsilon} is empty")
    balanced, worst = imbalance_extremes(points)
    if args.out:
        header = "mu,sigma,global,cond_0,cond_1,delta_egt"
        lines = [header] + [
            f"{pt.mu:.12g},{pt.sigma:.12g},{pt.global_div:.12g},"
            f"{pt.cond_div[0]:.12g},{pt.cond_div[1]:.12g},{pt.delta_egt:.12g}"
            for pt in points
        ]
        atomic_write_text(args.out, "\n".join(lines) + "\n")
    _emit({
        "epsilon": args.epsilon,
        "n_points": len(points),
        "balanced": {"mu": balanced.mu, "sigma": balanced.sigma,
                     "delta_egt": balanced.delta_egt},
        "worst": {"mu": worst.mu, "sigma": worst.sigma,
                  "delta_egt": worst.delta_egt,
                  "cond": list(worst.cond_div)},
    }, args.format, None)


def _cmd_train(args):
    f = _generator(args)
    p = load_grouped(args.p) if args.p else warmup_target()
    cfg = TrainConfig(
        method=args.method,
        f=f,
        learning_rate=args.learning_rate,
        steps=args.steps,
        batch_size=args.batch_size,
        lam=args.lam,
        seed=args.seed,
        ema_decay=args.ema_decay,
        support_tol=args.support_tol,
    )
    if args.method == "conditional":
        init = HistogramModel.uniform(p.grid, p.partition, p.proportions)
    else:
        init = HistogramModel.uniform(p.grid)
    final, history = train(init, p, cfg)
    if args.out:
        save_distribution(args.out, final.density(), p.partition)
    per_group = history.per_group[-1]
    _emit({
        "method": args.method,
        "steps": history.n_steps,
        "final_value": history.final_value(),
        "final_delta_egt": float(history.delta_egt[-1]),
        "final_per_group": [float(v) for v in per_group],
    }, args.format, None)


def _cmd_train_diffusion(args):
    p = load_grouped(args.p) if args.p else warmup_target()
    levels = default_noise_levels(args.n_levels)
    toy = DiffusionToy(p, levels, conditional=args.method == "conditional")
    cfg = TrainConfig(
        method=args.method,
        learning_rate=args.learning_rate,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        ema_decay=args.ema_decay,
    )
    trained, history = diffusion_train(toy, cfg)
    if args.out:
        rows = ["group,sigma,a,b"]
        for a in range(trained.n_groups if trained.conditional else 1):
            coeffs = trained.coeffs_for(a)
            for j, sg in enumerate(trained.noise_levels):
                rows.append(f"{a},{sg:.12g},{coeffs[j, 0]:.12g},{coeffs[j, 1]:.12g}")
        atomic_write_text(args.out, "\n".join(rows) + "\n")
    _emit({
        "method": args.method,
        "steps": args.steps,
        "gap_initial": loss_gap(toy),
        "gap_final": loss_gap(trained),
        "n_levels": int(levels.size),
    }, args.format, None)


def _cmd_sample(args):
    density, partition = _load_any(args.q)
    batch = sample(density, args.n, args.seed, partition)
    payload = {"n_drawn": len(batch)}
    if args.mode:
        if partition is None:
            raise ValidationError("rejection sampling needs a labeled distribution")
        grouped = load_grouped(args.q)
        target = None
        if args.target:
            target = np.array([float(t) for t in args.target.split(",")])
        plan = make_rejection_plan(grouped.proportions, args.mode, target)
        kept = rejection_filter(batch, plan, args.seed, args.exact_counts)
        payload.update({
            "mode": args.mode,
            "expected_rate": plan.expected_rate,
            "n_kept": len(kept),
            "acceptance": [float(a) for a in plan.acceptance],
            "proportions": [float(v) for v in
                            kept.group_proportions(grouped.n_groups)],
        })
        batch = kept
    elif partition is not None:
        payload["proportions"] = [
            float(v) for v in batch.group_proportions(partition.n_groups)]
    if args.out:
        if batch.labels is None:
            lines = ["value"] + [f"{v:.12g}" for v in batch.values]
        else:
            lines = ["value,label"] + [
                f"{v:.12g},{g}" for v, g in zip(batch.values, batch.labels)]
        atomic_write_text(args.out, "\n".join(lines) + "\n")
        payload["file"] = str(args.out)
    _emit(payload, args.format, None)


def _cmd_scenario(args):
    run_dir = run_scenario(args.name, args.config, out_dir=args.out)
    _emit({"scenario": args.name, "run_dir": str(run_dir)}, args.format, None)


def _cmd_table(args):
    records = [load_run_record(p) for p in args.records]
    table = render_table(records)
    text = table.to_csv() if args.format == "csv" else table.to_json()
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for every stochastic step (default 0)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--format", choices=("json", "csv"), default="json",
                        help="stdout payload format")
    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--generator", "--f", dest="generator", default="js",
                     help="divergence generator name (default js)")
    gen.add_argument("--log-base", type=float, default=None)
    gen.add_argument("--support-tol", type=float, default=0.0)

    parser = _Parser(prog="egt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    sp = sub.add_parser("divergence", parents=[common, gen],
                        help="divergence between two stored distributions")
    sp.add_argument("-p", required=True, help="reference distribution file")
    sp.add_argument("-q", required=True, help="model distribution file")
    sp.set_defaults(func=_cmd_divergence)

    sp = sub.add_parser("check", parents=[common, gen],
                        help="run one fairness criterion at a threshold")
    sp.add_argument("--criterion", required=True, choices=("mgo", "ego", "egt"))
    sp.add_argument("-p", help="reference distribution (mgo/egt)")
    sp.add_argument("-q", required=True, help="model distribution")
    sp.add_argument("--delta", type=float, required=True)
    sp.set_defaults(func=_cmd_check)

    sp = sub.add_parser("bound", parents=[common, gen],
                        help="verify the equal-treatment price floor on a family")
    sp.add_argument("-p", required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("members", nargs="+", help="family member files")
    sp.set_defaults(func=_cmd_bound)

    sp = sub.add_parser("counterexample", parents=[common, gen],
                        help="equal-odds model with prescribed treatment gap")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--bar-a", type=int, default=0)
    sp.add_argument("-p", help="target distribution (defaults to the built-in warm-up)")
    sp.set_defaults(func=_cmd_counterexample)

    sp = sub.add_parser("levelset", parents=[common, gen],
                        help="extract a divergence level set over gaussian models")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--n-mu", type=int, default=121)
    sp.add_argument("--n-sigma", type=int, default=121)
    sp.add_argument("--level-tol", type=float, default=1e-4)
    sp.add_argument("-p", help="target distribution (defaults to the built-in warm-up)")
    sp.set_defaults(func=_cmd_levelset)

    sp = sub.add_parser("train", parents=[common, gen],
                        help="fit a histogram model under one objective")
    sp.add_argument("--method", choices=METHODS, default="baseline")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--learning-rate", "--lr", dest="learning_rate",
                    type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=0,
                    help="0 uses exact gradients")
    sp.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sp.add_argument("--ema-decay", type=float, default=0.9)
    sp.add_argument("-p", help="target distribution (defaults to the built-in warm-up)")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("train-diffusion", parents=[common],
                        help="fit per-noise-level affine denoisers")
    sp.add_argument("--method",
                    choices=("baseline", "conditional", "reweighted", "minmax"),
                    default="baseline")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--learning-rate", "--lr", dest="learning_rate",
                    type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=256,
                    help="0 uses exact moment gradients")
    sp.add_argument("--n-levels", type=int, default=8)
    sp.add_argument("--ema-decay", type=float, default=0.9)
    sp.add_argument("-p", help="group data (defaults to the built-in warm-up)")
    sp.set_defaults(func=_cmd_train_diffusion)

    sp = sub.add_parser("sample", parents=[common],
                        help="draw from a stored distribution, optionally rebalanced")
    sp.add_argument("-q", required=True)
    sp.add_argument("-n", type=int, required=True)
    sp.add_argument("--mode", choices=REJECTION_MODES,
                    help="rejection-rebalance toward matched or equal odds")
    sp.add_argument("--target", help="comma-separated target proportions (mgo mode)")
    sp.add_argument("--exact-counts", action="store_true")
    sp.set_defaults(func=_cmd_sample)

    sp = sub.add_parser("scenario", parents=[common],
                        help="run a packaged experiment from a JSON config")
    sp.add_argument("name", choices=SCENARIOS)
    sp.add_argument("--config", required=True, help="JSON config file")
    sp.set_defaults(func=_cmd_scenario)

    sp = sub.add_parser("table", parents=[common],
                        help="assemble a comparison table from run records")
    sp.add_argument("records", nargs="+", help="record JSON files")
    sp.set_defaults(func=_cmd_table)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except PropertyViolation as exc:
        print(f"property violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
