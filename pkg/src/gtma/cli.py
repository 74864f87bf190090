"""Command-line interface.

Subcommands: ``generate``, ``optimize``, ``eval``, ``ablate``, ``gradcheck``.

Exit codes:

==  =====================================================
0   success
2   configuration or usage error (nothing is written)
3   file system error
4   numeric failure (divergence, degenerate vectors)
5   assertion failure (gradcheck or ablation ordering)
==  =====================================================

Every command that writes results also writes ``manifest.json`` first; it is
the only output that carries timestamps.
"""

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .benchmark import (
    VARIANTS,
    aggregate_reports,
    evaluate_baseline,
    evaluate_gtma,
    generate_benchmark,
    run_ablation,
)
from .config import ConfigError, load_config
from .encoder import MODES, refine_anchor
from .gradcheck import gradcheck
from .grpo import grpo_run, objective_value
from .io import (
    AGGREGATE_FIELDS,
    REPORT_FIELDS,
    ablation_fields,
    aggregate_rows,
    load_fixture,
    report_rows,
    save_fixture,
    write_csv,
    write_json,
    write_trajectory,
)
from .numeric import GTMAError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_ASSERTION = 5


class AssertionFailure(GTMAError):
    pass


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _formats(arg, cfg):
    if arg is None:
        return cfg.formats
    return ("json", "csv") if arg == "both" else (arg,)


def _seeds(args, cfg):
    seeds = getattr(args, "seeds", None) or ([args.seed] if getattr(args, "seed", None) is not None else None)
    return tuple(seeds) if seeds else cfg.seeds


def _out_dir(args, cfg):
    return Path(args.out if args.out is not None else cfg.output_dir)


class Manifest:
    """Run manifest, written before any result file and finalized at exit."""

    def __init__(self, out_dir, command, cfg=None, seeds=()):
        self.path = Path(out_dir) / "manifest.json"
        self.doc = {
            "command": command,
            "tool_version": __version__,
            "config_hash": None if cfg is None else cfg.config_hash(),
            "seeds": list(seeds),
            "started": _now(),
            "finished": None,
            "outputs": [],
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_json(self.path, self.doc)

    def finish(self, outputs):
        self.doc["outputs"] = sorted(str(Path(p).name) for p in outputs)
        self.doc["finished"] = _now()
        write_json(self.path, self.doc)


def cmd_generate(args):
    cfg = load_config(args.config)
    spec = cfg.benchmark if args.seed is None else cfg.benchmark.replace(seed=args.seed)
    out = _out_dir(args, cfg)
    bench = generate_benchmark(spec)
    manifest = Manifest(out, "generate", cfg, [spec.seed])
    paths = save_fixture(bench, out)
    manifest.finish(paths)
    n_support = len(bench.split("support"))
    print(f"concepts: {len(bench.concepts)} ({spec.num_seen} seen, {spec.num_ood} ood)")
    print(f"vocabulary: {len(bench.vocab)} tokens")
    print(f"instances: {len(bench.instances)} ({n_support} support, {len(bench.instances) - n_support} test)")
    return EXIT_OK


def cmd_optimize(args):
    cfg = load_config(args.config)
    bench = load_fixture(args.fixture)
    by_id = {i.instance_id: i for i in bench.instances}
    if args.instance not in by_id:
        raise ConfigError(f"unknown instance {args.instance!r}", field="--instance")
    grpo = cfg.grpo if args.seed is None else cfg.grpo.replace(init_seed=args.seed)
    out = _out_dir(args, cfg)
    anchor = refine_anchor(by_id[args.instance].patches, bench.attention)
    traj = grpo_run(anchor, bench.encoder, bench.vocab, bench.template, grpo)
    manifest = Manifest(out, "optimize", cfg, [grpo.init_seed])
    paths = write_trajectory(traj, grpo, out, _formats(args.format, cfg))
    manifest.finish(paths)
    s, r, _ = objective_value(traj.z_star, anchor, bench.encoder, bench.vocab, bench.template, grpo)
    print(f"steps: {len(traj.steps)}")
    print(f"final S = {s:.17g}")
    print(f"final R = {r:.17g}")
    return EXIT_OK


def _write_reports(out, stem, reports, formats):
    paths = []
    if "json" in formats:
        write_json(out / f"{stem}.json", [r.to_dict() for r in reports])
        paths.append(out / f"{stem}.json")
    if "csv" in formats:
        write_csv(out / f"{stem}.csv", report_rows(reports), REPORT_FIELDS)
        paths.append(out / f"{stem}.csv")
    return paths


def _write_aggregate(out, groups, formats):
    rows = aggregate_rows(groups)
    paths = []
    if "json" in formats:
        write_json(out / "aggregate.json", rows)
        paths.append(out / "aggregate.json")
    if "csv" in formats:
        write_csv(out / "aggregate.csv", rows, AGGREGATE_FIELDS)
        paths.append(out / "aggregate.csv")
    return paths


def cmd_eval(args):
    cfg = load_config(args.config)
    seeds = _seeds(args, cfg)
    variant = args.variant or "full"
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}", field="--variant")
    shots = tuple(args.shots) if args.shots else (None,)
    fixture = load_fixture(args.fixture) if args.fixture else None
    out = _out_dir(args, cfg)
    formats = _formats(args.format, cfg)
    manifest = Manifest(out, "eval", cfg, seeds)

    baseline, gtma = [], {n: [] for n in shots}
    for seed in seeds:
        if fixture is not None:
            # a fixture is one dataset; seeds vary the optimizer initialization
            bench, grpo = fixture, cfg.grpo.replace(init_seed=seed)
        else:
            bench, grpo = generate_benchmark(cfg.benchmark.replace(seed=seed)), cfg.grpo
        baseline.append(evaluate_baseline(bench))
        if not args.baseline_only:
            for n in shots:
                gtma[n].append(evaluate_gtma(bench, grpo, variant, shots=n, aggregation=cfg.aggregation))

    paths = _write_reports(out, "baseline", baseline, formats)
    groups = [("baseline", "full", None, aggregate_reports(baseline))]
    if not args.baseline_only:
        for n in shots:
            stem = "gtma" if n is None else f"gtma_shots{n}"
            paths += _write_reports(out, stem, gtma[n], formats)
            groups.append(("gtma", variant, n, aggregate_reports(gtma[n])))
    paths += _write_aggregate(out, groups, formats)
    manifest.finish(paths)
    for method, v, n, summary in groups:
        label = method if n is None else f"{method}[{n}-shot]"
        cells = " ".join(f"{m}={summary[m]['mean']:.4f}" for m in ("seen_accuracy", "ood_accuracy", "open_accuracy")
                         if summary[m]["mean"] is not None)
        print(f"{label:<16} {cells}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    variants = tuple(args.variants) if args.variants else cfg.variants
    if len(variants) < 2 or "full" not in variants:
        raise ConfigError("ablation needs 'full' and at least one other variant", field="experiment.variants")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}", field="--variants")
    seeds = _seeds(args, cfg)
    out = _out_dir(args, cfg)
    formats = _formats(args.format, cfg)
    manifest = Manifest(out, "ablate", cfg, seeds)
    result = run_ablation(cfg.benchmark, cfg.grpo, variants, seeds, cfg.aggregation)
    table = result.table()
    paths = []
    if "csv" in formats:
        write_csv(out / "ablation.csv", table, ablation_fields(result))
        paths.append(out / "ablation.csv")
    if "json" in formats:
        write_json(out / "ablation.json", result.to_dict())
        paths.append(out / "ablation.json")
    manifest.finish(paths)
    for row in table:
        drop = "--" if row["variant"] == "full" else f"{row['avg_drop']:+.2f}"
        print(f"{row['variant']:<22} open={row['synthetic']:.2f}%  drop={drop}")
    if args.assert_ordering:
        full = next(r for r in table if r["variant"] == "full")
        slack = 100.0 * cfg.ordering_ci
        offenders = [r["variant"] for r in table
                     if r["variant"] != "full" and r["synthetic"] > full["synthetic"] + slack]
        if offenders:
            raise AssertionFailure(f"variants beat full beyond {slack:.2f} points: {', '.join(offenders)}")
    return EXIT_OK


def cmd_gradcheck(args):
    modes = MODES if args.modes == ["all"] else tuple(args.modes)
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown encoder mode {m!r}", field="--modes")
    if args.trials < 1:
        raise ConfigError("trials must be at least 1", field="--trials")
    report = gradcheck(tuple(args.dims), modes, args.trials, args.tolerance, args.seed,
                       corrupt_trial=args.corrupt_trial)
    print(f"trials: {len(report.trials)}  max relative error: {report.max_rel_error:.3e}  "
          f"tolerance: {args.tolerance:.1e}")
    if args.out is not None:
        out = Path(args.out)
        manifest = Manifest(out, "gradcheck", None, [args.seed])
        rows = [vars(t) for t in report.trials]
        write_csv(out / "gradcheck.csv", rows, ("trial", "seed", "mode", "dim", "rel_error"))
        manifest.finish([out / "gradcheck.csv"])
    if not report.passed:
        for t in report.failures:
            print(f"FAIL trial {t.trial} seed {t.seed} mode {t.mode} dim {t.dim}: "
                  f"relative error {t.rel_error:.3e}")
        raise AssertionFailure(f"{len(report.failures)} gradient check(s) failed")
    print("PASS")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gtma", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: experiment.output_dir)")
        sp.add_argument("--format", choices=("json", "csv", "both"))
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", help="override experiment.seeds")
        sp.add_argument("--seed", type=int, help="single seed override")

    sp = sub.add_parser("generate", help="write a benchmark fixture")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("optimize", help="optimize one fixture instance and dump its trajectory")
    common(sp)
    sp.add_argument("--fixture", required=True)
    sp.add_argument("--instance", required=True)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("eval", help="baseline and GTMA accuracies")
    common(sp, seeds=True)
    sp.add_argument("--fixture", help="evaluate a saved fixture instead of generating per seed")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--shots", type=int, nargs="+", help="few-shot support sizes")
    sp.add_argument("--baseline-only", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="component ablation table")
    common(sp, seeds=True)
    sp.add_argument("--variants", nargs="+", help="override experiment.variants")
    sp.add_argument("--assert-ordering", action="store_true",
                    help="exit 5 if an ablated variant beats full by more than experiment.ordering_ci")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    sp.add_argument("--dims", type=int, nargs="+", default=[4, 16, 64])
    sp.add_argument("--modes", nargs="+", default=["all"])
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--corrupt-trial", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionFailure as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GTMAError, ArithmeticError, ValueError) as exc:
        step = getattr(exc, "step", None)
        where = "" if step is None else f" at step {step}"
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
