"""Command-line front end: evolution runs, strategy comparisons, exports.

Exit codes: 0 success, 1 configuration or check failure, 2 unreadable or
malformed data (dataset files, genome files).  All primary outputs are
deterministic for a given flag set; wall-clock times live only in
run_meta.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from evoarch import data as datamod
from evoarch import engine
from evoarch.engine import ConfigError, EvolutionConfig
from evoarch.fitness import SurrogateEvaluator, TrainedEvaluator, evaluate_surrogate
from evoarch.genome import InvalidGenome, ParseError, ShapeError, deserialize, to_dot, validate
from evoarch.trainer import TrainPlan, gradient_check_suite

GRAD_TOL = 1e-4

DEFAULT_STRATEGIES = "aggressive,tournament,sample_uniform,sample_by_fitness"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; here that is a config failure (1)."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_run_flags(p):
    p.add_argument("--fitness", choices=("surrogate", "trained"), default="surrogate",
                   help="fitness evaluator")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist",
                   help="dataset for trained fitness")
    p.add_argument("--subset", type=int, default=None,
                   help="cap on training records before the validation split")
    p.add_argument("--iters", type=int, default=600,
                   help="training iterations per evaluated individual")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--workers", type=int, default=1, help="parallel evaluations")
    p.add_argument("--out-dir", default=None,
                   help="output directory (default derives from command and seed)")


def build_parser():
    parser = _Parser(prog="evoarch", description=__doc__.splitlines()[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("evolve", help="run one evolution",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_run_flags(p)
    p.add_argument("--k", type=int, default=1, help="survivors per generation")
    p.add_argument("--population", type=int, default=10, help="population size")
    p.add_argument("--threshold", type=int, default=1, help="selection distance threshold")
    p.add_argument("--generations", type=int, default=100, help="generation cap")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("compare-selection", help="race selection settings",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_run_flags(p)
    p.add_argument("--k", type=int, default=1, help="k for the aggressive entry")
    p.add_argument("--population", type=int, default=10, help="population size")
    p.add_argument("--threshold", type=int, default=1, help="selection distance threshold")
    p.add_argument("--generations", type=int, default=100, help="generations per run")
    p.add_argument("--strategies", default=None,
                   help=f"comma-separated strategy names (default: {DEFAULT_STRATEGIES})")
    p.add_argument("--seeds", type=int, default=20, help="seeds per entry")
    p.add_argument("--k-sweep", dest="k_sweep", default=None,
                   help="comma-separated k values; replaces --strategies")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-dot", help="print a genome as DOT",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("genome", help="genome JSON file")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("eval-genome", help="evaluate one genome file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_run_flags(p)
    p.add_argument("genome", help="genome JSON file")
    p.set_defaults(func=cmd_eval_genome)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.set_defaults(func=cmd_grad_check)
    return parser


def _load_split(args):
    data_dir = datamod.resolve_data_dir(None)
    return datamod.load_dataset(args.dataset, data_dir, subset_n=args.subset, seed=args.seed)


def _trained_pieces(args):
    split = _load_split(args)
    plan = TrainPlan.desk_scale(args.iters)
    return split, plan


def _read_genome(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ParseError(f"cannot read genome file {path}: {err}") from err
    genome = deserialize(text)
    validate(genome)
    return genome


def cmd_evolve(args):
    split = plan = None
    input_shape, num_classes = (3, 32, 32), 10
    if args.fitness == "trained":
        split, plan = _trained_pieces(args)
        input_shape, num_classes = split.input_shape, split.num_classes
    config = EvolutionConfig(
        population_size=args.population,
        k=args.k,
        distance_threshold=args.threshold,
        max_generations=args.generations,
        seed=args.seed,
        evaluator=args.fitness,
        input_shape=input_shape,
        num_classes=num_classes,
        workers=args.workers,
    )
    config.check()
    evaluator = engine.make_evaluator(config, split, plan)
    out_dir = args.out_dir or f"runs/evolve-{args.fitness}-s{args.seed}"
    result = engine.run(config, out_dir=out_dir, evaluator=evaluator)
    print(f"generations {result.generations}")
    print(f"best_fitness {result.best.fitness:.6f}")
    print(f"best_genome {os.path.join(out_dir, 'best_genome.json')}")
    return 0


def cmd_compare(args):
    config = EvolutionConfig(
        population_size=args.population,
        k=args.k,
        distance_threshold=args.threshold,
        max_generations=args.generations,
        seed=args.seed,
        evaluator=args.fitness,
        workers=args.workers,
    )
    config.check()
    if args.k_sweep and args.strategies:
        raise ConfigError("--k-sweep and --strategies are mutually exclusive")
    if args.k_sweep:
        try:
            ks = [int(v) for v in args.k_sweep.split(",") if v]
        except ValueError as err:
            raise ConfigError(f"bad --k-sweep value: {err}") from err
        specs = engine.k_sweep_specs(ks, config)
    else:
        names = [s.strip() for s in (args.strategies or DEFAULT_STRATEGIES).split(",") if s.strip()]
        specs = engine.default_specs(names, config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be positive")

    evaluator = None
    if args.fitness == "trained":
        split, plan = _trained_pieces(args)
        evaluator = TrainedEvaluator(split, plan)
    result = engine.compare_strategies(config, specs, args.seeds, evaluator=evaluator)
    table = engine.comparison_csv_text(result)
    sys.stdout.write(table)
    out_dir = args.out_dir or f"runs/compare-{args.fitness}-s{args.seed}"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.csv"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write(engine.curves_csv_text(result))
    echo = {
        "command": "compare-selection",
        "fitness": args.fitness,
        "generations": args.generations,
        "seeds": args.seeds,
        "seed": args.seed,
        "specs": [
            {"label": s.label, "strategy": s.strategy, "k": s.k,
             "distance_threshold": s.distance_threshold}
            for s in specs
        ],
    }
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_export_dot(args):
    sys.stdout.write(to_dot(_read_genome(args.genome)))
    return 0


def cmd_eval_genome(args):
    genome = _read_genome(args.genome)
    if args.fitness == "surrogate":
        fitness = evaluate_surrogate(genome)
    else:
        split, plan = _trained_pieces(args)
        if split.input_shape != genome.input_shape or split.num_classes != genome.num_classes:
            raise ConfigError(
                f"genome expects input {genome.input_shape} with {genome.num_classes} classes, "
                f"dataset provides {split.input_shape} with {split.num_classes}"
            )
        fitness = TrainedEvaluator(split, plan).evaluate(genome, args.seed)
    print(f"{fitness:.6f}")
    return 0


def cmd_grad_check(args):
    results = gradient_check_suite(seed=args.seed)
    for name, err in results:
        print(f"{name} {err:.3e}")
    worst = max(err for _, err in results)
    print(f"max_rel_err {worst:.3e}")
    return 0 if worst <= GRAD_TOL else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (datamod.DataError, ParseError, ShapeError, InvalidGenome) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
