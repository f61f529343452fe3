"""Generational evolution loop and experiment harness.

Each generation every individual produces one mutated child, children
are evaluated, parents and children are ranked together, the survivor
strategy picks k of the twenty, and clones refill the population.  The
run stops at the generation cap or once the best fitness has improved
by less than epsilon over a trailing window.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from evoarch.fitness import SurrogateEvaluator, TrainedEvaluator, evaluate_batch
from evoarch.genome import (
    Genome,
    Individual,
    deserialize,
    hamming_distance,
    new_seed_genome,
    parameter_count,
    serialize,
)
from evoarch.mutation import ExhaustedRetries, MutationWeights, mutate_until_valid
from evoarch.selection import (
    aggressive_select,
    clone_refill,
    rank,
    sample_by_fitness_select,
    sample_uniform_select,
    tournament_select,
)
from evoarch.trainer import TrainPlan

STRATEGIES = ("aggressive", "tournament", "sample_uniform", "sample_by_fitness")

STATS_COLUMNS = ("generation", "best_fitness", "mean_fitness", "best_params")

CHECKPOINT_VERSION = 1


class ConfigError(Exception):
    """Invalid evolution settings."""


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 10
    k: int = 1
    distance_threshold: int = 1
    strategy: str = "aggressive"
    early_stage_generations: int = 10
    max_generations: int = 100
    saturation_window: int | None = 10
    saturation_eps: float = 0.001
    seed: int = 0
    evaluator: str = "surrogate"
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    workers: int = 1
    mutation_retries: int = 25

    def check(self):
        if self.population_size < 2:
            raise ConfigError("population size must be at least 2")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.k > self.population_size:
            raise ConfigError("k must not exceed population size")
        if self.distance_threshold < 0:
            raise ConfigError("distance threshold must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, pick from {STRATEGIES}")
        if self.max_generations < 1:
            raise ConfigError("need at least one generation")
        if self.saturation_window is not None and self.saturation_window < 1:
            raise ConfigError("saturation window must be positive or None")
        if self.evaluator not in ("surrogate", "trained"):
            raise ConfigError(f"unknown evaluator {self.evaluator!r}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.mutation_retries < 1:
            raise ConfigError("mutation retry budget must be positive")


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_params: int
    wall_seconds: float = 0.0
    selected_ids: tuple = ()
    best_individual: Individual | None = None


@dataclass
class EvolutionResult:
    best: Individual
    stats: list
    population: list
    generations: int
    out_dir: str | None = None


@dataclass
class RunState:
    """Everything needed to continue a run: config, population, rng, history."""

    config: EvolutionConfig
    population: list
    rng: np.random.Generator
    stats: list
    next_generation: int


def make_evaluator(config, split=None, plan=None):
    if config.evaluator == "surrogate":
        return SurrogateEvaluator()
    if split is None:
        raise ConfigError("trained evaluator needs a dataset split")
    return TrainedEvaluator(split, plan or TrainPlan())


def init_population(config, evaluator, fitness_log=None):
    """Seed individuals alternating the two minimal genome forms, evaluated."""
    population = []
    for i in range(config.population_size):
        kind = "global_pool" if i % 2 == 0 else "fully_connected"
        genome = new_seed_genome(kind, config.input_shape, config.num_classes)
        population.append(Individual(id=i, genome=genome, born_generation=0))
    return evaluate_batch(population, evaluator, config.seed, config.workers, fitness_log)


def _select(ranked, union, config, rng):
    if config.strategy == "aggressive":
        return aggressive_select(ranked, config.k, config.distance_threshold)
    if config.strategy == "tournament":
        return [tournament_select(union, rng) for _ in range(config.k)]
    if config.strategy == "sample_uniform":
        return sample_uniform_select(union, rng, config.k)
    return sample_by_fitness_select(union, rng, config.k)


def step_generation(
    population,
    config,
    rng,
    generation=1,
    evaluator=None,
    best=None,
    mutation_log=None,
    selection_log=None,
    fitness_log=None,
):
    """One mutate/evaluate/select/refill cycle.

    Returns (next population, GenerationStats).  The stats carry the
    best-so-far individual, which only changes on a strict fitness
    improvement.
    """
    start = time.perf_counter()
    if evaluator is None:
        evaluator = make_evaluator(config)
    weights = (
        MutationWeights.early()
        if generation <= config.early_stage_generations
        else MutationWeights.late()
    )
    next_id = max(ind.id for ind in population) + 1

    children = []
    for parent in population:
        attempts = []
        try:
            child_genome = mutate_until_valid(
                parent.genome, weights, rng, config.mutation_retries, attempts
            )
            child = Individual(next_id, child_genome, None, generation, parent.id)
        except ExhaustedRetries:
            # keep the slot occupied; the parent genome rides along unchanged
            child = Individual(next_id, parent.genome, parent.fitness, generation, parent.id)
            attempts.append({"kind": "exhausted_clone", "accepted": True, "repair_fixes": 0})
        next_id += 1
        children.append(child)
        if mutation_log is not None:
            for retries, a in enumerate(attempts):
                mutation_log.append(
                    {
                        "generation": generation,
                        "parent_id": parent.id,
                        "kind": a["kind"],
                        "accepted": a["accepted"],
                        "retries": retries,
                        "repair_fixes": a["repair_fixes"],
                    }
                )

    children = evaluate_batch(children, evaluator, config.seed, config.workers, fitness_log)
    union = list(population) + children
    ranked = rank(union)
    selected = _select(ranked, union, config, rng)
    order = {ind.id: pos for pos, ind in enumerate(ranked)}
    selected = sorted(selected, key=lambda ind: order[ind.id])
    new_population = clone_refill(selected, config.population_size, next_id, generation)

    challenger = ranked[0]
    if best is None or challenger.fitness > best.fitness:
        best = challenger

    if selection_log is not None:
        selection_log.append(
            {
                "generation": generation,
                "strategy": config.strategy,
                "selected_ids": [ind.id for ind in selected],
                "fitnesses": [round(ind.fitness, 9) for ind in selected],
                "pairwise_distances": [
                    [hamming_distance(a.genome, b.genome) for b in selected] for a in selected
                ],
            }
        )

    stats = GenerationStats(
        generation=generation,
        best_fitness=best.fitness,
        mean_fitness=float(np.mean([ind.fitness for ind in union])),
        best_params=parameter_count(best.genome),
        wall_seconds=time.perf_counter() - start,
        selected_ids=tuple(ind.id for ind in selected),
        best_individual=best,
    )
    return new_population, stats


def _initial_stats(population):
    ranked = rank(population)
    best = ranked[0]
    return GenerationStats(
        generation=0,
        best_fitness=best.fitness,
        mean_fitness=float(np.mean([ind.fitness for ind in population])),
        best_params=parameter_count(best.genome),
        selected_ids=(),
        best_individual=best,
    )


def _saturated(stats, window, eps):
    """True when the trailing window shows too little best-fitness gain.

    stats holds one row per generation starting at generation 0; the
    window compares generation g against generation g - window, so the
    earliest possible stop is after window + 1 generations.
    """
    if window is None:
        return False
    g = stats[-1].generation
    if g < window + 1:
        return False
    by_gen = {s.generation: s for s in stats}
    return by_gen[g].best_fitness - by_gen[g - window].best_fitness < eps


def run(config, out_dir=None, evaluator=None, resume_from=None, checkpoint_every=5):
    """Full evolution run; optionally writes logs, stats and checkpoints.

    resume_from continues a checkpointed run and reproduces exactly what
    the uninterrupted run would have produced.  checkpoint_every=None
    disables checkpoint files.
    """
    config.check()
    logs = {"mutation": [], "selection": [], "fitness": []} if out_dir else None
    mlog, slog, flog = (logs[k] if logs else None for k in ("mutation", "selection", "fitness"))

    if resume_from is not None:
        state = checkpoint_load(resume_from)
        config, population, rng = state.config, state.population, state.rng
        stats, start_gen = state.stats, state.next_generation
        best = stats[-1].best_individual
    else:
        rng = np.random.default_rng(config.seed)
        if evaluator is None:
            evaluator = make_evaluator(config)
        population = init_population(config, evaluator, flog)
        stats = [_initial_stats(population)]
        best = stats[0].best_individual
        start_gen = 1
    if evaluator is None:
        evaluator = make_evaluator(config)

    wall_start = time.perf_counter()
    generations_run = start_gen - 1
    for generation in range(start_gen, config.max_generations + 1):
        population, st = step_generation(
            population,
            config,
            rng,
            generation=generation,
            evaluator=evaluator,
            best=best,
            mutation_log=mlog,
            selection_log=slog,
            fitness_log=flog,
        )
        best = st.best_individual
        stats.append(st)
        generations_run = generation
        if out_dir and checkpoint_every and generation % checkpoint_every == 0:
            os.makedirs(out_dir, exist_ok=True)
            checkpoint_save(
                RunState(config, population, rng, stats, generation + 1),
                os.path.join(out_dir, f"checkpoint_gen{generation}.json"),
            )
        if _saturated(stats, config.saturation_window, config.saturation_eps):
            break

    result = EvolutionResult(
        best=best,
        stats=stats,
        population=population,
        generations=generations_run,
        out_dir=out_dir,
    )
    if out_dir:
        _write_run_outputs(result, config, logs, time.perf_counter() - wall_start)
    return result


# ---------------------------------------------------------------------------
# run artifacts


def _config_doc(config):
    doc = asdict(config)
    doc["input_shape"] = list(doc["input_shape"])
    return doc


def stats_csv_text(stats):
    lines = [",".join(STATS_COLUMNS)]
    for s in stats:
        lines.append(f"{s.generation},{s.best_fitness:.9f},{s.mean_fitness:.9f},{s.best_params}")
    return "\n".join(lines) + "\n"


def _write_run_outputs(result, config, logs, wall_total):
    out_dir = result.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(_config_doc(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "stats.csv"), "w") as fh:
        fh.write(stats_csv_text(result.stats))
    with open(os.path.join(out_dir, "best_genome.json"), "w") as fh:
        fh.write(serialize(result.best.genome))
    meta = {
        "finished_unix": time.time(),
        "wall_seconds_total": wall_total,
        "per_generation_wall": [round(s.wall_seconds, 6) for s in result.stats],
        "generations": result.generations,
        "best_fitness": result.best.fitness,
        "best_individual_id": result.best.id,
    }
    with open(os.path.join(out_dir, "run_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name in ("mutation", "selection", "fitness"):
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as fh:
            for row in logs[name]:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpointing


def _individual_doc(ind):
    return {
        "id": ind.id,
        "fitness": ind.fitness,
        "born_generation": ind.born_generation,
        "parent_id": ind.parent_id,
        "genome": json.loads(serialize(ind.genome)),
    }


def _individual_from_doc(doc):
    return Individual(
        id=doc["id"],
        genome=deserialize(json.dumps(doc["genome"])),
        fitness=doc["fitness"],
        born_generation=doc["born_generation"],
        parent_id=doc["parent_id"],
    )


def checkpoint_save(state, path):
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": _config_doc(state.config),
        "next_generation": state.next_generation,
        "rng_state": state.rng.bit_generator.state,
        "population": [_individual_doc(ind) for ind in state.population],
        "stats": [
            {
                "generation": s.generation,
                "best_fitness": s.best_fitness,
                "mean_fitness": s.mean_fitness,
                "best_params": s.best_params,
                "selected_ids": list(s.selected_ids),
                "best_individual": _individual_doc(s.best_individual),
            }
            for s in state.stats
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def checkpoint_load(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} not supported")
    cfg_doc = dict(doc["config"])
    cfg_doc["input_shape"] = tuple(cfg_doc["input_shape"])
    config = EvolutionConfig(**cfg_doc)
    population = [_individual_from_doc(d) for d in doc["population"]]
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    stats = [
        GenerationStats(
            generation=s["generation"],
            best_fitness=s["best_fitness"],
            mean_fitness=s["mean_fitness"],
            best_params=s["best_params"],
            selected_ids=tuple(s["selected_ids"]),
            best_individual=_individual_from_doc(s["best_individual"]),
        )
        for s in doc["stats"]
    ]
    return RunState(config, population, rng, stats, doc["next_generation"])


# ---------------------------------------------------------------------------
# strategy comparison harness


@dataclass(frozen=True)
class SelectionSpec:
    """One competitor in a comparison: a label plus selection settings."""

    label: str
    strategy: str = "aggressive"
    k: int = 1
    distance_threshold: int = 1


def default_specs(strategies, config):
    """Named baselines: sampling strategies keep a full-size survivor set."""
    specs = []
    for name in strategies:
        if name == "aggressive":
            specs.append(SelectionSpec("aggressive", "aggressive", config.k, config.distance_threshold))
        elif name in STRATEGIES:
            specs.append(SelectionSpec(name, name, config.population_size, 0))
        else:
            raise ConfigError(f"unknown strategy {name!r}")
    return specs


def k_sweep_specs(ks, config):
    return [SelectionSpec(f"k={k}", "aggressive", k, config.distance_threshold) for k in ks]


@dataclass
class ComparisonResult:
    tau: float
    rows: list
    curves: dict
    generations_to_tau: dict


def compare_strategies(config, specs, n_seeds, tau_fraction=0.9, evaluator=None):
    """Race selection settings over shared seeds on fixed-length runs.

    tau is tau_fraction times the best final fitness seen anywhere in the
    comparison; each run contributes the first generation whose best
    reaches tau (censored at max_generations + 1 when it never does).
    """
    series = {}
    for spec in specs:
        for s in range(n_seeds):
            cfg = replace(
                config,
                strategy=spec.strategy,
                k=spec.k,
                distance_threshold=spec.distance_threshold,
                seed=config.seed + s,
                saturation_window=None,
            )
            cfg.check()
            result = run(cfg, evaluator=evaluator)
            series[(spec.label, s)] = [st.best_fitness for st in result.stats]

    tau = tau_fraction * max(curve[-1] for curve in series.values())
    censor = config.max_generations + 1
    gens_to_tau = {}
    for key, curve in series.items():
        hit = next((g for g, v in enumerate(curve) if v >= tau), censor)
        gens_to_tau[key] = hit

    rows = []
    curves = {}
    for spec in specs:
        vals = [gens_to_tau[(spec.label, s)] for s in range(n_seeds)]
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        rows.append(
            {
                "label": spec.label,
                "strategy": spec.strategy,
                "k": spec.k,
                "distance_threshold": spec.distance_threshold,
                "seeds": n_seeds,
                "tau": round(tau, 9),
                "median_generations": float(med),
                "q1_generations": float(q1),
                "q3_generations": float(q3),
                "reached": sum(v <= config.max_generations for v in vals),
            }
        )
        per_gen = np.array([series[(spec.label, s)] for s in range(n_seeds)])
        curves[spec.label] = np.median(per_gen, axis=0).tolist()
    return ComparisonResult(tau=tau, rows=rows, curves=curves, generations_to_tau=gens_to_tau)


def comparison_csv_text(result):
    cols = (
        "label",
        "strategy",
        "k",
        "distance_threshold",
        "seeds",
        "tau",
        "median_generations",
        "q1_generations",
        "q3_generations",
        "reached",
    )
    lines = [",".join(cols)]
    for row in result.rows:
        lines.append(",".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def curves_csv_text(result):
    labels = list(result.curves)
    length = max(len(c) for c in result.curves.values())
    lines = ["generation," + ",".join(labels)]
    for g in range(length):
        cells = [str(g)]
        for label in labels:
            curve = result.curves[label]
            cells.append(f"{curve[g]:.9f}" if g < len(curve) else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
