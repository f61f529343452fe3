"""Fitness evaluators for individuals.

The surrogate scores a genome instantly from structural counts and makes
quick search experiments possible; the trained evaluator runs the real
training loop and reports validation accuracy.  Both are deterministic
given (genome, seed); an individual's seed is derived from the run seed
and its id so results never depend on evaluation order or worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from evoarch.genome import CONCAT, CONV, MAXPOOL, SKIP
from evoarch.trainer import DivergedTraining, train


class EvaluationError(Exception):
    """One or more individuals failed to evaluate."""

    def __init__(self, failures):
        self.failures = failures
        detail = "; ".join(f"individual {i}: {e!r}" for i, e in failures)
        super().__init__(detail)


def individual_seed(run_seed, individual_id):
    """Stable per-individual training seed folded from the run seed."""
    return int(np.random.SeedSequence((run_seed, individual_id)).generate_state(1)[0])


def evaluate_surrogate(genome):
    """Structural stand-in for accuracy, saturating in [0, 1].

    Rewards convolutions, skips, concatenations and pooling (pooling only
    up to one per conv) and charges for convolutions past twelve.
    """
    counts = {CONV: 0, SKIP: 0, CONCAT: 0, MAXPOOL: 0}
    for node in genome.nodes.values():
        if node.kind in counts:
            counts[node.kind] += 1
    c = counts[CONV]
    s = counts[SKIP]
    n = counts[CONCAT]
    p = min(counts[MAXPOOL], c)
    raw = 1.0 - math.exp(-(0.15 * c + 0.08 * s + 0.08 * n + 0.05 * p))
    raw -= 0.02 * max(0, c - 12)
    return min(1.0, max(0.0, raw))


def evaluate_trained(genome, split, plan):
    """Validation accuracy after one training run; divergence scores 0."""
    try:
        _, acc = train(genome, split, plan)
        return float(acc)
    except DivergedTraining:
        return 0.0


class SurrogateEvaluator:
    """Structure-count evaluator; ignores seeds, needs no data."""

    kind = "surrogate"

    def evaluate(self, genome, seed):
        return evaluate_surrogate(genome)


class TrainedEvaluator:
    """Trains each genome on a dataset split under a fixed plan."""

    kind = "trained"

    def __init__(self, split, plan):
        self.split = split
        self.plan = plan

    def evaluate(self, genome, seed):
        return evaluate_trained(genome, self.split, replace(self.plan, seed=seed))


def evaluate_batch(individuals, evaluator, run_seed=0, workers=1, audit=None):
    """Fill in missing fitnesses; returns new individuals in input order.

    Already evaluated individuals pass through untouched.  Results are
    independent of the worker count because every individual trains under
    its own derived seed.  Raises EvaluationError listing every failure.
    """

    def score(ind):
        start = time.perf_counter()
        value = evaluator.evaluate(ind.genome, individual_seed(run_seed, ind.id))
        wall = time.perf_counter() - start
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"fitness {value} outside [0, 1]")
        return value, wall

    todo = [ind for ind in individuals if ind.fitness is None]
    results = {}
    failures = []
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {ind.id: pool.submit(score, ind) for ind in todo}
        for ind in todo:
            try:
                results[ind.id] = futures[ind.id].result()
            except Exception as err:  # noqa: BLE001 aggregated below
                failures.append((ind.id, err))
    else:
        for ind in todo:
            try:
                results[ind.id] = score(ind)
            except Exception as err:  # noqa: BLE001 aggregated below
                failures.append((ind.id, err))
    if failures:
        raise EvaluationError(failures)

    out = []
    for ind in individuals:
        if ind.fitness is None:
            value, wall = results[ind.id]
            out.append(replace(ind, fitness=value))
            if audit is not None:
                audit.append(
                    {
                        "individual_id": ind.id,
                        "evaluator": evaluator.kind,
                        "fitness": value,
                        "wall_seconds": round(wall, 6),
                    }
                )
        else:
            out.append(ind)
    return out
