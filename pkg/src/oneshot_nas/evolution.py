"""Constrained evolutionary search over genotypes, plus a random-search baseline.

Fitness is any callable ``genotype -> float`` (higher is better). In the
pipeline it is :class:`SupernetFitness`, which scores an architecture with
inherited supernet weights after BN recalibration; the tests also plug in
cheap surrogates.

One generation: pair up the population at random, cross each pair over
with probability ``crossover`` (uniform per-layer swap), mutate every gene
of each child with probability ``mutation``, redraw children that break the
FLOPs budget, then keep the best ``population`` individuals of parents and
offspring together. Ties are broken by lower FLOPs, then by the encoded
genotype string, so a run is fully determined by its seed.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConstraintError, StageError, UsageError
from .heads import TASK_METRIC, evaluate
from .space import (
    MAX_REJECTION_TRIES,
    Genotype,
    ResourceReport,
    count_resources,
    encode_genotype,
    flops_range,
    layer_choices,
    random_genotype,
    sample_distinct,
    space_size,
)
from .supernet import SubnetView, bn_recalibrate

@dataclass(frozen=True)
class EvoConfig:
    population: int = 50
    generations: int = 30
    crossover: float = 0.5
    mutation: float = 0.25
    max_flops: int = None
    recal_batches: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.crossover <= 1.0 or not 0.0 <= self.mutation <= 1.0:
            raise UsageError("crossover and mutation ratios must lie in [0, 1]")
        if self.population < 2 or self.population % 2:
            raise UsageError("population must be an even number >= 2")
        if self.generations < 0:
            raise UsageError("generations must be >= 0")

    @property
    def budget(self):
        """Fitness calls made by a full run."""
        return self.population * (self.generations + 1)

    def to_dict(self):
        return asdict(self)


@dataclass
class Individual:
    genotype: Genotype
    resources: ResourceReport
    fitness: float = None

    def to_dict(self):
        return {"genotype": encode_genotype(self.genotype), "fitness": self.fitness,
                "flops": self.resources.flops, "params": self.resources.params}


def selection_key(ind):
    return (-ind.fitness, ind.resources.flops, encode_genotype(ind.genotype))


class CachedFitness:
    """Memoises a fitness callable by genotype and counts calls and misses."""

    def __init__(self, fn, jobs=1):
        self.fn = fn
        self.jobs = jobs
        self.cache = {}
        self.calls = 0

    def __call__(self, genotype):
        return self.many([genotype])[0]

    def many(self, genotypes):
        """Scores in input order; uncached genotypes may be scored concurrently."""
        self.calls += len(genotypes)
        todo = list(dict.fromkeys(g for g in genotypes if g not in self.cache))
        if self.jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                scores = list(pool.map(self.fn, todo))
        else:
            scores = [self.fn(g) for g in todo]
        for g, s in zip(todo, scores):
            self.cache[g] = float(s)
        return [self.cache[g] for g in genotypes]

    @property
    def misses(self):
        return len(self.cache)


class SupernetFitness:
    """Inherited-weight validation metric of a genotype.

    The store must have been fine-tuned for ``dataset``'s task unless
    ``allow_unfinetuned`` is set (used by the no-fine-tuning ablation).
    """

    def __init__(self, store, dataset, split="val", recal_batches=8, batch_size=128,
                 allow_unfinetuned=False):
        task = dataset.task
        if not allow_unfinetuned and store.stage != f"finetuned:{task}":
            raise StageError(f"search needs a store fine-tuned for {task}, "
                             f"got stage {store.stage!r}")
        if store.head is None or store.head.task != task:
            raise StageError(f"store carries no {task} head")
        self.store = store
        self.dataset = dataset
        self.split = dataset.split(split)
        self.recal_batches = recal_batches
        self.batch_size = batch_size
        self.metric = TASK_METRIC[task]

    def __call__(self, genotype):
        view = SubnetView(self.store, genotype)
        bn_recalibrate(view, self.dataset.train.image_batches(self.batch_size),
                       self.recal_batches)
        report = evaluate(view, self.split.images, self.split.labels,
                          batch_size=self.batch_size)
        return report["metrics"][self.metric]


def crossover(a, b, rng):
    """Swap each layer's gene between the two children with probability 0.5."""
    if len(a) != len(b):
        raise UsageError("parents have different depths")
    swap = rng.uniform(size=len(a)) < 0.5
    c1 = tuple(gb if s else ga for ga, gb, s in zip(a, b, swap))
    c2 = tuple(ga if s else gb for ga, gb, s in zip(a, b, swap))
    return Genotype(c1), Genotype(c2)


def mutate(genotype, rate, rng, space):
    """Redraw each gene uniformly from the layer's choices with probability ``rate``."""
    choices = layer_choices(space)
    hit = rng.uniform(size=len(genotype)) < rate
    picks = rng.integers(len(choices), size=len(genotype))
    return Genotype(tuple(choices[p] if h else g for g, h, p in zip(genotype, hit, picks)))


def environment_selection(pool, k):
    """Best ``k`` of ``pool`` (elitist truncation, deterministic ties)."""
    return sorted(pool, key=selection_key)[:k]


def _individual(space, genotype):
    return Individual(genotype, count_resources(space, genotype))


def _check_budget(space, max_flops):
    if max_flops is None:
        return
    lo = flops_range(space)[0]
    if max_flops < lo:
        raise ConstraintError(f"budget {max_flops} is below the smallest network ({lo} flops)")


def _feasible(ind, max_flops):
    return max_flops is None or ind.resources.flops <= max_flops


def _offspring(parents, space, config, rng):
    order = rng.permutation(len(parents))
    children = []
    for i in range(0, len(order), 2):
        pa, pb = parents[order[i]], parents[order[i + 1]]
        kids = [None, None]
        for _ in range(MAX_REJECTION_TRIES):
            if rng.uniform() < config.crossover:
                ga, gb = crossover(pa.genotype, pb.genotype, rng)
            else:
                ga, gb = pa.genotype, pb.genotype
            for j, g in enumerate((ga, gb)):
                if kids[j] is None:
                    ind = _individual(space, mutate(g, config.mutation, rng, space))
                    if _feasible(ind, config.max_flops):
                        kids[j] = ind
            if kids[0] is not None and kids[1] is not None:
                break
        # parents are feasible, so falling back to a copy keeps the invariant
        children += [kids[0] or _individual(space, pa.genotype),
                     kids[1] or _individual(space, pb.genotype)]
    return children


def _score(individuals, fitness):
    for ind, f in zip(individuals, fitness.many([i.genotype for i in individuals])):
        ind.fitness = f


def _summary(generation, population):
    fits = [ind.fitness for ind in population]
    best = min(population, key=selection_key)
    return {"generation": generation, "best": max(fits), "mean": float(np.mean(fits)),
            "worst": min(fits), "best_genotype": encode_genotype(best.genotype)}


@dataclass
class SearchResult:
    best: Individual
    population: list
    history: list
    evaluations: int
    unique_evaluations: int
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"best": self.best.to_dict(), "evaluations": self.evaluations,
                "unique_evaluations": self.unique_evaluations, "config": self.config,
                "history": self.history}


def evolutionary_search(fitness, space, config, log=None, jobs=1):
    """Run the EA; ``fitness`` is a callable or a :class:`CachedFitness`."""
    _check_budget(space, config.max_flops)
    fit = fitness if isinstance(fitness, CachedFitness) else CachedFitness(fitness, jobs)
    rng = np.random.default_rng(config.seed)
    k = config.population
    if k > space_size(space):
        raise ConstraintError(f"population {k} exceeds the {space_size(space)} genotypes of the space")
    population = [_individual(space, g)
                  for g in sample_distinct(space, k, rng, max_flops=config.max_flops)]
    _score(population, fit)
    population = environment_selection(population, k)
    history = [_summary(0, population)]
    if log is not None:
        log(history[-1])
    for gen in range(1, config.generations + 1):
        children = _offspring(population, space, config, rng)
        _score(children, fit)
        population = environment_selection(population + children, k)
        history.append(_summary(gen, population))
        if log is not None:
            log(history[-1])
    return SearchResult(population[0], population, history, fit.calls, fit.misses,
                        config.to_dict())


def random_search(fitness, space, budget, max_flops=None, seed=0, jobs=1):
    """Best of ``budget`` uniform feasible draws (duplicates allowed)."""
    if budget < 1:
        raise UsageError("budget must be >= 1")
    _check_budget(space, max_flops)
    fit = fitness if isinstance(fitness, CachedFitness) else CachedFitness(fitness, jobs)
    rng = np.random.default_rng(seed)
    sampled = [_individual(space, random_genotype(space, rng, max_flops)) for _ in range(budget)]
    _score(sampled, fit)
    ranked = sorted(sampled, key=selection_key)
    history = [{"generation": 0, "best": ranked[0].fitness,
                "mean": float(np.mean([i.fitness for i in sampled])),
                "worst": ranked[-1].fitness, "best_genotype": encode_genotype(ranked[0].genotype)}]
    return SearchResult(ranked[0], ranked, history, fit.calls, fit.misses,
                        {"budget": budget, "max_flops": max_flops, "seed": seed})


HISTORY_FIELDS = ("generation", "best", "mean", "worst", "best_genotype")


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in history:
        writer.writerow([row["generation"], repr(row["best"]), repr(row["mean"]),
                         repr(row["worst"]), row["best_genotype"]])
    return buf.getvalue()
