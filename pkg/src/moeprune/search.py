"""Population search over feasible allocations with budget-preserving
level-switch mutations.

Each generation keeps the top-m members (ties to the earlier-inserted one)
and refills the population with offspring of uniformly sampled elites.  An
offspring applies tau composed level switches, tau drawn as the minimum of
two uniform draws on {1..mutation_cap}, which biases mutation toward small
local transfers while still allowing larger jumps.  A switch moves delta
pruning units from one layer to another, resampling infeasible triples up
to a bounded budget, so the global budget and per-layer caps are conserved
by construction.  Fitness values are memoized per allocation, so elites
and duplicate offspring never pay for a second forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .allocation import (
    Allocation,
    BudgetSpec,
    Parity,
    count_feasible,
    enumerate_feasible,
    is_feasible,
    patterned_allocations,
    random_allocation,
    uniform_allocation,
)
from .errors import FeasibilityError, ValidationError
from .fitness import FitnessKind, FitnessValue, dataset_fitness
from .model import MoEModel, apply_allocation

_RESAMPLE_BUDGET = 1000
_DISTINCT_ATTEMPTS = 200


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 32
    elite_size: int = 4
    generations: int = 20
    max_transfer: int = 4
    mutation_cap: int = 3
    seed: int = 42
    parity: Parity = Parity.ANY
    fitness: FitnessKind = FitnessKind.ESAP

    def __post_init__(self):
        object.__setattr__(self, "parity", Parity(self.parity))
        object.__setattr__(self, "fitness", FitnessKind(self.fitness))
        if self.population_size < 1:
            raise ValidationError(f"population_size must be >= 1, got {self.population_size}")
        if not (1 <= self.elite_size <= self.population_size):
            raise ValidationError(
                f"elite_size must lie in [1, population_size], got {self.elite_size} vs {self.population_size}"
            )
        if self.generations < 1:
            raise ValidationError(f"generations must be >= 1, got {self.generations}")
        if self.max_transfer < 1:
            raise ValidationError(f"max_transfer must be >= 1, got {self.max_transfer}")
        if self.mutation_cap < 1:
            raise ValidationError(f"mutation_cap must be >= 1, got {self.mutation_cap}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError(f"seed must be a non-negative 64-bit integer, got {self.seed}")

    def to_json(self) -> dict:
        return {
            "population_size": self.population_size,
            "elite_size": self.elite_size,
            "generations": self.generations,
            "max_transfer": self.max_transfer,
            "mutation_cap": self.mutation_cap,
            "seed": self.seed,
            "parity": self.parity.value,
            "fitness": self.fitness.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SearchConfig":
        known = {f: obj[f] for f in cls.__dataclass_fields__ if f in obj}
        unknown = [k for k in obj if k not in cls.__dataclass_fields__]
        if unknown:
            raise ValidationError(f"search config has unknown fields: {', '.join(unknown)}")
        return cls(**known)


@dataclass
class Population:
    members: list[tuple[Allocation, FitnessValue | None]]
    generation: int = 0


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best: float
    mean: float
    best_allocation: Allocation


@dataclass(frozen=True)
class SearchRun:
    config: SearchConfig
    history: tuple[GenerationStats, ...]
    best_allocation: Allocation
    best_fitness: FitnessValue
    evaluations: int
    stagnant_mutations: int
    seed: int

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "history": [
                {
                    "generation": g.generation,
                    "best": g.best,
                    "mean": g.mean,
                    "best_allocation": list(g.best_allocation),
                }
                for g in self.history
            ],
            "best_allocation": list(self.best_allocation),
            "best_fitness": {"value": self.best_fitness.value, "kind": self.best_fitness.kind.value},
            "evaluations": self.evaluations,
            "stagnant_mutations": self.stagnant_mutations,
            "seed": self.seed,
        }


def init_population(budget: BudgetSpec, config: SearchConfig, rng: np.random.Generator) -> Population:
    """Uniform seed, the three patterned seeds, then random feasible fill.

    Members are kept distinct as long as the feasible set allows: when it
    is no larger than the population, it is enumerated and fully covered
    before any duplicate is admitted.
    """
    patterns = patterned_allocations(budget)
    base = [uniform_allocation(budget)] + patterns
    if config.population_size < len(base):
        raise ValidationError(
            f"population_size {config.population_size} cannot hold the uniform and {len(patterns)} patterned seeds"
        )
    members = list(base)
    seen = set(members)
    remaining = config.population_size - len(members)
    if remaining > 0:
        if count_feasible(budget) <= config.population_size:
            for alloc in enumerate_feasible(budget, config.population_size):
                if remaining == 0:
                    break
                if alloc not in seen:
                    members.append(alloc)
                    seen.add(alloc)
                    remaining -= 1
        while remaining > 0:
            alloc = random_allocation(budget, rng)
            if alloc in seen:
                for _ in range(_DISTINCT_ATTEMPTS):
                    alloc = random_allocation(budget, rng)
                    if alloc not in seen:
                        break
            members.append(alloc)
            seen.add(alloc)
            remaining -= 1
    return Population(members=[(m, None) for m in members], generation=0)


def apply_level_switch(alloc: Allocation, gain: int, lose: int, delta: int) -> Allocation:
    """Transfer ``delta`` pruning units onto layer ``gain`` from layer ``lose``."""
    r = list(alloc)
    r[gain] += delta
    r[lose] -= delta
    return tuple(r)


def _draw_mutation_count(rng: np.random.Generator, mutation_cap: int) -> int:
    return int(rng.integers(1, mutation_cap + 1, size=2).min())


def _switch_possible(r, caps, min_delta: int) -> bool:
    donors = [i for i, v in enumerate(r) if v >= min_delta]
    receivers = [i for i, v in enumerate(r) if caps[i] - v >= min_delta]
    if not donors or not receivers:
        return False
    return len(donors) > 1 or len(receivers) > 1 or donors[0] != receivers[0]


def level_switch(
    parent: Allocation, budget: BudgetSpec, config: SearchConfig, rng: np.random.Generator
) -> Allocation:
    """Compose tau feasible level switches on a copy of the parent.

    When no feasible switch exists (singleton feasible sets) the parent is
    returned unchanged after the bounded resample budget.
    """
    layers = len(parent)
    if layers < 2:
        raise ValidationError("level switch requires at least two layers")
    if not is_feasible(parent, budget):
        raise FeasibilityError(f"parent {parent} is not feasible for the budget")
    step = 2 if config.parity is Parity.EVEN else 1
    deltas = list(range(step, config.max_transfer + 1, step))
    tau = _draw_mutation_count(rng, config.mutation_cap)
    caps = budget.effective_caps
    r = list(parent)
    for _ in range(tau):
        if not deltas or not _switch_possible(r, caps, deltas[0]):
            continue
        for _ in range(_RESAMPLE_BUDGET):
            gain = int(rng.integers(layers))
            lose = int(rng.integers(layers - 1))
            if lose >= gain:
                lose += 1
            delta = deltas[int(rng.integers(len(deltas)))]
            if r[lose] - delta >= 0 and r[gain] + delta <= caps[gain]:
                r[gain] += delta
                r[lose] -= delta
                break
    return tuple(r)


class _Evaluator:
    """Allocation-keyed fitness memo shared across generations."""

    def __init__(self, model, order, budget, dataset, cache, config, specdec_config):
        self._model = model
        self._order = order
        self._budget = budget
        self._dataset = dataset
        self._cache = cache
        self._config = config
        self._specdec_config = specdec_config
        self._rng = np.random.default_rng([config.seed, 1])
        self.memo: dict[Allocation, FitnessValue] = {}

    def __call__(self, alloc: Allocation) -> FitnessValue:
        if alloc not in self.memo:
            pruned = apply_allocation(self._model, self._order, alloc)
            if self._config.fitness is FitnessKind.SPEC_DEC:
                from .specdec import specdec_fitness

                if self._specdec_config is None:
                    raise ValidationError("specdec fitness requires a decoding config")
                value = specdec_fitness(self._model, pruned, self._specdec_config)
            else:
                value = dataset_fitness(self._cache, pruned, self._dataset, self._config.fitness, rng=self._rng)
            self.memo[alloc] = value
        return self.memo[alloc]


def _top_m(members: list[Allocation], values: list[FitnessValue], m: int) -> list[Allocation]:
    ranked = sorted(range(len(members)), key=lambda i: -values[i].value)
    return [members[i] for i in ranked[:m]]


def run_search(
    model: MoEModel,
    order,
    budget: BudgetSpec,
    dataset,
    cache,
    config: SearchConfig,
    *,
    specdec_config=None,
) -> SearchRun:
    """Full evolutionary run; the best allocation is tracked from generation
    zero onward, so elitism makes the best-so-far fitness non-decreasing."""
    if config.parity is not budget.parity:
        raise ValidationError(
            f"search parity {config.parity.value} disagrees with budget parity {budget.parity.value}"
        )
    layers = budget.num_layers
    rng = np.random.default_rng([config.seed, 0])
    evaluate = _Evaluator(model, order, budget, dataset, cache, config, specdec_config)

    members = [alloc for alloc, _ in init_population(budget, config, rng).members]
    values = [evaluate(m) for m in members]
    stagnant = 0

    def current_best() -> tuple[Allocation, FitnessValue]:
        best_i = 0
        for i in range(1, len(members)):
            if values[i].value > values[best_i].value:
                best_i = i
        return members[best_i], values[best_i]

    best_alloc, best_value = current_best()
    history = [
        GenerationStats(
            generation=0,
            best=best_value.value,
            mean=float(np.mean([v.value for v in values])),
            best_allocation=best_alloc,
        )
    ]

    for t in range(config.generations):
        elites = _top_m(members, values, config.elite_size)
        members = list(elites)
        while len(members) < config.population_size:
            parent = elites[int(rng.integers(len(elites)))]
            child = level_switch(parent, budget, config, rng) if layers >= 2 else parent
            if child == parent:
                stagnant += 1
            members.append(child)
        values = [evaluate(m) for m in members]
        gen_best_alloc, gen_best_value = current_best()
        if gen_best_value.value > best_value.value:
            best_alloc, best_value = gen_best_alloc, gen_best_value
        history.append(
            GenerationStats(
                generation=t + 1,
                best=gen_best_value.value,
                mean=float(np.mean([v.value for v in values])),
                best_allocation=best_alloc,
            )
        )

    return SearchRun(
        config=config,
        history=tuple(history),
        best_allocation=best_alloc,
        best_fitness=best_value,
        evaluations=len(evaluate.memo),
        stagnant_mutations=stagnant,
        seed=config.seed,
    )


def brute_force_table(
    model: MoEModel,
    order,
    budget: BudgetSpec,
    dataset,
    cache,
    limit: int,
    kind: FitnessKind = FitnessKind.ESAP,
    rng: np.random.Generator | None = None,
) -> list[tuple[Allocation, FitnessValue]]:
    """Fitness of every feasible allocation, in lexicographic order."""
    allocs = enumerate_feasible(budget, limit)
    out = []
    for alloc in allocs:
        pruned = apply_allocation(model, order, alloc)
        out.append((alloc, dataset_fitness(cache, pruned, dataset, kind, rng=rng)))
    return out


def brute_force_best(
    model: MoEModel,
    order,
    budget: BudgetSpec,
    dataset,
    cache,
    limit: int,
    kind: FitnessKind = FitnessKind.ESAP,
) -> tuple[Allocation, FitnessValue]:
    """Exhaustive argmax; ties resolve to the lexicographically first allocation."""
    table = brute_force_table(model, order, budget, dataset, cache, limit, kind)
    best_alloc, best_value = table[0]
    for alloc, value in table[1:]:
        if value.value > best_value.value:
            best_alloc, best_value = alloc, value
    return best_alloc, best_value
