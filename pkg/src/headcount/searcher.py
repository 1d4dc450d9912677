"""Constrained sub-network search over trained supernet weights.

Candidates are scored directly from shared weights on a fixed validation
split (no retraining) and costed by the table-driven model. Evolutionary
search is the main engine; random and exhaustive modes share the same
cached fitness, with exhaustive doubling as the correctness oracle. Fronts
are non-dominated sets over (error, latency, daily energy), all minimized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import space as S
from .costmodel import CostEstimate, CostProfile, bottleneck_fraction, model_cost
from .trainer import DataSplit, evaluate


@dataclass(frozen=True)
class SearchConstraints:
    """Deployment budgets: real-time latency for one 5 s segment and a
    12 h energy allowance, plus the per-op bottleneck cap."""

    max_latency_ms: float = 5000.0
    max_daily_energy_mwh: float = 8400.0  # 700 mW * 12 h
    bottleneck_theta: float = 0.35

    def __post_init__(self):
        if min(self.max_latency_ms, self.max_daily_energy_mwh,
               self.bottleneck_theta) <= 0:
            raise ValueError("constraints must be positive")


@dataclass(frozen=True)
class Candidate:
    config: S.SubnetConfig
    encoding: tuple[int, ...]
    error: float
    cost: CostEstimate
    feasible: bool


class FitnessEvaluator:
    """Cached (error, cost, feasibility) evaluation keyed by config encoding."""

    def __init__(self, supernet: S.Supernet, val_data: DataSplit,
                 profile: CostProfile, constraints: SearchConstraints,
                 cost_input_len: int | None = None,
                 segment_seconds: float = 5.0, active_hours: float = 12.0,
                 batch_size: int = 64):
        self.supernet = supernet
        self.space = supernet.space
        self.val_data = val_data
        self.profile = profile
        self.constraints = constraints
        self.cost_input_len = cost_input_len or val_data.x.shape[1]
        self.segment_seconds = segment_seconds
        self.active_hours = active_hours
        self.batch_size = batch_size
        self._cache: dict[tuple[int, ...], Candidate] = {}

    @property
    def evaluations(self) -> int:
        return len(self._cache)

    def cost(self, config: S.SubnetConfig) -> CostEstimate:
        return model_cost(self.profile, self.space, config, self.cost_input_len,
                          self.segment_seconds, self.active_hours)

    def is_feasible(self, config: S.SubnetConfig) -> bool:
        """Budget and bottleneck checks only; no network evaluation."""
        est = self.cost(config)
        if est.latency_ms > self.constraints.max_latency_ms:
            return False
        if est.daily_energy_mwh > self.constraints.max_daily_energy_mwh:
            return False
        frac = bottleneck_fraction(self.profile, self.space, config,
                                   self.cost_input_len)
        return frac <= self.constraints.bottleneck_theta

    def evaluate(self, config: S.SubnetConfig) -> Candidate:
        key = config.encode(self.space)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        err = evaluate((self.supernet, config), self.val_data, self.batch_size)
        cand = Candidate(config=config, encoding=key, error=err,
                         cost=self.cost(config), feasible=self.is_feasible(config))
        self._cache[key] = cand
        return cand

    def sample_feasible(self, rng: np.random.Generator,
                        max_retries: int = 1000) -> S.SubnetConfig:
        try:
            return S.sample_uniform(self.space, rng, validator=self.is_feasible,
                                    max_retries=max_retries)
        except RuntimeError:
            raise RuntimeError("infeasible constraints: no feasible config found "
                               f"in {max_retries} probes") from None


def dominates(a: Candidate, b: Candidate) -> bool:
    """a is at least as good on all of (error, latency, energy), better on one."""
    ax = (a.error, a.cost.latency_ms, a.cost.daily_energy_mwh)
    bx = (b.error, b.cost.latency_ms, b.cost.daily_energy_mwh)
    return all(x <= y for x, y in zip(ax, bx)) and any(x < y for x, y in zip(ax, bx))


def pareto_front(candidates) -> list[Candidate]:
    """Non-dominated candidates, deduplicated by config encoding."""
    unique = {}
    for c in candidates:
        unique.setdefault(c.encoding, c)
    pool = sorted(unique.values(),
                  key=lambda c: (c.error, c.cost.latency_ms,
                                 c.cost.daily_energy_mwh, c.encoding))
    front: list[Candidate] = []
    for cand in pool:
        if any(dominates(kept, cand) for kept in front):
            continue
        front = [kept for kept in front if not dominates(cand, kept)]
        front.append(cand)
    return front


@dataclass
class SearchResult:
    best: Candidate
    history: list[tuple[int, float, float]] = field(default_factory=list)
    evaluated: list[Candidate] = field(default_factory=list)

    @property
    def front(self) -> list[Candidate]:
        return pareto_front(c for c in self.evaluated if c.feasible)


@dataclass(frozen=True)
class EvolutionParams:
    population: int = 64
    generations: int = 30
    mutation: float = 0.1
    crossover: float = 0.5
    tournament: int = 4


def _mutate(genes, space: S.SearchSpace, rng: np.random.Generator,
            rate: float) -> tuple[int, ...]:
    sizes = [len(choices) for st in space.stages
             for choices in (st.channels, st.repeats, st.kernels)]
    out = list(genes)
    for i, size in enumerate(sizes):
        if rng.random() < rate:
            out[i] = int(rng.integers(size))
    return tuple(out)


def _crossover(a, b, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(x if rng.random() < 0.5 else y for x, y in zip(a, b))


def evolutionary_search(evaluator: FitnessEvaluator, rng: np.random.Generator,
                        params: EvolutionParams = EvolutionParams()) -> SearchResult:
    """Generational GA with tournament selection, elitism, and one random
    immigrant per generation; infeasible offspring are resampled."""
    space = evaluator.space
    seen: list[Candidate] = []

    def record(config) -> Candidate:
        cand = evaluator.evaluate(config)
        seen.append(cand)
        return cand

    population = [record(evaluator.sample_feasible(rng))
                  for _ in range(params.population)]
    best = min(population, key=lambda c: (c.error, c.encoding))
    history = [(0, best.error, float(np.mean([c.error for c in population])))]

    for gen in range(1, params.generations + 1):
        children = [best.config, evaluator.sample_feasible(rng)]
        while len(children) < params.population:
            entrants = [population[rng.integers(len(population))]
                        for _ in range(params.tournament)]
            p1 = min(entrants, key=lambda c: (c.error, c.encoding))
            entrants = [population[rng.integers(len(population))]
                        for _ in range(params.tournament)]
            p2 = min(entrants, key=lambda c: (c.error, c.encoding))
            genes = (_crossover(p1.encoding, p2.encoding, rng)
                     if rng.random() < params.crossover else p1.encoding)
            genes = _mutate(genes, space, rng, params.mutation)
            child = S.SubnetConfig.decode(space, genes)
            if not evaluator.is_feasible(child):
                child = evaluator.sample_feasible(rng)
            children.append(child)
        population = [record(c) for c in children]
        gen_best = min(population, key=lambda c: (c.error, c.encoding))
        if (gen_best.error, gen_best.encoding) < (best.error, best.encoding):
            best = gen_best
        history.append((gen, best.error, float(np.mean([c.error for c in population]))))

    return SearchResult(best=best, history=history, evaluated=seen)


def random_search(evaluator: FitnessEvaluator, rng: np.random.Generator,
                  probes: int = 256) -> SearchResult:
    seen = [evaluator.evaluate(evaluator.sample_feasible(rng)) for _ in range(probes)]
    best = min(seen, key=lambda c: (c.error, c.encoding))
    history = [(i, min(c.error for c in seen[:i + 1]), seen[i].error)
               for i in range(len(seen))]
    return SearchResult(best=best, history=history, evaluated=seen)


def exhaustive_search(evaluator: FitnessEvaluator, cap: int = 10000) -> SearchResult:
    """Evaluate every feasible config; the testing oracle for other modes."""
    n = S.space_cardinality(evaluator.space)
    if n > cap:
        raise ValueError(f"space cardinality {n} exceeds the exhaustive cap {cap}; "
                         "restrict the space or raise the cap")
    seen = []
    best = None
    for config in S.all_configs(evaluator.space):
        if not evaluator.is_feasible(config):
            continue
        cand = evaluator.evaluate(config)
        seen.append(cand)
        if best is None or (cand.error, cand.encoding) < (best.error, best.encoding):
            best = cand
    if best is None:
        raise RuntimeError("infeasible constraints: no config satisfies the budgets")
    return SearchResult(best=best, history=[(0, best.error, best.error)],
                        evaluated=seen)
