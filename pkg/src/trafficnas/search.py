"""Constraint-filtered evolutionary search over block genomes.

Each generation mutates the current parent into ``population`` children,
rejects children that break a hardware threshold before any training, trains
the rest with multi-start, and promotes the best of parent and children.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cost import BASELINE_MINIMA, CostReport, Thresholds, check_constraints, estimate_cost
from .nn import Network, TrainConfig, TrainOutcome, multi_start_train
from .space import ExhaustedRetries, Genome, SpaceBounds, mutate, random_genome

logger = logging.getLogger(__name__)


class SearchError(Exception):
    pass


class RetryCapExceeded(SearchError):
    pass


class NoFeasibleGenome(SearchError):
    pass


class ConstraintViolation(SearchError):
    pass


@dataclass
class SearchConfig:
    generations: int = 100
    population: int = 10
    thresholds: Thresholds = BASELINE_MINIMA
    bounds: SpaceBounds = field(default_factory=SpaceBounds)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    candidate_retry_cap: int = 25
    init_retry_cap: int = 1000
    jobs: int = 1

    def __post_init__(self):
        if self.generations < 1 or self.population < 1:
            raise ValueError("generations and population must be >= 1")
        if self.candidate_retry_cap < 1 or self.init_retry_cap < 1 or self.jobs < 1:
            raise ValueError("retry caps and jobs must be >= 1")


@dataclass
class Candidate:
    genome: Genome
    cost: CostReport
    outcome: TrainOutcome
    generation: int
    child_index: int

    @property
    def val_accuracy(self) -> float:
        return self.outcome.best_val_accuracy

    @property
    def ident(self) -> str:
        return f"{self.generation}:{self.child_index}"

    def selection_key(self):
        return (self.val_accuracy, -self.cost.flops, -self.cost.params)

    def network(self, input_len: int = 784) -> Network:
        if self.outcome.best_weights is None:
            raise SearchError(f"weights of candidate {self.ident} were discarded")
        net = Network(self.genome, input_len=input_len)
        net.set_weights(self.outcome.best_weights)
        return net


@dataclass
class LogRecord:
    generation: int
    child: int
    cost: Optional[CostReport]
    val_acc: Optional[float]
    status: str  # "trained" or "rejected"
    genome_text: str = ""

    def to_line(self) -> str:
        c = self.cost or CostReport(0, 0, 0, 0, 0)
        acc = "nan" if self.val_acc is None else f"{self.val_acc:.6f}"
        return (f"gen={self.generation} child={self.child} params={c.params} tensor={c.max_tensor} "
                f"flops={c.flops} val_acc={acc} status={self.status}")


@dataclass
class GenerationRecord:
    generation: int
    parent: str
    rejected_genomes: int
    children: list = field(default_factory=list)
    best_so_far: float = math.nan


@dataclass
class SearchLog:
    records: list = field(default_factory=list)
    generations: list = field(default_factory=list)

    @property
    def trajectory(self) -> list[float]:
        return [g.best_so_far for g in self.generations]

    def trained(self) -> list[LogRecord]:
        return [r for r in self.records if r.status == "trained"]

    def to_text(self) -> str:
        lines = []
        by_gen = {}
        for r in self.records:
            by_gen.setdefault(r.generation, []).append(r)
        for g in self.generations:
            lines.append(f"# generation={g.generation} parent={g.parent} "
                         f"rejected_genomes={g.rejected_genomes} best_so_far={g.best_so_far:.6f}")
            lines.extend(r.to_line() for r in by_gen.pop(g.generation, []))
        for gen in sorted(by_gen):
            lines.extend(r.to_line() for r in by_gen[gen])
        return "\n".join(lines) + "\n"


def derived_seed(seed: int, generation: int, child_index: int) -> int:
    return int(np.random.SeedSequence([seed, generation, child_index]).generate_state(1)[0])


def is_feasible(g: Genome, cfg: SearchConfig) -> bool:
    return not check_constraints(estimate_cost(g, cfg.bounds.input_len), cfg.thresholds)


def spawn_child(parent: Genome, cfg: SearchConfig, rng: np.random.Generator,
                rejected: Optional[list] = None) -> Genome:
    """Mutate ``parent`` until the child is shape-valid and inside every threshold."""
    for _ in range(cfg.candidate_retry_cap):
        try:
            child = mutate(parent, cfg.bounds, rng)
        except ExhaustedRetries:
            continue
        if is_feasible(child, cfg):
            return child
        if rejected is not None:
            rejected.append(child)
    raise RetryCapExceeded(f"no feasible child in {cfg.candidate_retry_cap} attempts")


def evaluate_candidate(genome: Genome, data_splits, cfg: SearchConfig,
                       generation: int = 0, child_index: int = 0) -> Candidate:
    """Multi-start training on (train, val) only; infeasible genomes never reach training."""
    cost = estimate_cost(genome, cfg.bounds.input_len)
    violations = check_constraints(cost, cfg.thresholds)
    if violations:
        raise ConstraintViolation("; ".join(map(str, violations)))
    seed = derived_seed(cfg.seed, generation, child_index)
    _, outcome = multi_start_train(genome, data_splits[:2], cfg.train_cfg, seed=seed,
                                   input_len=cfg.bounds.input_len)
    return Candidate(genome, cost, outcome, generation, child_index)


_worker_splits = None


def _init_worker(splits):
    global _worker_splits
    _worker_splits = splits


def _evaluate_job(args):
    genome, cfg, generation, child_index = args
    return evaluate_candidate(genome, _worker_splits, cfg, generation, child_index)


def _initial_parent(cfg: SearchConfig, rng: np.random.Generator) -> Genome:
    for _ in range(cfg.init_retry_cap):
        try:
            g = random_genome(cfg.bounds, rng)
        except ExhaustedRetries as exc:
            raise NoFeasibleGenome(str(exc)) from None
        if is_feasible(g, cfg):
            return g
    raise NoFeasibleGenome(f"no random genome met the thresholds in {cfg.init_retry_cap} draws")


def run_search(cfg: SearchConfig, data_splits,
               on_record: Optional[Callable[[LogRecord], None]] = None):
    """Run the search; returns ``(best_candidate, SearchLog)``.

    ``data_splits`` is ``(train_set, val_set)`` with each set a
    ``(samples, labels)`` pair; a test split is never looked at.
    """
    data_splits = tuple(data_splits[:2])
    rng = np.random.default_rng(cfg.seed)
    parent_genome = _initial_parent(cfg, rng)
    parent: Optional[Candidate] = None
    best_acc = -math.inf
    log = SearchLog()
    pool = None
    if cfg.jobs > 1:
        pool = ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(data_splits,))

    def emit(record):
        log.records.append(record)
        if on_record is not None:
            on_record(record)

    try:
        for gen in range(1, cfg.generations + 1):
            rejected: list = []
            gen_rec = GenerationRecord(gen, parent.ident if parent else "init", 0)
            slots = []
            for child_index in range(cfg.population):
                try:
                    slots.append((child_index, spawn_child(parent_genome, cfg, rng, rejected)))
                except RetryCapExceeded:
                    slots.append((child_index, None))

            jobs = [(g, cfg, gen, ci) for ci, g in slots if g is not None]
            if pool is not None:
                results = list(pool.map(_evaluate_job, jobs))
            else:
                results = [evaluate_candidate(g, data_splits, cfg, gen_, ci) for g, _, gen_, ci in jobs]
            by_slot = {c.child_index: c for c in results}

            for child_index, g in slots:
                cand = by_slot.get(child_index)
                if cand is None:
                    cost = estimate_cost(rejected[-1], cfg.bounds.input_len) if rejected else None
                    emit(LogRecord(gen, child_index, cost, None, "rejected"))
                else:
                    emit(LogRecord(gen, child_index, cand.cost, cand.val_accuracy, "trained",
                                   cand.genome.to_text()))
            gen_rec.rejected_genomes = len(rejected)
            gen_rec.children = [c.ident for c in results]

            pool_ = ([parent] if parent is not None else []) + results
            if pool_:
                chosen = max(pool_, key=Candidate.selection_key)
                for c in results:
                    if c is not chosen:
                        c.outcome.best_weights = None
                if chosen is not parent:
                    parent = chosen
                    parent_genome = chosen.genome
                best_acc = max(best_acc, parent.val_accuracy)
            gen_rec.best_so_far = best_acc
            log.generations.append(gen_rec)
            logger.info("generation %d: %d trained, %d rejected genomes, parent %s, best %.4f",
                        gen, len(results), len(rejected), parent.ident if parent else "init", best_acc)
    finally:
        if pool is not None:
            pool.shutdown()

    if parent is None:
        # every child slot was rejected (e.g. a one-genome space): fall back to the initial parent
        parent = evaluate_candidate(parent_genome, data_splits, cfg, 0, 0)
        emit(LogRecord(0, 0, parent.cost, parent.val_accuracy, "trained", parent.genome.to_text()))
        for g in log.generations:
            g.best_so_far = parent.val_accuracy
    return parent, log
