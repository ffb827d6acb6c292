"""Evolutionary loop: seeded initialization, tournament selection, uniform
crossover, gene re-randomization, conditional pixel cleaning, and full
generational replacement (no elitism) under linearly decaying operator rates.

Randomness discipline: every stochastic decision draws from the single run
generator in a fixed order. Fitness evaluation consumes no randomness, so
parallelizing it cannot perturb the stream.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .fitness import EpsilonSchedule, FitnessReport, epsilon_at, evaluate_population
from .oracle import ClassifierOracle
from .reporting import GenerationRecord
from .tensors import (
    NormalizationSpec,
    Perturbation,
    PerturbationBounds,
    compute_bounds,
    l2_norm_255,
)

Reporter = Callable[[GenerationRecord, Perturbation], None]


@dataclass(frozen=True)
class GaConfig:
    """Run parameters. Defaults follow the reference setup."""

    population_size: int = 50
    tournament_size: int = 3
    p_cross_start: float = 0.9
    p_cross_end: float = 0.4
    p_mut_start: float = 0.6
    p_mut_end: float = 0.2
    p_flip: float = 0.005
    lambda_t0: float = 0.05
    init_density: float = 0.01
    max_generations: int = 64
    convergence_delta: float = 0.0
    gamma_desired: float | None = None
    batch_rotation_period: int = 4
    rng_seed: int = 0
    eps_start: float = 85.0
    eps_end: float = 35.0
    penalty_lambda: float = 0.01
    gamma_mode: str = "rate"
    checkpoint_period: int = 16
    bound_sample_batches: int = 8

    def __post_init__(self):
        def bad(msg: str) -> ConfigError:
            return ConfigError(f"invalid config: {msg}")

        if self.population_size < 1:
            raise bad(f"population_size must be >= 1, got {self.population_size}")
        if not 1 <= self.tournament_size <= self.population_size:
            raise bad(
                f"tournament_size must be in [1, population_size], got {self.tournament_size}"
            )
        if not 0.0 <= self.p_cross_end <= self.p_cross_start <= 1.0:
            raise bad(
                f"need 0 <= p_cross_end <= p_cross_start <= 1, "
                f"got {self.p_cross_end}, {self.p_cross_start}"
            )
        if not 0.0 <= self.p_mut_end <= self.p_mut_start <= 1.0:
            raise bad(
                f"need 0 <= p_mut_end <= p_mut_start <= 1, "
                f"got {self.p_mut_end}, {self.p_mut_start}"
            )
        if not 0.0 < self.p_flip <= 1.0:
            raise bad(f"p_flip must be in (0, 1], got {self.p_flip}")
        if not 0.0 <= self.lambda_t0 <= 1.0:
            raise bad(f"lambda_t0 must be in [0, 1], got {self.lambda_t0}")
        # density 0 is degenerate (all-zero start) but allowed for testing
        if not 0.0 <= self.init_density <= 1.0:
            raise bad(f"init_density must be in [0, 1], got {self.init_density}")
        if self.max_generations < 1:
            raise bad(f"max_generations must be >= 1, got {self.max_generations}")
        if self.convergence_delta < 0.0:
            raise bad(f"convergence_delta must be >= 0, got {self.convergence_delta}")
        if self.gamma_desired is not None and not 0.0 <= self.gamma_desired <= 1.0:
            raise bad(f"gamma_desired must be in [0, 1], got {self.gamma_desired}")
        if self.batch_rotation_period < 1:
            raise bad(f"batch_rotation_period must be >= 1, got {self.batch_rotation_period}")
        if not 0.0 < self.eps_end <= self.eps_start:
            raise bad(f"need eps_start >= eps_end > 0, got {self.eps_start}, {self.eps_end}")
        if self.penalty_lambda < 0.0:
            raise bad(f"penalty_lambda must be >= 0, got {self.penalty_lambda}")
        if self.gamma_mode not in ("rate", "weighted"):
            raise bad(f"gamma_mode must be 'rate' or 'weighted', got {self.gamma_mode!r}")
        if self.checkpoint_period < 1:
            raise bad(f"checkpoint_period must be >= 1, got {self.checkpoint_period}")
        if self.bound_sample_batches < 1:
            raise bad(f"bound_sample_batches must be >= 1, got {self.bound_sample_batches}")


@dataclass
class Population:
    chromosomes: list[Perturbation]
    generation: int = 0


@dataclass
class RunResult:
    best: Perturbation
    best_report: FitnessReport
    history: list[GenerationRecord]
    termination_reason: str  # max_generations | converged | desired_fitness


def schedule_linear(start: float, end: float, g: int, total: int) -> float:
    """Linear decay from start (g=0) to end (g=total).

    Evaluated as a convex combination so both endpoints are hit exactly in
    floating point.
    """
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if not 0 <= g <= total:
        raise ValueError(f"generation {g} outside schedule range [0, {total}]")
    t = g / total
    return start * (1.0 - t) + end * t


@dataclass(frozen=True)
class Schedules:
    """Operator-rate and epsilon schedules shared by one run.

    All tracks span the same horizon: generation 0 gets the start values and
    the last evaluated generation (max_generations - 1) gets the end values.
    """

    epsilon: EpsilonSchedule
    p_cross_start: float = 0.9
    p_cross_end: float = 0.4
    p_mut_start: float = 0.6
    p_mut_end: float = 0.2

    @property
    def total_generations(self) -> int:
        return self.epsilon.total_generations

    @classmethod
    def from_config(cls, cfg: GaConfig) -> "Schedules":
        total = max(cfg.max_generations - 1, 1)
        return cls(
            epsilon=EpsilonSchedule(cfg.eps_start, cfg.eps_end, total),
            p_cross_start=cfg.p_cross_start,
            p_cross_end=cfg.p_cross_end,
            p_mut_start=cfg.p_mut_start,
            p_mut_end=cfg.p_mut_end,
        )

    def p_cross(self, g: int) -> float:
        return schedule_linear(self.p_cross_start, self.p_cross_end, g, self.total_generations)

    def p_mut(self, g: int) -> float:
        return schedule_linear(self.p_mut_start, self.p_mut_end, g, self.total_generations)

    def eps(self, g: int) -> float:
        return epsilon_at(self.epsilon, g)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def init_population(
    bounds: PerturbationBounds, cfg: GaConfig, rng: np.random.Generator
) -> Population:
    """Sparse start: an expected init_density fraction of genes is uniform in
    [lower, upper], the rest exactly zero."""
    chromosomes = []
    for _ in range(cfg.population_size):
        active = rng.random(bounds.shape) < cfg.init_density
        values = rng.uniform(bounds.lower, bounds.upper, bounds.shape)
        chromosomes.append(Perturbation(np.where(active, values, 0.0)))
    return Population(chromosomes, generation=0)


def tournament_select(
    population: Population,
    reports: Sequence[FitnessReport],
    tournament_size: int,
    rng: np.random.Generator,
) -> int:
    """Pick tournament_size distinct entrants uniformly; return the index of
    the one with the highest net fitness, ties going to the lower index."""
    r = len(population.chromosomes)
    if not 1 <= tournament_size <= r:
        raise ValueError(f"tournament_size must be in [1, {r}], got {tournament_size}")
    entrants = rng.choice(r, size=tournament_size, replace=False)
    return min((int(i) for i in entrants), key=lambda i: (-reports[i].net_fitness, i))


def uniform_crossover(
    a: Perturbation, b: Perturbation, rng: np.random.Generator
) -> tuple[Perturbation, Perturbation]:
    """Per-gene coin flip; the second child takes the complementary choice at
    every locus."""
    if a.genes.shape != b.genes.shape:
        raise ShapeError(f"parent shapes differ: {a.genes.shape} vs {b.genes.shape}")
    from_a = rng.random(a.genes.shape) < 0.5
    return (
        Perturbation(np.where(from_a, a.genes, b.genes)),
        Perturbation(np.where(from_a, b.genes, a.genes)),
    )


def mutate(
    chromosome: Perturbation,
    bounds: PerturbationBounds,
    p_flip: float,
    rng: np.random.Generator,
) -> Perturbation:
    """Re-randomization: each gene is independently resampled uniformly from
    [lower, upper] with probability p_flip."""
    flip = rng.random(chromosome.genes.shape) < p_flip
    fresh = rng.uniform(bounds.lower, bounds.upper, chromosome.genes.shape)
    return Perturbation(np.where(flip, fresh, chromosome.genes))


def pixel_clean(
    chromosome: Perturbation,
    report: FitnessReport,
    lambda_t0: float,
    rng: np.random.Generator,
) -> Perturbation:
    """Zero genes with probability lambda_t0 while the norm bound is violated.

    Only report.l2_255 and report.epsilon are read; callers are expected to
    pass a report whose l2_255 is this chromosome's own norm (step_generation
    computes it directly, no oracle needed). Within the bound the operator is
    disabled and the input is returned untouched.
    """
    if report.l2_255 <= report.epsilon:
        return chromosome
    keep = rng.random(chromosome.genes.shape) >= lambda_t0
    return Perturbation(np.where(keep, chromosome.genes, 0.0))


def _norm_only_report(delta: Perturbation, epsilon: float, norm: NormalizationSpec) -> FitnessReport:
    # carrier for the pixel-clean condition; fitness fields intentionally zero
    return FitnessReport(
        gamma=0.0,
        mse_255=0.0,
        l2_255=l2_norm_255(delta, norm),
        epsilon=epsilon,
        penalty=0.0,
        net_fitness=0.0,
        mean_confidence_true=0.0,
    )


def step_generation(
    state: Population,
    reports: Sequence[FitnessReport],
    cfg: GaConfig,
    bounds: PerturbationBounds,
    schedules: Schedules,
    rng: np.random.Generator,
    norm: NormalizationSpec,
) -> Population:
    """Build the next generation of exactly population_size offspring.

    Per pairing: two tournament winners; crossover with probability p_cross(g)
    (otherwise cloned); each child then passes pixel_clean, and with
    probability p_mut(g) is mutated. No parent or previous best survives
    unless re-created by the operators.
    """
    if len(reports) != len(state.chromosomes):
        raise ValueError(
            f"got {len(reports)} reports for {len(state.chromosomes)} chromosomes"
        )
    g = state.generation
    p_c = schedules.p_cross(min(g, schedules.total_generations))
    p_m = schedules.p_mut(min(g, schedules.total_generations))
    eps_now = reports[0].epsilon
    offspring: list[Perturbation] = []
    while len(offspring) < cfg.population_size:
        i = tournament_select(state, reports, cfg.tournament_size, rng)
        j = tournament_select(state, reports, cfg.tournament_size, rng)
        pa, pb = state.chromosomes[i], state.chromosomes[j]
        if rng.random() < p_c:
            c1, c2 = uniform_crossover(pa, pb, rng)
        else:
            c1, c2 = pa.copy(), pb.copy()
        # odd population: the final pairing contributes a single child
        for child in (c1, c2)[: cfg.population_size - len(offspring)]:
            child = pixel_clean(child, _norm_only_report(child, eps_now, norm), cfg.lambda_t0, rng)
            if rng.random() < p_m:
                child = mutate(child, bounds, cfg.p_flip, rng)
            offspring.append(child)
    return Population(offspring, generation=g + 1)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, population: Population, rng: np.random.Generator) -> None:
    """Atomic dump of genes + generation index + generator state."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            genes=np.stack([c.genes for c in population.chromosomes]),
            generation=np.int64(population.generation),
            rng_state=np.array(json.dumps(rng.bit_generator.state)),
        )
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[Population, np.random.Generator]:
    with np.load(path) as data:
        genes = data["genes"]
        generation = int(data["generation"])
        state = json.loads(data["rng_state"].item())
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return Population([Perturbation(g) for g in genes], generation), rng


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

def _best_index(reports: Sequence[FitnessReport]) -> int:
    return min(range(len(reports)), key=lambda i: (-reports[i].net_fitness, i))


def run(
    oracle: ClassifierOracle,
    source,
    cfg: GaConfig,
    schedules: Optional[Schedules] = None,
    reporter: Optional[Reporter] = None,
    *,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    n_workers: int = 1,
    clock: Optional[Callable[[], float]] = None,
) -> RunResult:
    """Drive the attack until a termination criterion fires.

    Each iteration: fetch the rotating batch, evaluate the population, emit a
    GenerationRecord (via reporter, if given), then test termination in order
    max_generations -> converged -> desired_fitness. The convergence test
    compares best gamma only between consecutive generations on the same
    batch and needs two consecutive sub-delta differences. The returned best
    is the top net-fitness chromosome of the final evaluated generation.
    """
    from .data import batch_at, bound_sample

    if schedules is None:
        schedules = Schedules.from_config(cfg)
    if clock is None:
        clock = time.perf_counter
    norm = source.normalization
    bounds = compute_bounds(bound_sample(source, cfg.bound_sample_batches))

    if resume_from is not None:
        population, rng = load_checkpoint(resume_from)
    else:
        rng = np.random.default_rng(cfg.rng_seed)
        population = init_population(bounds, cfg, rng)

    history: list[GenerationRecord] = []
    prev_gamma: float | None = None
    prev_batch_id: int | None = None
    convergence_hits = 0

    while True:
        t0 = clock()
        g = population.generation
        g_s = min(g, schedules.total_generations)
        batch = batch_at(source, g, cfg.batch_rotation_period)
        reports = evaluate_population(
            oracle,
            population.chromosomes,
            batch,
            g_s,
            schedules.epsilon,
            cfg.penalty_lambda,
            norm,
            mode=cfg.gamma_mode,
            n_workers=n_workers,
        )
        best_idx = _best_index(reports)
        best_report = reports[best_idx]
        record = GenerationRecord(
            generation=g,
            batch_id=batch.batch_id,
            best_gamma=best_report.gamma,
            best_l2_255=best_report.l2_255,
            best_mse_255=best_report.mse_255,
            mean_confidence_true=best_report.mean_confidence_true,
            epsilon=best_report.epsilon,
            p_cross=schedules.p_cross(g_s),
            p_mut=schedules.p_mut(g_s),
            wall_ms=int(round((clock() - t0) * 1000.0)),
        )
        history.append(record)
        if reporter is not None:
            reporter(record, population.chromosomes[best_idx])

        if prev_gamma is not None and prev_batch_id == batch.batch_id:
            if abs(best_report.gamma - prev_gamma) < cfg.convergence_delta:
                convergence_hits += 1
            else:
                convergence_hits = 0
        else:
            convergence_hits = 0  # gamma across different batches is not comparable
        prev_gamma, prev_batch_id = best_report.gamma, batch.batch_id

        reason = None
        if g >= cfg.max_generations - 1:
            reason = "max_generations"
        elif convergence_hits >= 2:
            reason = "converged"
        elif (
            cfg.gamma_desired is not None
            and best_report.gamma >= cfg.gamma_desired
            and best_report.l2_255 <= best_report.epsilon
        ):
            reason = "desired_fitness"
        if reason is not None:
            return RunResult(
                best=population.chromosomes[best_idx],
                best_report=best_report,
                history=history,
                termination_reason=reason,
            )

        population = step_generation(population, reports, cfg, bounds, schedules, rng, norm)
        if checkpoint_path is not None and population.generation % cfg.checkpoint_period == 0:
            save_checkpoint(checkpoint_path, population, rng)
