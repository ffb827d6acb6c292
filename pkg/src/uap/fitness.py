"""Attack intensity, visibility, and the penalized single-objective fitness.

The evolutionary search maximizes the misclassification rate while a soft
penalty discourages perturbation norms above a decaying threshold:

    net_fitness = gamma - lambda * max(0, l2_255 - epsilon)
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .oracle import ClassifierOracle
from .tensors import (
    ImageBatch,
    NormalizationSpec,
    Perturbation,
    apply_perturbation,
    l2_norm_255,
    mse_255,
)


@dataclass
class FitnessReport:
    """Everything measured about one chromosome on one batch."""

    gamma: float
    mse_255: float
    l2_255: float
    epsilon: float
    penalty: float
    net_fitness: float
    mean_confidence_true: float


@dataclass(frozen=True)
class EpsilonSchedule:
    """Exponential decay of the norm constraint across generations."""

    eps_start: float = 85.0
    eps_end: float = 35.0
    total_generations: int = 64

    def __post_init__(self):
        if not self.eps_start >= self.eps_end > 0:
            raise ValueError(
                f"need eps_start >= eps_end > 0, got {self.eps_start}, {self.eps_end}"
            )
        if self.total_generations < 1:
            raise ValueError("total_generations must be positive")


def epsilon_at(schedule: EpsilonSchedule, g: int) -> float:
    """Constraint value at generation g: start * (end/start)^(g/G)."""
    if g < 0 or g > schedule.total_generations:
        raise ValueError(
            f"generation {g} outside schedule range [0, {schedule.total_generations}]"
        )
    ratio = schedule.eps_end / schedule.eps_start
    return schedule.eps_start * math.pow(ratio, g / schedule.total_generations)


def penalized_fitness(gamma: float, l2_255: float, epsilon: float, lam: float) -> float:
    """Soft-penalty fitness; equals gamma whenever the norm is within bounds."""
    if lam < 0:
        raise ValueError(f"penalty weight must be non-negative, got {lam}")
    return gamma - lam * max(0.0, l2_255 - epsilon)


def misclassification_rate(
    oracle: ClassifierOracle,
    batch: ImageBatch,
    delta: Perturbation,
    norm: NormalizationSpec,
    mode: str = "rate",
) -> tuple[float, float]:
    """Attack intensity of a perturbation on a batch.

    Returns (gamma, mean_confidence_true). The default "rate" mode counts
    the fraction of perturbed images whose top-1 prediction differs from the
    ground-truth label; "weighted" instead averages (1 - p_true) over the
    misclassified images (zero contribution from correct ones).
    """
    perturbed = apply_perturbation(batch, delta, norm)
    pred = oracle.predict(perturbed)
    wrong = pred.top1 != batch.labels
    mean_conf = float(np.mean(pred.probs_true_label))
    if mode == "rate":
        gamma = float(np.mean(wrong))
    elif mode == "weighted":
        gamma = float(np.mean(np.where(wrong, 1.0 - pred.probs_true_label, 0.0)))
    else:
        raise ValueError(f"unknown gamma mode {mode!r}")
    return gamma, mean_conf


def evaluate_chromosome(
    oracle: ClassifierOracle,
    delta: Perturbation,
    batch: ImageBatch,
    epsilon: float,
    lam: float,
    norm: NormalizationSpec,
    mode: str = "rate",
) -> FitnessReport:
    """Full report for a single chromosome at a fixed constraint value."""
    perturbed = apply_perturbation(batch, delta, norm)
    pred = oracle.predict(perturbed)
    wrong = pred.top1 != batch.labels
    if mode == "rate":
        gamma = float(np.mean(wrong))
    elif mode == "weighted":
        gamma = float(np.mean(np.where(wrong, 1.0 - pred.probs_true_label, 0.0)))
    else:
        raise ValueError(f"unknown gamma mode {mode!r}")
    l2 = l2_norm_255(delta, norm)
    penalty = lam * max(0.0, l2 - epsilon)
    return FitnessReport(
        gamma=gamma,
        mse_255=mse_255(batch, perturbed, norm),
        l2_255=l2,
        epsilon=epsilon,
        penalty=penalty,
        net_fitness=gamma - penalty,
        mean_confidence_true=float(np.mean(pred.probs_true_label)),
    )


def evaluate_population(
    oracle: ClassifierOracle,
    population: Sequence[Perturbation],
    batch: ImageBatch,
    g: int,
    schedule: EpsilonSchedule,
    lam: float,
    norm: NormalizationSpec,
    mode: str = "rate",
    n_workers: int = 1,
) -> list[FitnessReport]:
    """One report per chromosome, all against the same batch and epsilon.

    Results are ordered by chromosome index regardless of how evaluation is
    scheduled across workers.
    """
    if not population:
        raise ValueError("population must be non-empty")
    eps = epsilon_at(schedule, g)

    def one(delta: Perturbation) -> FitnessReport:
        return evaluate_chromosome(oracle, delta, batch, eps, lam, norm, mode)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(one, population))
    return [one(delta) for delta in population]
