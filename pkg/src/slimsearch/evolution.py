"""FLOPs-constrained evolutionary search over width configurations.

The population is seeded half from the best training-time records and half
from the budget-conditioned prior, then evolved by crossover and mutation with
every offspring forced back inside the FLOPs tolerance. Candidates are scored
by supernet proxy accuracy: recalibrate the subnet's norm statistics, run the
sliced forward over the validation split, take top-1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from itertools import islice
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NormalizationError, RecordError
from .prior import PriorDistribution, ProxyLossTable, sample_conditioned, top_records
from .records import LossRecord
from .space import SearchSpace, WidthConfig
from .supernet import SupernetHandle, recalibrate_bn

_DEDUP_REDRAWS = 50


@dataclass(frozen=True)
class Candidate:
    """One width configuration with its exact costs and measured quality."""

    config: WidthConfig
    flops: int
    params: int
    proxy_accuracy: float | None = None


@dataclass(frozen=True)
class EvoConfig:
    """Search hyperparameters; defaults follow the standard recipe."""

    target_flops: int
    tolerance: int
    population_size: int = 128
    parent_count: int = 64
    mutation_prob: float = 0.2
    generations: int = 20
    seed: int = 0
    crossover_fraction: float = 0.5
    constraint_retries: int = 100
    sample_max_trials: int = 1000

    def __post_init__(self) -> None:
        if self.population_size < 2 or self.population_size % 2 != 0:
            raise RecordError("population_size must be even and at least 2")
        if not 1 <= self.parent_count <= self.population_size:
            raise RecordError("parent_count must be in [1, population_size]")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise RecordError("mutation_prob must be in [0, 1]")
        if self.generations < 1:
            raise RecordError("generations must be at least 1")
        if self.target_flops < 1 or self.tolerance < 0:
            raise RecordError("target_flops must be positive and tolerance non-negative")
        if not 0.0 <= self.crossover_fraction <= 1.0:
            raise RecordError("crossover_fraction must be in [0, 1]")


def make_candidate(space: SearchSpace, config: WidthConfig) -> Candidate:
    return Candidate(config=config, flops=space.flops(config), params=space.params(config))


def _in_tolerance(space: SearchSpace, config: WidthConfig, evo: EvoConfig) -> bool:
    return abs(space.flops(config) - evo.target_flops) <= evo.tolerance


def mutate(
    config: WidthConfig,
    space: SearchSpace,
    dist: PriorDistribution,
    evo: EvoConfig,
    rng: np.random.Generator,
) -> WidthConfig:
    """Resample each width-sharing class with probability mutation_prob.

    Resampled classes draw from the target bucket's categorical. A mutant
    outside the FLOPs tolerance is redrawn up to ``constraint_retries`` times,
    after which a fresh in-tolerance config comes straight from the prior.
    """
    bucket = dist.bucket_of(evo.target_flops)
    for _ in range(evo.constraint_retries + 1):
        widths = list(config)
        for members in space.coupling_classes:
            if rng.random() >= evo.mutation_prob:
                continue
            choices = space.allowed_choices(members[0])
            probs, _ = dist.layer_categorical(bucket, members[0], space)
            for member in members[1:]:
                member_probs, _ = dist.layer_categorical(bucket, member, space)
                probs = probs * member_probs
            total = probs.sum()
            probs = probs / total if total > 0 else np.full(len(choices), 1.0 / len(choices))
            width = choices[int(rng.choice(len(choices), p=probs))]
            for member in members:
                widths[member] = width
        mutant = WidthConfig(tuple(widths))
        if _in_tolerance(space, mutant, evo):
            return mutant
    return sample_conditioned(
        dist, space, evo.target_flops, evo.tolerance, rng, evo.sample_max_trials
    )[0]


def crossover(
    a: WidthConfig, b: WidthConfig, space: SearchSpace, rng: np.random.Generator
) -> WidthConfig:
    """Pick each width-sharing class uniformly from one of the two parents."""
    widths = list(a)
    for members in space.coupling_classes:
        parent = a if rng.random() < 0.5 else b
        for member in members:
            widths[member] = parent[member]
    return WidthConfig(tuple(widths))


def _constrained_crossover(
    a: WidthConfig,
    b: WidthConfig,
    space: SearchSpace,
    dist: PriorDistribution,
    evo: EvoConfig,
    rng: np.random.Generator,
) -> WidthConfig:
    for _ in range(evo.constraint_retries + 1):
        child = crossover(a, b, space, rng)
        if _in_tolerance(space, child, evo):
            return child
    return sample_conditioned(
        dist, space, evo.target_flops, evo.tolerance, rng, evo.sample_max_trials
    )[0]


def init_population(
    dist: PriorDistribution,
    records: Sequence[LossRecord],
    space: SearchSpace,
    evo: EvoConfig,
    rng: np.random.Generator,
) -> list[Candidate]:
    """Half best-recorded configs, half prior samples, all inside the tolerance.

    Too few qualifying records (including none at all) just shifts more of the
    population onto the sampler.
    """
    seeds: list[WidthConfig] = []
    if records:
        try:
            table = ProxyLossTable.from_records(list(records))
        except NormalizationError:
            table = None  # no largest-subnet anchors; seed everything from the prior
        if table is not None:
            seeds = top_records(
                list(records), table, evo.population_size // 2,
                evo.target_flops, evo.tolerance,
            )
    chosen: list[WidthConfig] = []
    seen: set[WidthConfig] = set()
    for config in seeds:
        if config not in seen:
            chosen.append(config)
            seen.add(config)
    while len(chosen) < evo.population_size:
        config = _fresh_config(dist, space, evo, rng, seen)
        chosen.append(config)
        seen.add(config)
    return [make_candidate(space, config) for config in chosen]


def _fresh_config(
    dist: PriorDistribution,
    space: SearchSpace,
    evo: EvoConfig,
    rng: np.random.Generator,
    seen: set[WidthConfig],
) -> WidthConfig:
    """Sample from the prior, preferring configs not seen before.

    On tiny spaces novelty can be impossible, so after a bounded number of
    redraws the last duplicate is returned rather than spinning forever.
    """
    config = None
    for _ in range(_DEDUP_REDRAWS):
        config = sample_conditioned(
            dist, space, evo.target_flops, evo.tolerance, rng, evo.sample_max_trials
        )[0]
        if config not in seen:
            return config
    assert config is not None
    return config


def evaluate(
    candidate: Candidate,
    handle: SupernetHandle,
    validation_batches: Iterable[tuple[torch.Tensor, torch.Tensor]],
    calibration_batches: Iterable,
    calib_batch_limit: int = 100,
) -> Candidate:
    """Proxy accuracy: recalibrate statistics for this config, then top-1 over
    the validation batches on the sliced subnet."""
    recalibrate_bn(handle, candidate.config, islice(iter(calibration_batches), calib_batch_limit))
    correct = 0
    total = 0
    with torch.no_grad():
        for inputs, labels in validation_batches:
            logits, _ = handle.model.sliced_forward(inputs, candidate.config, handle.bn_mode)
            correct += int((logits.argmax(dim=1) == labels).sum().item())
            total += int(labels.shape[0])
    if total == 0:
        raise RecordError("validation stream is empty")
    return replace(candidate, proxy_accuracy=correct / total)


def _rank_key(candidate: Candidate):
    accuracy = -1.0 if candidate.proxy_accuracy is None else candidate.proxy_accuracy
    return (-accuracy, candidate.flops, candidate.params, candidate.config.widths)


def search(
    handle: SupernetHandle,
    dist: PriorDistribution,
    records: Sequence[LossRecord],
    evo: EvoConfig,
    validation_batches: Iterable = (),
    calibration_batches: Iterable = (),
    evaluate_fn: Callable[[WidthConfig], float] | None = None,
    log_path: str | Path | None = None,
    calib_batch_limit: int = 100,
) -> list[Candidate]:
    """Generational search under the FLOPs constraint; returns every evaluated
    candidate, best first.

    Selection takes the top parents by (accuracy, lower FLOPs, fewer params);
    offspring are half crossover, half mutation, deduplicated against the whole
    history with shortfalls refilled from the prior. ``evaluate_fn`` replaces
    the supernet scorer with an arbitrary fitness on the config, which makes
    the loop testable against brute-force enumeration.
    """
    space = handle.space
    rng = np.random.default_rng(evo.seed)
    log_handle = open(log_path, "w") if log_path is not None else None

    def score(candidate: Candidate) -> Candidate:
        if evaluate_fn is not None:
            return replace(candidate, proxy_accuracy=float(evaluate_fn(candidate.config)))
        return evaluate(
            candidate, handle, validation_batches, calibration_batches, calib_batch_limit
        )

    history: dict[WidthConfig, Candidate] = {}
    try:
        population = init_population(dist, records, space, evo, rng)
        for generation in range(evo.generations):
            scored: list[Candidate] = []
            for candidate in population:
                known = history.get(candidate.config)
                if known is None:
                    known = score(candidate)
                    history[known.config] = known
                    if log_handle is not None:
                        log_handle.write(
                            json.dumps(
                                {
                                    "generation": generation,
                                    "widths": list(known.config),
                                    "flops": known.flops,
                                    "params": known.params,
                                    "proxy_accuracy": known.proxy_accuracy,
                                },
                                separators=(", ", ": "),
                            )
                            + "\n"
                        )
                scored.append(known)
            if log_handle is not None:
                log_handle.flush()
            if generation == evo.generations - 1:
                break
            parents = sorted(scored, key=_rank_key)[: evo.parent_count]
            population = _next_generation(parents, history, dist, space, evo, rng)
    finally:
        if log_handle is not None:
            log_handle.close()
    return sorted(history.values(), key=_rank_key)


def _next_generation(
    parents: list[Candidate],
    history: dict[WidthConfig, Candidate],
    dist: PriorDistribution,
    space: SearchSpace,
    evo: EvoConfig,
    rng: np.random.Generator,
) -> list[Candidate]:
    crossover_count = round(evo.population_size * evo.crossover_fraction)
    offspring: list[WidthConfig] = []
    seen: set[WidthConfig] = set(history)

    def admit(producer: Callable[[], WidthConfig]) -> None:
        config = None
        for _ in range(_DEDUP_REDRAWS):
            config = producer()
            if config not in seen:
                break
        else:
            config = _fresh_config(dist, space, evo, rng, seen)
        offspring.append(config)
        seen.add(config)

    for index in range(evo.population_size):
        if index < crossover_count:
            admit(lambda: _constrained_crossover(
                _pick(parents, rng).config, _pick(parents, rng).config, space, dist, evo, rng
            ))
        else:
            admit(lambda: mutate(_pick(parents, rng).config, space, dist, evo, rng))
    return [make_candidate(space, config) for config in offspring]


def _pick(parents: list[Candidate], rng: np.random.Generator) -> Candidate:
    return parents[int(rng.integers(len(parents)))]


def write_ranked_csv(candidates: Sequence[Candidate], path: str | Path) -> None:
    """Ranked results table; the widths column feeds the retrain command as-is."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["rank", "widths", "flops", "params", "proxy_accuracy"])
        for rank, candidate in enumerate(candidates, start=1):
            writer.writerow(
                [
                    rank,
                    ",".join(str(width) for width in candidate.config),
                    candidate.flops,
                    candidate.params,
                    "" if candidate.proxy_accuracy is None else f"{candidate.proxy_accuracy:.6f}",
                ]
            )
