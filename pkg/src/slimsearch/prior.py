"""Budget-conditioned width prior estimated from training loss records.

Loss records are normalized into proxy losses (each raw loss scaled by the
largest subnet's loss trajectory), binned by FLOPs, and reduced to one
categorical per (bucket, layer). Rejection sampling from the per-layer
factorized prior then draws configurations near a FLOPs target far faster than
uniform sampling, because the prior concentrates on widths that actually occur
near that budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NormalizationError, RecordError, SamplingExhausted
from .records import LossRecord
from .space import SearchSpace, WidthConfig

WEIGHTINGS = ("inverse-proxy", "literal-proxy", "frequency")
PROXY_WEIGHTINGS = ("inverse-proxy", "literal-proxy")

_NORMALIZATION_TOLERANCE = 1e-9


def proxy_loss(record: LossRecord, largest_loss_at_t: float, final_largest_loss: float) -> float:
    """Raw loss scaled by the largest subnet's loss ratio at the record's step."""
    if final_largest_loss <= 0:
        raise NormalizationError(
            f"final largest-subnet loss must be positive, got {final_largest_loss}"
        )
    return (largest_loss_at_t / final_largest_loss) * record.loss


@dataclass(frozen=True)
class ProxyLossTable:
    """Largest-subnet loss trajectory, the normalizer behind every proxy loss."""

    largest_loss_by_iter: dict[int, float]
    final_largest_loss: float

    @classmethod
    def from_records(cls, records: list[LossRecord]) -> "ProxyLossTable":
        largest: dict[int, float] = {}
        for record in records:
            if record.is_largest and record.iteration not in largest:
                largest[record.iteration] = record.loss
        if not largest:
            raise NormalizationError("no largest-subnet records to normalize against")
        final = largest[max(largest)]
        if final <= 0:
            raise NormalizationError(f"final largest-subnet loss must be positive, got {final}")
        return cls(largest_loss_by_iter=largest, final_largest_loss=final)

    def proxy_for(self, record: LossRecord) -> float:
        at_t = self.largest_loss_by_iter.get(record.iteration)
        if at_t is None:
            raise NormalizationError(
                f"iteration {record.iteration} has no largest-subnet loss; "
                "was the supernet trained without the largest anchor?"
            )
        return proxy_loss(record, at_t, self.final_largest_loss)


def _transform(proxy: float, weighting: str) -> float:
    if weighting == "frequency":
        return 1.0
    if weighting == "literal-proxy":
        return proxy
    if proxy <= 0:
        raise RecordError("inverse-proxy weighting needs strictly positive proxy losses")
    return 1.0 / proxy


@dataclass(frozen=True)
class PriorDistribution:
    """Per-bucket, per-layer categoricals over width choices.

    Buckets are half-open FLOPs intervals of fixed width, keyed by
    ``flops // bucket_width``. A (bucket, layer) cell with no data is served as
    a uniform over that layer's choices and listed in ``fallback_flags``.
    """

    bucket_width: int
    weighting: str
    num_layers: int
    buckets: dict[int, tuple[dict[int, float], ...]]
    fallback_flags: tuple[tuple[int, int], ...]

    @property
    def bucket_edges(self) -> tuple[int, ...]:
        if not self.buckets:
            return ()
        low, high = min(self.buckets), max(self.buckets)
        return tuple(k * self.bucket_width for k in range(low, high + 2))

    def bucket_of(self, flops: int) -> int:
        return int(flops) // self.bucket_width

    def layer_categorical(
        self, bucket: int, layer_index: int, space: SearchSpace
    ) -> tuple[np.ndarray, bool]:
        """Probabilities aligned to the layer's choice grid, plus a fallback flag."""
        choices = space.allowed_choices(layer_index)
        cell = self.buckets.get(bucket)
        if cell is None or not cell[layer_index]:
            return np.full(len(choices), 1.0 / len(choices)), True
        weights = cell[layer_index]
        probs = np.array([weights.get(choice, 0.0) for choice in choices])
        total = probs.sum()
        if total <= 0:
            return np.full(len(choices), 1.0 / len(choices)), True
        return probs / total, False

    def save(self, path: str | Path) -> None:
        payload = {
            "weighting": self.weighting,
            "bucket_width": self.bucket_width,
            "num_layers": self.num_layers,
            "bucket_edges": list(self.bucket_edges),
            "buckets": {
                str(bucket): {
                    str(layer): {str(choice): weight for choice, weight in cell.items()}
                    for layer, cell in enumerate(layers)
                    if cell
                }
                for bucket, layers in sorted(self.buckets.items())
            },
            "fallback_flags": [list(flag) for flag in self.fallback_flags],
        }
        with open(path, "w") as handle:
            json.dump(payload, handle, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "PriorDistribution":
        with open(path) as handle:
            payload = json.load(handle)
        num_layers = int(payload["num_layers"])
        buckets: dict[int, tuple[dict[int, float], ...]] = {}
        for bucket_key, layers in payload["buckets"].items():
            cells: list[dict[int, float]] = [{} for _ in range(num_layers)]
            for layer_key, weights in layers.items():
                cell = {int(choice): float(weight) for choice, weight in weights.items()}
                if any(weight < 0 for weight in cell.values()):
                    raise RecordError(f"{path}: negative weight in bucket {bucket_key}")
                total = sum(cell.values())
                if cell and abs(total - 1.0) > _NORMALIZATION_TOLERANCE:
                    raise RecordError(
                        f"{path}: bucket {bucket_key} layer {layer_key} sums to {total}"
                    )
                cells[int(layer_key)] = cell
            buckets[int(bucket_key)] = tuple(cells)
        return cls(
            bucket_width=int(payload["bucket_width"]),
            weighting=str(payload["weighting"]),
            num_layers=num_layers,
            buckets=buckets,
            fallback_flags=tuple(
                (int(bucket), int(layer)) for bucket, layer in payload["fallback_flags"]
            ),
        )

    @classmethod
    def uniform(cls, space: SearchSpace, bucket_width: int) -> "PriorDistribution":
        """A prior with no data at all: every cell falls back to uniform.

        The baseline arm for sampling-efficiency comparisons, sharing the exact
        acceptance loop of the estimated prior.
        """
        return cls(
            bucket_width=int(bucket_width),
            weighting="frequency",
            num_layers=len(space),
            buckets={},
            fallback_flags=(),
        )


def default_bucket_width(space: SearchSpace) -> int:
    """5% of the largest configuration's FLOPs."""
    return max(1, space.flops(space.largest_config()) // 20)


def build_distribution(
    records: list[LossRecord],
    space: SearchSpace,
    bucket_width: int | None = None,
    weighting: str = "inverse-proxy",
) -> PriorDistribution:
    """Bin records by FLOPs and reduce each (bucket, layer) to a categorical.

    Each record contributes its weighting transform g(p) to its bucket's cell
    for every layer: g = 1/p for inverse-proxy, p for literal-proxy, and 1 for
    the pure frequency estimate (no proxy table needed).
    """
    if not records:
        raise RecordError("cannot build a distribution from zero records")
    if weighting not in WEIGHTINGS:
        raise RecordError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")
    if bucket_width is None:
        bucket_width = default_bucket_width(space)
    if bucket_width <= 0:
        raise RecordError(f"bucket_width must be positive, got {bucket_width}")

    table = None if weighting == "frequency" else ProxyLossTable.from_records(records)
    num_layers = len(space)
    accumulator: dict[int, list[dict[int, float]]] = {}
    for record in records:
        if len(record.widths) != num_layers:
            raise RecordError(
                f"record at iteration {record.iteration} has {len(record.widths)} widths "
                f"for a {num_layers}-layer space"
            )
        weight = _transform(1.0 if table is None else table.proxy_for(record), weighting)
        bucket = record.flops // bucket_width
        cells = accumulator.setdefault(bucket, [{} for _ in range(num_layers)])
        for layer, choice in enumerate(record.widths):
            cells[layer][choice] = cells[layer].get(choice, 0.0) + weight

    buckets: dict[int, tuple[dict[int, float], ...]] = {}
    for bucket, cells in accumulator.items():
        normalized = []
        for cell in cells:
            total = sum(cell.values())
            normalized.append({choice: weight / total for choice, weight in cell.items()})
        buckets[bucket] = tuple(normalized)

    flags = []
    if buckets:
        for bucket in range(min(buckets), max(buckets) + 1):
            if bucket not in buckets:
                flags.extend((bucket, layer) for layer in range(num_layers))
    return PriorDistribution(
        bucket_width=int(bucket_width),
        weighting=weighting,
        num_layers=num_layers,
        buckets=buckets,
        fallback_flags=tuple(flags),
    )


def _class_categoricals(
    dist: PriorDistribution, space: SearchSpace, bucket: int
) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """One categorical per coupling class: the renormalized elementwise product
    of the member layers' categoricals (fallback to uniform on empty support)."""
    per_class = []
    for members in space.coupling_classes:
        choices = space.allowed_choices(members[0])
        combined = np.ones(len(choices))
        for member in members:
            probs, _ = dist.layer_categorical(bucket, member, space)
            combined = combined * probs
        total = combined.sum()
        if total <= 0:
            combined = np.full(len(choices), 1.0 / len(choices))
        else:
            combined = combined / total
        per_class.append((choices, combined))
    return per_class


def sample_conditioned(
    dist: PriorDistribution,
    space: SearchSpace,
    target_flops: int,
    tolerance: int,
    rng: np.random.Generator,
    max_trials: int = 1000,
) -> tuple[WidthConfig, int]:
    """Rejection-sample a config with |flops - target_flops| <= tolerance.

    Draws each coupling class from the target bucket's categorical and counts
    every draw as one trial. Raises SamplingExhausted with trial statistics
    when the budget runs out.
    """
    if max_trials < 1:
        raise RecordError(f"max_trials must be at least 1, got {max_trials}")
    bucket = dist.bucket_of(target_flops)
    per_class = _class_categoricals(dist, space, bucket)
    num_layers = len(space)
    members_of = space.coupling_classes

    chunk = min(64, max_trials)
    done = 0
    closest: int | None = None
    while done < max_trials:
        size = min(chunk, max_trials - done)
        widths = np.empty((size, num_layers), dtype=np.int64)
        for class_index, (choices, probs) in enumerate(per_class):
            drawn = rng.choice(len(choices), size=size, p=probs)
            values = np.asarray(choices, dtype=np.int64)[drawn]
            for member in members_of[class_index]:
                widths[:, member] = values
        flops = space.flops_of_rows(widths)
        gaps = np.abs(flops - int(target_flops))
        hits = np.nonzero(gaps <= tolerance)[0]
        if hits.size:
            first = int(hits[0])
            return WidthConfig(tuple(int(w) for w in widths[first])), done + first + 1
        low = int(gaps.min())
        closest = low if closest is None else min(closest, low)
        done += size
    raise SamplingExhausted(
        target_flops=int(target_flops),
        tolerance=int(tolerance),
        trials=max_trials,
        closest=closest,
    )


def top_records(
    records: list[LossRecord],
    table: ProxyLossTable,
    count: int,
    target_flops: int,
    tolerance: int,
    weighting: str = "inverse-proxy",
) -> list[WidthConfig]:
    """Best distinct in-tolerance configs by proxy quality.

    Inverse-proxy ranks ascending proxy loss (lower loss is better); literal
    ranks descending, mirroring the weight each record gets in the prior. May
    return fewer than ``count``.
    """
    if count < 1:
        raise RecordError(f"count must be at least 1, got {count}")
    if weighting not in PROXY_WEIGHTINGS:
        raise RecordError(f"ranking needs a proxy weighting, not {weighting!r}")
    best: dict[WidthConfig, float] = {}
    for record in records:
        if abs(record.flops - target_flops) > tolerance:
            continue
        proxy = table.proxy_for(record)
        seen = best.get(record.widths)
        if seen is None:
            best[record.widths] = proxy
        elif weighting == "inverse-proxy":
            best[record.widths] = min(seen, proxy)
        else:
            best[record.widths] = max(seen, proxy)
    reverse = weighting == "literal-proxy"
    ranked = sorted(best.items(), key=lambda item: -item[1] if reverse else item[1])
    return [config for config, _ in ranked[:count]]
