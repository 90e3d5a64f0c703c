"""Width search space: grouped per-layer channel choices and exact cost accounting.

Every prunable layer exposes output widths on a coarse grid: with ``K`` groups a
layer of ``C`` channels may keep ``(C / K) * m`` channels for integer ``m``, never
below ``min_keep_ratio * C``. Layers tied into a coupling group (residual
branches feeding the same add, depthwise convs tracking their input) always
share one width. FLOPs and parameter counts are multiply-accumulate counts over
conv and linear layers only, computed in exact integer arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import ConstraintError, SpaceError

LAYER_KINDS = ("standard-conv", "depthwise-conv", "linear")


def min_grid_width(max_channels: int, group_count: int, keep_ratio: float) -> int:
    """Smallest grid width of a layer: the first multiple of C/K at or above
    keep_ratio * C.

    The ratio is interpreted as a decimal quantity, so 0.2 of 20 channels
    floors at exactly 4 rather than tripping over binary rounding.
    """
    step = max_channels // group_count
    required = math.ceil(Fraction(str(keep_ratio)) * max_channels)
    m = max(1, math.ceil(Fraction(required, step)))
    return m * step


@dataclass(frozen=True)
class LayerSpec:
    """One prunable layer: its kind, width ceiling, and cost geometry.

    kernel and output spatial size are whatever the reference input resolution
    produces; they only matter for conv kinds. ``coupling_group`` ties layers
    that must share a width; ``None`` leaves the layer independent.
    """

    name: str
    kind: str
    max_out_channels: int
    kernel: tuple[int, int] = (1, 1)
    out_size: tuple[int, int] = (1, 1)
    coupling_group: str | None = None
    group_count: int = 1

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise SpaceError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.max_out_channels < 1:
            raise SpaceError(f"layer {self.name!r}: max_out_channels must be positive")
        if self.group_count < 1:
            raise SpaceError(f"layer {self.name!r}: group_count must be positive")
        if self.max_out_channels % self.group_count != 0:
            raise SpaceError(
                f"layer {self.name!r}: group_count {self.group_count} does not divide "
                f"{self.max_out_channels} channels"
            )
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.out_size):
            raise SpaceError(f"layer {self.name!r}: kernel and out_size must be positive")
        if self.kind == "linear" and (self.kernel != (1, 1) or self.out_size != (1, 1)):
            raise SpaceError(f"layer {self.name!r}: linear layers have no spatial extent")


@dataclass(frozen=True)
class WidthConfig:
    """An assignment of one output width per layer, in layer order."""

    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def __len__(self) -> int:
        return len(self.widths)

    def __getitem__(self, index: int) -> int:
        return self.widths[index]

    def __iter__(self) -> Iterator[int]:
        return iter(self.widths)


@dataclass(frozen=True)
class SearchSpace:
    """All width configurations of a network, plus its cost model.

    ``input_sources[l]`` names the layer index whose output feeds layer ``l``
    (``None`` for the network input). Branches that merge by addition carry the
    same width on both sides, so a single source index is always enough to
    resolve input widths.
    """

    layers: tuple[LayerSpec, ...]
    input_sources: tuple[int | None, ...]
    input_channels: int = 3
    min_keep_ratio: float = 0.2

    def __post_init__(self) -> None:
        if not self.layers:
            raise SpaceError("a search space needs at least one layer")
        if not 0.0 <= self.min_keep_ratio <= 1.0:
            raise SpaceError(f"min_keep_ratio {self.min_keep_ratio} outside [0, 1]")
        if self.input_channels < 1:
            raise SpaceError("input_channels must be positive")
        if len(self.input_sources) != len(self.layers):
            raise SpaceError("input_sources must name one source per layer")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise SpaceError("layer names must be unique")
        groups: dict[str, LayerSpec] = {}
        for index, layer in enumerate(self.layers):
            source = self.input_sources[index]
            if source is not None and not 0 <= source < index:
                raise SpaceError(f"layer {layer.name!r}: input source must precede it")
            if layer.coupling_group is not None:
                first = groups.setdefault(layer.coupling_group, layer)
                if (first.max_out_channels, first.group_count) != (
                    layer.max_out_channels,
                    layer.group_count,
                ):
                    raise SpaceError(
                        f"coupling group {layer.coupling_group!r}: members must share "
                        "max_out_channels and group_count"
                    )
            if layer.kind == "depthwise-conv":
                if source is None:
                    raise SpaceError(f"layer {layer.name!r}: depthwise conv cannot read the input")
                producer = self.layers[source]
                coupled = (
                    layer.coupling_group is not None
                    and producer.coupling_group == layer.coupling_group
                )
                if not coupled:
                    raise SpaceError(
                        f"layer {layer.name!r}: depthwise conv must couple with its source "
                        f"{producer.name!r} so the widths track"
                    )

    def __len__(self) -> int:
        return len(self.layers)

    def layer_index(self, name: str) -> int:
        for index, layer in enumerate(self.layers):
            if layer.name == name:
                return index
        raise SpaceError(f"no layer named {name!r}")

    def allowed_choices(self, layer_index: int) -> tuple[int, ...]:
        """Ascending grid of output widths layer ``layer_index`` may take."""
        return self._choices[layer_index]

    @cached_property
    def _choices(self) -> tuple[tuple[int, ...], ...]:
        grids = []
        for layer in self.layers:
            step = layer.max_out_channels // layer.group_count
            lowest = min_grid_width(layer.max_out_channels, layer.group_count, self.min_keep_ratio)
            grids.append(tuple(range(lowest, layer.max_out_channels + 1, step)))
        return tuple(grids)

    @cached_property
    def coupling_classes(self) -> tuple[tuple[int, ...], ...]:
        """Layers partitioned into width-sharing classes, ordered by first member."""
        by_group: dict[str, list[int]] = {}
        classes: list[list[int]] = []
        for index, layer in enumerate(self.layers):
            group = layer.coupling_group
            if group is None:
                classes.append([index])
            elif group in by_group:
                by_group[group].append(index)
            else:
                members = [index]
                by_group[group] = members
                classes.append(members)
        return tuple(tuple(members) for members in classes)

    def class_of_layer(self, layer_index: int) -> int:
        for class_index, members in enumerate(self.coupling_classes):
            if layer_index in members:
                return class_index
        raise SpaceError(f"layer index {layer_index} out of range")

    def size(self) -> int:
        """Number of distinct configurations, as an exact integer."""
        total = 1
        for members in self.coupling_classes:
            total *= len(self.allowed_choices(members[0]))
        return total

    def largest_config(self) -> WidthConfig:
        return WidthConfig(tuple(layer.max_out_channels for layer in self.layers))

    def smallest_config(self) -> WidthConfig:
        return WidthConfig(tuple(self.allowed_choices(i)[0] for i in range(len(self.layers))))

    def sample_uniform(self, rng: np.random.Generator) -> WidthConfig:
        """Draw every coupling class independently and uniformly from its grid."""
        widths = [0] * len(self.layers)
        for members in self.coupling_classes:
            choices = self.allowed_choices(members[0])
            width = choices[int(rng.integers(len(choices)))]
            for member in members:
                widths[member] = width
        return WidthConfig(tuple(widths))

    def validate_config(self, config: WidthConfig) -> None:
        """Raise ConstraintError unless ``config`` sits on the grid and honors coupling."""
        if len(config) != len(self.layers):
            raise ConstraintError(
                f"config has {len(config)} widths for {len(self.layers)} layers"
            )
        for index, width in enumerate(config):
            if width not in self.allowed_choices(index):
                raise ConstraintError(
                    f"layer {self.layers[index].name!r}: width {width} not on grid "
                    f"{self.allowed_choices(index)}"
                )
        for members in self.coupling_classes:
            shared = {config[member] for member in members}
            if len(shared) != 1:
                names = [self.layers[m].name for m in members]
                raise ConstraintError(f"coupled layers {names} carry unequal widths {shared}")

    def input_width(self, layer_index: int, config: WidthConfig) -> int:
        source = self.input_sources[layer_index]
        return self.input_channels if source is None else config[source]

    def flops(self, config: WidthConfig) -> int:
        """Multiply-accumulate count of ``config``, conv and linear layers only."""
        self.validate_config(config)
        total = 0
        for index, layer in enumerate(self.layers):
            c_out = config[index]
            kh, kw = layer.kernel
            oh, ow = layer.out_size
            if layer.kind == "standard-conv":
                total += self.input_width(index, config) * c_out * kh * kw * oh * ow
            elif layer.kind == "depthwise-conv":
                total += c_out * kh * kw * oh * ow
            else:
                total += self.input_width(index, config) * c_out
        return total

    def params(self, config: WidthConfig) -> int:
        """Weight-tensor element count of ``config``; biases and norm layers excluded."""
        self.validate_config(config)
        total = 0
        for index, layer in enumerate(self.layers):
            c_out = config[index]
            kh, kw = layer.kernel
            if layer.kind == "standard-conv":
                total += self.input_width(index, config) * c_out * kh * kw
            elif layer.kind == "depthwise-conv":
                total += c_out * kh * kw
            else:
                total += self.input_width(index, config) * c_out
        return total

    @cached_property
    def _cost_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # Per-layer constants for the vectorized cost path: the kernel-times-
        # output-area factor, the input-source index (-1 = raw input), and a
        # flag for kinds whose cost scales with the input width.
        factor = np.empty(len(self.layers), dtype=np.int64)
        source = np.empty(len(self.layers), dtype=np.int64)
        scales_with_input = np.empty(len(self.layers), dtype=bool)
        for index, layer in enumerate(self.layers):
            kh, kw = layer.kernel
            oh, ow = layer.out_size
            factor[index] = kh * kw * oh * ow if layer.kind != "linear" else 1
            src = self.input_sources[index]
            source[index] = -1 if src is None else src
            scales_with_input[index] = layer.kind != "depthwise-conv"
        return factor, source, scales_with_input

    def flops_of_rows(self, widths: np.ndarray) -> np.ndarray:
        """FLOPs for each row of a (rows, L) width matrix; no grid validation.

        Fast path for rejection-sampling loops, where every row is drawn from
        the grid by construction.
        """
        factor, source, scales_with_input = self._cost_arrays
        widths = np.asarray(widths, dtype=np.int64)
        inputs = np.where(
            source >= 0, widths[:, source.clip(min=0)], np.int64(self.input_channels)
        )
        terms = widths * factor
        return np.where(scales_with_input, terms * inputs, terms).sum(axis=1)
