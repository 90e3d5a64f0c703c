"""Weight-sharing supernet with masked parallel-subnet execution.

One training iteration splits the batch into n equal row blocks, assigns each
block a width configuration, and runs the full-width network once over the
whole batch. Binary channel masks applied after every conv, norm and linear op
zero each block's channels beyond its sampled width, so the rows of block i
carry exactly subnet i's computation. A sliced serial path over physically
narrowed weights serves as the equivalence oracle and as the evaluation /
recalibration engine; it is never used for supernet weight updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .archdesc import ArchDescription, INPUT_NAME, load_description, space_hash
from .errors import (
    CalibrationError,
    CheckpointError,
    ConstraintError,
    DivergenceError,
    PartitionError,
)
from .records import LossRecord
from .space import SearchSpace, WidthConfig

BN_MODES = ("batch", "frozen", "recalibrated")
PARTITION_POLICIES = (
    "largest-random",
    "all-random",
    "smallest-random",
    "largest-smallest-random",
)


@dataclass(frozen=True)
class ChannelMask:
    """Binary (batch rows x channels) mask for one batch part at one layer.

    Rows [row_start, row_stop) keep their first ``active_channels`` channels;
    every other entry is zero.
    """

    part_index: int
    row_start: int
    row_stop: int
    active_channels: int
    batch_size: int
    total_channels: int

    def dense(self, dtype: torch.dtype = torch.float32, device=None) -> Tensor:
        """Materialize the mask as a batch_size x total_channels 0/1 tensor."""
        mask = torch.zeros(self.batch_size, self.total_channels, dtype=dtype, device=device)
        mask[self.row_start : self.row_stop, : self.active_channels] = 1
        return mask


def build_mask(
    n_parts: int, batch_size: int, part_index: int, layer_channels: int, active_channels: int
) -> ChannelMask:
    """Mask for part ``part_index`` of ``n_parts`` keeping ``active_channels``."""
    if n_parts < 1 or batch_size < 1 or batch_size % n_parts != 0:
        raise PartitionError(f"batch size {batch_size} is not divisible by {n_parts} parts")
    if not 0 <= part_index < n_parts:
        raise PartitionError(f"part index {part_index} outside [0, {n_parts})")
    if not 1 <= active_channels <= layer_channels:
        raise ConstraintError(
            f"active channels {active_channels} outside [1, {layer_channels}]"
        )
    rows = batch_size // n_parts
    return ChannelMask(
        part_index=part_index,
        row_start=rows * part_index,
        row_stop=rows * (part_index + 1),
        active_channels=active_channels,
        batch_size=batch_size,
        total_channels=layer_channels,
    )


def pad_channels(features: Tensor, target_channels: int) -> Tensor:
    """Zero-pad a (rows, channels, ...) tensor up to ``target_channels``.

    The original channels are preserved bit-exactly; padding to the current
    width returns the input unchanged.
    """
    current = features.shape[1]
    if target_channels < current:
        raise ConstraintError(f"cannot pad {current} channels down to {target_channels}")
    if target_channels == current:
        return features
    shape = list(features.shape)
    shape[1] = target_channels - current
    return torch.cat([features, features.new_zeros(shape)], dim=1)


@dataclass(frozen=True)
class BatchPartition:
    """Equal split of a batch into parts, each carrying one width config."""

    n_parts: int
    batch_size: int
    part_configs: tuple[WidthConfig, ...]

    def __post_init__(self) -> None:
        if self.n_parts < 1:
            raise PartitionError("need at least one part")
        if self.batch_size % self.n_parts != 0:
            raise PartitionError(
                f"batch size {self.batch_size} is not divisible by {self.n_parts} parts"
            )
        if len(self.part_configs) != self.n_parts:
            raise PartitionError(
                f"{len(self.part_configs)} configs for {self.n_parts} parts"
            )

    @property
    def part_size(self) -> int:
        return self.batch_size // self.n_parts

    def rows(self, part_index: int) -> slice:
        if not 0 <= part_index < self.n_parts:
            raise PartitionError(f"part index {part_index} outside [0, {self.n_parts})")
        return slice(self.part_size * part_index, self.part_size * (part_index + 1))


def sample_partition(
    space: SearchSpace,
    n_parts: int,
    batch_size: int,
    rng: np.random.Generator,
    policy: str = "largest-random",
) -> BatchPartition:
    """Draw the per-iteration subnet mix.

    ``largest-random`` anchors part 0 at the full width and samples the rest;
    the other policies swap that anchor for none, the smallest subnet, or both
    extremes.
    """
    if policy not in PARTITION_POLICIES:
        raise PartitionError(f"unknown policy {policy!r}; choose from {PARTITION_POLICIES}")
    anchors: list[WidthConfig] = []
    if policy == "largest-random":
        anchors = [space.largest_config()]
    elif policy == "smallest-random":
        anchors = [space.smallest_config()]
    elif policy == "largest-smallest-random":
        anchors = [space.largest_config(), space.smallest_config()]
    if len(anchors) > n_parts:
        raise PartitionError(f"policy {policy!r} needs at least {len(anchors)} parts")
    configs = anchors + [space.sample_uniform(rng) for _ in range(n_parts - len(anchors))]
    return BatchPartition(n_parts=n_parts, batch_size=batch_size, part_configs=tuple(configs))


def _activate(x: Tensor, act: str) -> Tensor:
    if act == "relu":
        return F.relu(x)
    if act == "relu6":
        return F.relu6(x)
    return x


class SupernetModel(nn.Module):
    """Full-width parameter store with a masked and a sliced execution path."""

    def __init__(self, desc: ArchDescription):
        super().__init__()
        self.desc = desc
        ops: dict[str, nn.Module] = {}
        norms: dict[str, nn.Module] = {}
        channels = {INPUT_NAME: desc.input_channels}
        for node in desc.nodes:
            in_channels = channels[node.inputs[0]]
            if node.kind == "conv":
                ops[node.name] = nn.Conv2d(
                    in_channels, node.out_channels, node.kernel,
                    stride=node.stride, padding=node.padding, bias=node.bias,
                )
            elif node.kind == "dwconv":
                ops[node.name] = nn.Conv2d(
                    in_channels, in_channels, node.kernel,
                    stride=node.stride, padding=node.padding,
                    groups=in_channels, bias=node.bias,
                )
            elif node.kind == "linear":
                ops[node.name] = nn.Linear(in_channels, node.out_channels, bias=node.bias)
            if node.bn:
                norms[node.name] = nn.BatchNorm2d(node.out_channels)
            channels[node.name] = node.out_channels or in_channels
        self.ops = nn.ModuleDict(ops)
        self.norms = nn.ModuleDict(norms)

    @property
    def space(self) -> SearchSpace:
        return self.desc.space

    def _node_widths(self, config: WidthConfig) -> dict[str, int]:
        widths = {}
        for name, ref in self.desc.width_ref.items():
            widths[name] = self.desc.input_channels if ref is None else config[ref]
        return widths

    def _apply_norm(self, name: str, x: Tensor, bn_mode: str, width: int | None = None) -> Tensor:
        bn = self.norms[name]
        if width is None:  # full-width masked path
            weight, bias = bn.weight, bn.bias
            mean, var = bn.running_mean, bn.running_var
        else:
            weight, bias = bn.weight[:width], bn.bias[:width]
            mean, var = bn.running_mean[:width], bn.running_var[:width]
        if bn_mode == "batch":
            # Current-batch statistics, never folded into the running buffers.
            return F.batch_norm(x, None, None, weight, bias, True, 0.0, bn.eps)
        return F.batch_norm(x, mean, var, weight, bias, False, 0.0, bn.eps)

    def masked_forward(
        self,
        x: Tensor,
        partition: BatchPartition,
        bn_mode: str,
        collect: Sequence[str] = (),
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """One full-width pass over the whole batch with per-part channel masks.

        Masks are applied right after each conv/linear op and again after its
        norm layer, so channels at or beyond a part's width are exactly zero in
        every intermediate, shift terms included.
        """
        if bn_mode not in BN_MODES:
            raise ConstraintError(f"unknown bn_mode {bn_mode!r}")
        if x.shape[0] != partition.batch_size:
            raise PartitionError(
                f"input has {x.shape[0]} rows, partition expects {partition.batch_size}"
            )
        if x.shape[1] != self.desc.input_channels:
            raise PartitionError(
                f"input has {x.shape[1]} channels, expected {self.desc.input_channels}"
            )
        space = self.space
        for config in partition.part_configs:
            space.validate_config(config)

        mask_cache: dict[tuple[int, tuple[int, ...]], Tensor] = {}

        def mask_for(layer_index: int, channels: int, like: Tensor) -> Tensor | None:
            widths = tuple(config[layer_index] for config in partition.part_configs)
            if all(width == channels for width in widths):
                return None
            key = (channels, widths)
            mask = mask_cache.get(key)
            if mask is None:
                row_widths = torch.empty(partition.batch_size, dtype=torch.long, device=like.device)
                for part, width in enumerate(widths):
                    row_widths[partition.rows(part)] = width
                position = torch.arange(channels, device=like.device)
                mask = (position[None, :] < row_widths[:, None]).to(like.dtype)
                mask_cache[key] = mask
            return mask

        acts: dict[str, Tensor] = {INPUT_NAME: x}
        taps: dict[str, Tensor] = {}
        last = x
        for node in self.desc.nodes:
            src = acts[node.inputs[0]]
            if node.kind in ("conv", "dwconv"):
                layer_index = self.desc.compute_index[node.name]
                y = self.ops[node.name](src)
                mask = mask_for(layer_index, y.shape[1], y)
                if mask is not None:
                    y = y * mask[:, :, None, None]
                if node.bn:
                    y = self._apply_norm(node.name, y, bn_mode)
                    if mask is not None:
                        y = y * mask[:, :, None, None]
                y = _activate(y, node.act)
            elif node.kind == "linear":
                layer_index = self.desc.compute_index[node.name]
                y = self.ops[node.name](src.flatten(1))
                mask = mask_for(layer_index, y.shape[1], y)
                if mask is not None:
                    y = y * mask
                y = _activate(y, node.act)
            elif node.kind == "add":
                y = acts[node.inputs[0]]
                for other in node.inputs[1:]:
                    y = y + acts[other]
                y = _activate(y, node.act)
            elif node.kind == "maxpool":
                y = F.max_pool2d(src, node.kernel, node.stride, node.padding)
            elif node.kind == "avgpool":
                y = F.avg_pool2d(src, node.kernel, node.stride, node.padding)
            else:  # gpool
                y = F.adaptive_avg_pool2d(src, 1)
            acts[node.name] = y
            if node.name in collect:
                taps[node.name] = y
            last = y
        return last, taps

    def sliced_forward(
        self,
        x: Tensor,
        config: WidthConfig,
        bn_mode: str,
        collect: Sequence[str] = (),
        stats_hook: Callable[[str, Tensor], None] | None = None,
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """Run one subnet conventionally on physically sliced weights.

        ``stats_hook`` observes every pre-normalization activation, which is
        how recalibration collects its running statistics.
        """
        if bn_mode not in BN_MODES:
            raise ConstraintError(f"unknown bn_mode {bn_mode!r}")
        if x.shape[1] != self.desc.input_channels:
            raise PartitionError(
                f"input has {x.shape[1]} channels, expected {self.desc.input_channels}"
            )
        self.space.validate_config(config)
        widths = self._node_widths(config)

        acts: dict[str, Tensor] = {INPUT_NAME: x}
        taps: dict[str, Tensor] = {}
        last = x
        for node in self.desc.nodes:
            src = acts[node.inputs[0]]
            if node.kind in ("conv", "dwconv"):
                op = self.ops[node.name]
                width = widths[node.name]
                in_width = src.shape[1]
                if node.kind == "conv":
                    weight = op.weight[:width, :in_width]
                    groups = 1
                else:
                    weight = op.weight[:width]
                    groups = width
                bias = None if op.bias is None else op.bias[:width]
                y = F.conv2d(src, weight, bias, node.stride, node.padding, groups=groups)
                if node.bn:
                    if stats_hook is not None:
                        stats_hook(node.name, y)
                    y = self._apply_norm(node.name, y, bn_mode, width)
                y = _activate(y, node.act)
            elif node.kind == "linear":
                op = self.ops[node.name]
                width = widths[node.name]
                flat = src.flatten(1)
                bias = None if op.bias is None else op.bias[:width]
                y = F.linear(flat, op.weight[:width, : flat.shape[1]], bias)
                y = _activate(y, node.act)
            elif node.kind == "add":
                y = acts[node.inputs[0]]
                for other in node.inputs[1:]:
                    y = y + acts[other]
                y = _activate(y, node.act)
            elif node.kind == "maxpool":
                y = F.max_pool2d(src, node.kernel, node.stride, node.padding)
            elif node.kind == "avgpool":
                y = F.avg_pool2d(src, node.kernel, node.stride, node.padding)
            else:  # gpool
                y = F.adaptive_avg_pool2d(src, 1)
            acts[node.name] = y
            if node.name in collect:
                taps[node.name] = y
            last = y
        return last, taps


@dataclass
class SupernetHandle:
    """A supernet plus the statistic mode its norm layers currently follow."""

    desc: ArchDescription
    model: SupernetModel
    bn_mode: str = "batch"
    iteration: int = 0
    recalibrated_for: WidthConfig | None = None

    def __post_init__(self) -> None:
        if self.bn_mode not in BN_MODES:
            raise ConstraintError(f"unknown bn_mode {self.bn_mode!r}")

    @property
    def space(self) -> SearchSpace:
        return self.desc.space

    def set_bn_mode(self, mode: str) -> None:
        if mode not in BN_MODES:
            raise ConstraintError(f"unknown bn_mode {mode!r}")
        self.bn_mode = mode
        if mode != "recalibrated":
            self.recalibrated_for = None


def build_supernet(desc: ArchDescription, seed: int | None = None) -> SupernetHandle:
    """Fresh full-width supernet; pass a seed for reproducible initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return SupernetHandle(desc=desc, model=SupernetModel(desc))


def parallel_forward(
    handle: SupernetHandle,
    input_batch: Tensor,
    partition: BatchPartition,
    collect: Sequence[str] = (),
) -> tuple[Tensor, dict[str, Tensor]]:
    """Masked single-pass forward of all parts; rows of part i compute subnet i."""
    return handle.model.masked_forward(input_batch, partition, handle.bn_mode, collect)


def serial_forward_oracle(
    handle: SupernetHandle,
    input_batch: Tensor,
    partition: BatchPartition,
    collect: Sequence[str] = (),
) -> list[tuple[Tensor, dict[str, Tensor]]]:
    """Each part run independently on sliced weights; the equivalence ground truth.

    Only meaningful with frozen or recalibrated statistics: with batch
    statistics each part would normalize over its own rows, which the masked
    pass by construction does not do.
    """
    if handle.bn_mode == "batch":
        raise ConstraintError("the serial oracle needs frozen or recalibrated statistics")
    if input_batch.shape[0] != partition.batch_size:
        raise PartitionError(
            f"input has {input_batch.shape[0]} rows, partition expects {partition.batch_size}"
        )
    outputs = []
    for part in range(partition.n_parts):
        rows = input_batch[partition.rows(part)]
        outputs.append(
            handle.model.sliced_forward(
                rows, partition.part_configs[part], handle.bn_mode, collect
            )
        )
    return outputs


def supernet_train_step(
    handle: SupernetHandle,
    optimizer: torch.optim.Optimizer,
    input_batch: Tensor,
    labels: Tensor,
    rng: np.random.Generator,
    n_parts: int = 4,
    policy: str = "largest-random",
) -> tuple[float, list[LossRecord]]:
    """One parallel-subnets update: sample the mix, one masked pass, one step.

    Per-part cross-entropy losses (each a mean over its own rows) are summed
    and backpropagated together. Returns the summed loss and one record per
    part for the prior estimator.
    """
    if handle.bn_mode != "batch":
        raise ConstraintError("training requires batch-statistics mode")
    space = handle.space
    partition = sample_partition(space, n_parts, input_batch.shape[0], rng, policy)
    logits, _ = parallel_forward(handle, input_batch, partition)

    largest = space.largest_config()
    losses = []
    for part in range(n_parts):
        rows = partition.rows(part)
        losses.append(F.cross_entropy(logits[rows], labels[rows]))
    total = losses[0]
    for part_loss in losses[1:]:
        total = total + part_loss
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite loss at iteration {handle.iteration}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    records = []
    for part, config in enumerate(partition.part_configs):
        records.append(
            LossRecord(
                iteration=handle.iteration,
                part=part,
                widths=config,
                loss=float(losses[part].item()),
                flops=space.flops(config),
                is_largest=config == largest,
            )
        )
    handle.iteration += 1
    return float(total.item()), records


def serial_reference_step(
    handle: SupernetHandle,
    optimizer: torch.optim.Optimizer,
    input_batch: Tensor,
    labels: Tensor,
    configs: Sequence[WidthConfig],
) -> float:
    """Timing baseline: the same subnets run one after another.

    Each subnet does a full forward-backward on the whole batch over sliced
    weights; gradients accumulate and a single optimizer step follows.
    """
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for config in configs:
        logits, _ = handle.model.sliced_forward(input_batch, config, "batch")
        loss = F.cross_entropy(logits, labels)
        loss.backward()
        total += float(loss.item())
    optimizer.step()
    return total


def recalibrate_bn(
    handle: SupernetHandle,
    config: WidthConfig,
    calibration_batches: Iterable[Tensor | tuple],
) -> SupernetHandle:
    """Recompute per-channel normalization statistics for one subnet.

    Forwards the sliced subnet over the calibration stream (batch-statistics
    normalization, as during training) while accumulating exact float64 sums of
    every pre-normalization activation, then writes the aggregate mean and
    population variance into the first ``width`` entries of each running
    buffer. Weights are untouched.
    """
    model = handle.model
    widths = model._node_widths(config)
    sums: dict[str, Tensor] = {}
    squares: dict[str, Tensor] = {}
    counts: dict[str, int] = {}

    def hook(name: str, pre_norm: Tensor) -> None:
        flat = pre_norm.detach().to(torch.float64).transpose(0, 1).reshape(pre_norm.shape[1], -1)
        if name not in sums:
            sums[name] = flat.sum(dim=1)
            squares[name] = (flat * flat).sum(dim=1)
            counts[name] = flat.shape[1]
        else:
            sums[name] += flat.sum(dim=1)
            squares[name] += (flat * flat).sum(dim=1)
            counts[name] += flat.shape[1]

    seen = 0
    with torch.no_grad():
        for batch in calibration_batches:
            x = batch[0] if isinstance(batch, (tuple, list)) else batch
            model.sliced_forward(x, config, "batch", stats_hook=hook)
            seen += 1
    if seen == 0:
        raise CalibrationError("calibration stream is empty")

    with torch.no_grad():
        for name, total in sums.items():
            count = counts[name]
            mean = total / count
            var = squares[name] / count - mean * mean
            var = var.clamp_min_(0.0)
            bn = model.norms[name]
            width = widths[name]
            bn.running_mean[:width] = mean.to(bn.running_mean.dtype)
            bn.running_var[:width] = var.to(bn.running_var.dtype)
    handle.bn_mode = "recalibrated"
    handle.recalibrated_for = config
    return handle


def save_checkpoint(
    path: str | Path,
    handle: SupernetHandle,
    optimizer: torch.optim.Optimizer | None = None,
    sampler_rng: np.random.Generator | None = None,
) -> dict:
    """Write weights plus training state, and a JSON sidecar manifest.

    The manifest (``<path>.json``) records the space hash, iteration count,
    bn_mode and RNG states, so a resumed run can prove it continues the same
    experiment.
    """
    path = Path(path)
    digest = space_hash(handle.desc)
    payload = {
        "description": handle.desc.raw,
        "space_hash": digest,
        "model": handle.model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "iteration": handle.iteration,
        "bn_mode": handle.bn_mode,
        "recalibrated_for": None
        if handle.recalibrated_for is None
        else list(handle.recalibrated_for),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": None if sampler_rng is None else sampler_rng.bit_generator.state,
    }
    torch.save(payload, path)
    manifest = {
        "space_hash": digest,
        "iteration": handle.iteration,
        "bn_mode": handle.bn_mode,
        "has_optimizer": optimizer is not None,
        "torch_rng": payload["torch_rng"].numpy().tobytes().hex(),
        "numpy_rng": payload["numpy_rng"],
    }
    with open(path.with_name(path.name + ".json"), "w") as sidecar:
        json.dump(manifest, sidecar, indent=2)
    return manifest


@dataclass
class CheckpointBundle:
    """Everything a resumed run needs from disk."""

    handle: SupernetHandle
    optimizer_state: dict | None
    sampler_rng: np.random.Generator | None
    manifest: dict | None


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Rebuild a handle from a checkpoint, restoring RNG streams.

    Raises CheckpointError when the sidecar manifest disagrees with the
    payload, which catches mixed-up files early.
    """
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as error:
        raise CheckpointError(f"cannot read checkpoint {path}: {error}") from error
    desc = load_description(payload["description"])
    digest = space_hash(desc)
    if digest != payload["space_hash"]:
        raise CheckpointError(
            f"{path}: stored space hash {payload['space_hash']} does not match "
            f"its own description ({digest})"
        )
    manifest = None
    sidecar_path = path.with_name(path.name + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as sidecar:
            manifest = json.load(sidecar)
        for key in ("space_hash", "iteration", "bn_mode"):
            if manifest.get(key) != (digest if key == "space_hash" else payload[key]):
                raise CheckpointError(
                    f"{sidecar_path}: manifest field {key!r} disagrees with the checkpoint"
                )

    model = SupernetModel(desc)
    model.load_state_dict(payload["model"])
    recalibrated = payload["recalibrated_for"]
    handle = SupernetHandle(
        desc=desc,
        model=model,
        bn_mode=payload["bn_mode"],
        iteration=payload["iteration"],
        recalibrated_for=None if recalibrated is None else WidthConfig(tuple(recalibrated)),
    )
    torch.set_rng_state(payload["torch_rng"])
    sampler_rng = None
    if payload["numpy_rng"] is not None:
        state = payload["numpy_rng"]
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
        sampler_rng = np.random.Generator(bit_generator)
    return CheckpointBundle(
        handle=handle,
        optimizer_state=payload["optimizer"],
        sampler_rng=sampler_rng,
        manifest=manifest,
    )
