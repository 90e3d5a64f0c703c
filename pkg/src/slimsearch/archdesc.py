"""Architecture descriptions: a small YAML graph schema compiled to a search space.

A description lists nodes in topological order. Conv, depthwise-conv and linear
nodes become prunable layers; pooling and add nodes only route activations, so
their widths are inherited from whichever prunable layer feeds them. The loader
resolves spatial sizes from the reference resolution, checks that merged
branches carry matching widths, and emits both the cost-model space and the
metadata a module builder needs (strides, padding, norm and activation flags).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import SpaceError
from .space import LayerSpec, SearchSpace

NODE_KINDS = ("conv", "dwconv", "linear", "maxpool", "avgpool", "gpool", "add")
COMPUTE_KINDS = ("conv", "dwconv", "linear")
ACTIVATIONS = ("none", "relu", "relu6")
INPUT_NAME = "input"

_SPACE_KIND = {"conv": "standard-conv", "dwconv": "depthwise-conv", "linear": "linear"}


def _pair(value: Any, what: str, node: str) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (int(value[0]), int(value[1]))
    raise SpaceError(f"node {node!r}: {what} must be an int or a pair, got {value!r}")


@dataclass(frozen=True)
class Node:
    """One graph node with its geometry fully resolved."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    out_channels: int | None
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    bn: bool
    bias: bool
    act: str
    group: str | None
    group_count: int | None
    in_size: tuple[int, int]
    out_size: tuple[int, int]


@dataclass(eq=False)
class ArchDescription:
    """A validated network graph plus the search space it induces.

    ``width_ref`` maps every node to the prunable layer index that decides how
    many of its channels are live (``None`` means the raw network input), which
    is all the supernet needs to mask or slice intermediate activations.
    """

    name: str
    input_channels: int
    reference_resolution: tuple[int, int]
    default_group_count: int
    min_keep_ratio: float
    nodes: tuple[Node, ...]
    space: SearchSpace
    width_ref: dict[str, int | None]
    compute_index: dict[str, int]
    raw: dict

    def node(self, name: str) -> Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise SpaceError(f"no node named {name!r}")


def _conv_out(in_size: tuple[int, int], kernel, stride, padding, node: str) -> tuple[int, int]:
    out = []
    for size, k, s, p in zip(in_size, kernel, stride, padding):
        span = size + 2 * p - k
        if span < 0:
            raise SpaceError(f"node {node!r}: kernel {k} exceeds padded input extent {size + 2 * p}")
        out.append(span // s + 1)
    return (out[0], out[1])


def load_description(source: str | Path | dict) -> ArchDescription:
    """Parse a description from a YAML path or an already-loaded dict."""
    if isinstance(source, (str, Path)):
        with open(source) as handle:
            data = yaml.safe_load(handle)
        if not isinstance(data, dict):
            raise SpaceError(f"{source}: expected a mapping at the top level")
    else:
        data = copy.deepcopy(source)

    known = {
        "name",
        "input_channels",
        "reference_resolution",
        "group_count",
        "min_keep_ratio",
        "layers",
    }
    unknown = set(data) - known
    if unknown:
        raise SpaceError(f"unknown description fields {sorted(unknown)}")

    name = str(data.get("name", "net"))
    input_channels = int(data.get("input_channels", 3))
    resolution = _pair(data.get("reference_resolution", 224), "reference_resolution", name)
    if "group_count" not in data:
        raise SpaceError("description must set a default group_count")
    default_groups = int(data["group_count"])
    if default_groups < 1:
        raise SpaceError("group_count must be positive")
    min_keep_ratio = float(data.get("min_keep_ratio", 0.2))
    layer_dicts = data.get("layers")
    if not isinstance(layer_dicts, list) or not layer_dicts:
        raise SpaceError("description needs a non-empty 'layers' list")

    nodes: list[Node] = []
    out_size: dict[str, tuple[int, int]] = {INPUT_NAME: resolution}
    out_channels_max: dict[str, int] = {INPUT_NAME: input_channels}
    width_ref: dict[str, int | None] = {INPUT_NAME: None}
    compute_index: dict[str, int] = {}
    layer_specs: list[LayerSpec] = []
    input_sources: list[int | None] = []
    group_of_layer: dict[int, str | None] = {}
    seen = {INPUT_NAME}

    for entry in layer_dicts:
        if not isinstance(entry, dict):
            raise SpaceError(f"layer entries must be mappings, got {entry!r}")
        entry = dict(entry)
        node_name = str(entry.pop("name", ""))
        if not node_name or node_name == INPUT_NAME:
            raise SpaceError(f"every layer needs a name other than {INPUT_NAME!r}")
        if node_name in seen:
            raise SpaceError(f"duplicate node name {node_name!r}")
        kind = entry.pop("kind", None)
        if kind not in NODE_KINDS:
            raise SpaceError(f"node {node_name!r}: unknown kind {kind!r}")

        if kind == "add":
            inputs = entry.pop("inputs", None)
            if not isinstance(inputs, list) or len(inputs) < 2:
                raise SpaceError(f"node {node_name!r}: add needs an 'inputs' list of 2 or more")
            inputs = tuple(str(i) for i in inputs)
        else:
            inputs = (str(entry.pop("input", INPUT_NAME)),)
        for source in inputs:
            if source not in seen:
                raise SpaceError(f"node {node_name!r}: input {source!r} is not defined above it")

        in_size = out_size[inputs[0]]
        in_channels = out_channels_max[inputs[0]]

        if kind in COMPUTE_KINDS:
            source_ref = width_ref[inputs[0]]
            source_groups = None if source_ref is None else layer_specs[source_ref].group_count
            node = _build_compute_node(
                node_name, kind, inputs, entry, in_size, in_channels,
                width_ref, default_groups, source_groups,
            )
            compute_index[node_name] = len(layer_specs)
            layer_specs.append(
                LayerSpec(
                    name=node_name,
                    kind=_SPACE_KIND[kind],
                    max_out_channels=node.out_channels,  # type: ignore[arg-type]
                    kernel=node.kernel if kind != "linear" else (1, 1),
                    out_size=node.out_size if kind != "linear" else (1, 1),
                    coupling_group=node.group,
                    group_count=node.group_count,  # type: ignore[arg-type]
                )
            )
            input_sources.append(width_ref[inputs[0]])
            group_of_layer[compute_index[node_name]] = node.group
            width_ref[node_name] = compute_index[node_name]
        else:
            node = _build_routing_node(
                node_name, kind, inputs, entry, in_size, out_size,
                out_channels_max, width_ref, group_of_layer,
            )
            width_ref[node_name] = width_ref[inputs[0]]

        if entry:
            raise SpaceError(f"node {node_name!r}: unknown fields {sorted(entry)}")
        nodes.append(node)
        out_size[node_name] = node.out_size
        out_channels_max[node_name] = node.out_channels if node.out_channels else in_channels
        seen.add(node_name)

    space = SearchSpace(
        layers=tuple(layer_specs),
        input_sources=tuple(input_sources),
        input_channels=input_channels,
        min_keep_ratio=min_keep_ratio,
    )
    raw = _canonical_dict(name, input_channels, resolution, default_groups, min_keep_ratio, nodes)
    return ArchDescription(
        name=name,
        input_channels=input_channels,
        reference_resolution=resolution,
        default_group_count=default_groups,
        min_keep_ratio=min_keep_ratio,
        nodes=tuple(nodes),
        space=space,
        width_ref=width_ref,
        compute_index=compute_index,
        raw=raw,
    )


def _build_compute_node(
    node_name: str,
    kind: str,
    inputs: tuple[str, ...],
    entry: dict,
    in_size: tuple[int, int],
    in_channels: int,
    width_ref: dict[str, int | None],
    default_groups: int,
    source_groups: int | None,
) -> Node:
    group = entry.pop("group", None)
    group = None if group is None else str(group)
    if kind == "dwconv" and source_groups is not None:
        # Coupling with the source layer forces equal group counts.
        group_count = int(entry.pop("group_count", source_groups))
    else:
        group_count = int(entry.pop("group_count", default_groups))

    if kind == "dwconv":
        out_channels = int(entry.pop("out_channels", in_channels))
        if out_channels != in_channels:
            raise SpaceError(
                f"node {node_name!r}: depthwise conv keeps its input width ({in_channels})"
            )
        source_ref = width_ref[inputs[0]]
        if source_ref is None:
            raise SpaceError(f"node {node_name!r}: depthwise conv cannot read the raw input")
        if group is None:
            raise SpaceError(
                f"node {node_name!r}: depthwise conv needs the same 'group' as its source"
            )
    else:
        if "out_channels" not in entry:
            raise SpaceError(f"node {node_name!r}: {kind} needs out_channels")
        out_channels = int(entry.pop("out_channels"))

    if kind == "linear":
        if in_size != (1, 1):
            raise SpaceError(
                f"node {node_name!r}: linear input must be 1x1 spatial, got {in_size}; "
                "express a wide fully-connected layer as a conv over its final map"
            )
        kernel = stride = (1, 1)
        padding = (0, 0)
        bn = bool(entry.pop("bn", False))
        if bn:
            raise SpaceError(f"node {node_name!r}: linear layers carry no batch norm here")
        bias = bool(entry.pop("bias", True))
        act = str(entry.pop("act", "none"))
        node_out = (1, 1)
    else:
        if "kernel" not in entry:
            raise SpaceError(f"node {node_name!r}: {kind} needs a kernel size")
        kernel = _pair(entry.pop("kernel"), "kernel", node_name)
        stride = _pair(entry.pop("stride", 1), "stride", node_name)
        padding_raw = entry.pop("padding", "same")
        if padding_raw == "same":
            padding = (kernel[0] // 2, kernel[1] // 2)
        else:
            padding = _pair(padding_raw, "padding", node_name)
        bn = bool(entry.pop("bn", True))
        bias = bool(entry.pop("bias", not bn))
        act = str(entry.pop("act", "relu"))
        node_out = _conv_out(in_size, kernel, stride, padding, node_name)

    if act not in ACTIVATIONS:
        raise SpaceError(f"node {node_name!r}: unknown activation {act!r}")
    return Node(
        name=node_name,
        kind=kind,
        inputs=inputs,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        padding=padding,
        bn=bn,
        bias=bias,
        act=act,
        group=group,
        group_count=group_count,
        in_size=in_size,
        out_size=node_out,
    )


def _build_routing_node(
    node_name: str,
    kind: str,
    inputs: tuple[str, ...],
    entry: dict,
    in_size: tuple[int, int],
    out_size: dict[str, tuple[int, int]],
    out_channels_max: dict[str, int],
    width_ref: dict[str, int | None],
    group_of_layer: dict[int, str | None],
) -> Node:
    act = str(entry.pop("act", "none"))
    if act not in ACTIVATIONS:
        raise SpaceError(f"node {node_name!r}: unknown activation {act!r}")

    if kind == "add":
        sizes = {out_size[source] for source in inputs}
        if len(sizes) != 1:
            raise SpaceError(f"node {node_name!r}: summed branches differ in spatial size {sizes}")
        channels = {out_channels_max[source] for source in inputs}
        if len(channels) != 1:
            raise SpaceError(f"node {node_name!r}: summed branches differ in channels {channels}")
        refs = [width_ref[source] for source in inputs]
        if any(ref is None for ref in refs):
            raise SpaceError(f"node {node_name!r}: cannot sum the raw input")
        # Widths must agree for every config, so the feeding layers must either
        # be the same layer or share a coupling group.
        groups = {group_of_layer[ref] for ref in refs}  # type: ignore[index]
        if len(set(refs)) > 1 and (len(groups) != 1 or None in groups):
            raise SpaceError(
                f"node {node_name!r}: summed branches must come from one layer or one "
                "coupling group"
            )
        node_out = in_size
        kernel = stride = (1, 1)
        padding = (0, 0)
    elif kind == "gpool":
        node_out = (1, 1)
        kernel = in_size
        stride = (1, 1)
        padding = (0, 0)
    else:
        if "kernel" not in entry:
            raise SpaceError(f"node {node_name!r}: {kind} needs a kernel size")
        kernel = _pair(entry.pop("kernel"), "kernel", node_name)
        stride = _pair(entry.pop("stride", kernel), "stride", node_name)
        padding = _pair(entry.pop("padding", 0), "padding", node_name)
        node_out = _conv_out(in_size, kernel, stride, padding, node_name)

    return Node(
        name=node_name,
        kind=kind,
        inputs=inputs,
        out_channels=None,
        kernel=kernel,
        stride=stride,
        padding=padding,
        bn=False,
        bias=False,
        act=act,
        group=None,
        group_count=None,
        in_size=in_size,
        out_size=node_out,
    )


def _canonical_dict(
    name: str,
    input_channels: int,
    resolution: tuple[int, int],
    default_groups: int,
    min_keep_ratio: float,
    nodes: list[Node],
) -> dict:
    layers = []
    for node in nodes:
        entry: dict[str, Any] = {"name": node.name, "kind": node.kind}
        if node.kind == "add":
            entry["inputs"] = list(node.inputs)
        else:
            entry["input"] = node.inputs[0]
        if node.kind in COMPUTE_KINDS:
            entry["out_channels"] = node.out_channels
            entry["group"] = node.group
            entry["group_count"] = node.group_count
            entry["bias"] = node.bias
            entry["act"] = node.act
        if node.kind in ("conv", "dwconv"):
            entry["kernel"] = list(node.kernel)
            entry["stride"] = list(node.stride)
            entry["padding"] = list(node.padding)
            entry["bn"] = node.bn
        if node.kind in ("maxpool", "avgpool"):
            entry["kernel"] = list(node.kernel)
            entry["stride"] = list(node.stride)
            entry["padding"] = list(node.padding)
        if node.kind == "add" and node.act != "none":
            entry["act"] = node.act
        layers.append(entry)
    return {
        "name": name,
        "input_channels": input_channels,
        "reference_resolution": list(resolution),
        "group_count": default_groups,
        "min_keep_ratio": min_keep_ratio,
        "layers": layers,
    }


def save_description(desc: ArchDescription, path: str | Path) -> None:
    with open(path, "w") as handle:
        yaml.safe_dump(desc.raw, handle, sort_keys=False)


def narrow_description(desc: ArchDescription, config) -> ArchDescription:
    """The same graph with every prunable layer pinned at ``config``'s width.

    Grids collapse to a single choice per layer, so a supernet built from the
    result is exactly the standalone subnet (used for from-scratch retraining).
    """
    desc.space.validate_config(config)
    raw = copy.deepcopy(desc.raw)
    raw["name"] = f"{desc.name}-sub"
    raw["group_count"] = 1
    for entry in raw["layers"]:
        if entry["kind"] in COMPUTE_KINDS:
            entry["out_channels"] = int(config[desc.compute_index[entry["name"]]])
            entry["group_count"] = 1
    return load_description(raw)


def space_hash(desc: ArchDescription) -> str:
    """Stable short digest of the canonical description, for manifests."""
    payload = json.dumps(desc.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
