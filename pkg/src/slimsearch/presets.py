"""Bundled architecture descriptions.

``resnet50``, ``mobilenet_v2`` and ``vgg16`` mirror the torchvision graphs at
224x224 (VGG's first fully-connected layer is expressed as a 7x7 conv so the
linear cost rule stays exact). ``desk8`` is a small residual net sized for
CPU-scale experiments at 32x32.

Channel grids prefer a group count of 10 (ResNet-50) or 20 (MobileNetV2, VGG16)
per layer; where that does not divide the channel count, the largest divisor at
or below it is used instead, so every grid point is an exact channel count.
"""

from __future__ import annotations

from .archdesc import ArchDescription, load_description


def fit_group_count(channels: int, preferred: int) -> int:
    """Largest divisor of ``channels`` no greater than ``preferred``."""
    for count in range(min(preferred, channels), 0, -1):
        if channels % count == 0:
            return count
    return 1


def desk8(num_classes: int = 10) -> dict:
    """Seven-conv residual net for 32x32 inputs; every channel count is a
    multiple of 8, so the preferred group count applies everywhere."""
    return {
        "name": "desk8",
        "input_channels": 3,
        "reference_resolution": [32, 32],
        "group_count": 8,
        "min_keep_ratio": 0.2,
        "layers": [
            {"name": "conv1", "kind": "conv", "out_channels": 16, "kernel": 3, "input": "input", "group": "g1"},
            {"name": "b1c1", "kind": "conv", "out_channels": 16, "kernel": 3, "input": "conv1"},
            {"name": "b1c2", "kind": "conv", "out_channels": 16, "kernel": 3, "input": "b1c1", "group": "g1", "act": "none"},
            {"name": "add1", "kind": "add", "inputs": ["b1c2", "conv1"], "act": "relu"},
            {"name": "pool1", "kind": "maxpool", "kernel": 2, "input": "add1"},
            {"name": "b2c1", "kind": "conv", "out_channels": 32, "kernel": 3, "input": "pool1"},
            {"name": "b2c2", "kind": "conv", "out_channels": 32, "kernel": 3, "input": "b2c1"},
            {"name": "pool2", "kind": "maxpool", "kernel": 2, "input": "b2c2"},
            {"name": "b3c1", "kind": "conv", "out_channels": 64, "kernel": 3, "input": "pool2", "group": "g3"},
            {"name": "b3c2", "kind": "conv", "out_channels": 64, "kernel": 3, "input": "b3c1", "group": "g3", "act": "none"},
            {"name": "add3", "kind": "add", "inputs": ["b3c2", "b3c1"], "act": "relu"},
            {"name": "gap", "kind": "gpool", "input": "add3"},
            {"name": "fc", "kind": "linear", "out_channels": num_classes, "input": "gap", "group_count": 1},
        ],
    }


def resnet50(num_classes: int = 1000) -> dict:
    """ResNet-50 with the stride-2 on each stage's 3x3 conv.

    The identity path of every stage couples its 1x1 output convs and the
    projection shortcut into one width group.
    """
    preferred = 10
    layers: list[dict] = [
        {
            "name": "conv1", "kind": "conv", "out_channels": 64, "kernel": 7,
            "stride": 2, "padding": 3, "input": "input",
            "group_count": fit_group_count(64, preferred),
        },
        {"name": "pool1", "kind": "maxpool", "kernel": 3, "stride": 2, "padding": 1, "input": "conv1"},
    ]
    stage_plan = [  # (blocks, mid width, out width)
        (3, 64, 256),
        (4, 128, 512),
        (6, 256, 1024),
        (3, 512, 2048),
    ]
    previous = "pool1"
    for stage, (blocks, mid, out) in enumerate(stage_plan, start=1):
        group = f"s{stage}"
        for block in range(1, blocks + 1):
            base = f"s{stage}b{block}"
            stride = 2 if (block == 1 and stage > 1) else 1
            layers += [
                {
                    "name": f"{base}c1", "kind": "conv", "out_channels": mid, "kernel": 1,
                    "input": previous, "group_count": fit_group_count(mid, preferred),
                },
                {
                    "name": f"{base}c2", "kind": "conv", "out_channels": mid, "kernel": 3,
                    "stride": stride, "input": f"{base}c1",
                    "group_count": fit_group_count(mid, preferred),
                },
                {
                    "name": f"{base}c3", "kind": "conv", "out_channels": out, "kernel": 1,
                    "input": f"{base}c2", "act": "none", "group": group,
                    "group_count": fit_group_count(out, preferred),
                },
            ]
            if block == 1:
                layers.append(
                    {
                        "name": f"{base}down", "kind": "conv", "out_channels": out,
                        "kernel": 1, "stride": stride, "input": previous, "act": "none",
                        "group": group, "group_count": fit_group_count(out, preferred),
                    }
                )
                shortcut = f"{base}down"
            else:
                shortcut = previous
            layers.append(
                {"name": f"{base}add", "kind": "add", "inputs": [f"{base}c3", shortcut], "act": "relu"}
            )
            previous = f"{base}add"
    layers += [
        {"name": "gap", "kind": "gpool", "input": previous},
        {"name": "fc", "kind": "linear", "out_channels": num_classes, "input": "gap", "group_count": 1},
    ]
    return {
        "name": "resnet50",
        "input_channels": 3,
        "reference_resolution": [224, 224],
        "group_count": fit_group_count(64, preferred),
        "min_keep_ratio": 0.2,
        "layers": layers,
    }


def mobilenet_v2(num_classes: int = 1000) -> dict:
    """MobileNetV2: inverted residual blocks with expansion 6 (1 at the stem).

    Each block's expansion conv and depthwise conv share a group; chains of
    blocks joined by residual adds share a group on their projection convs.
    """
    preferred = 20
    layers: list[dict] = [
        {
            "name": "conv1", "kind": "conv", "out_channels": 32, "kernel": 3, "stride": 2,
            "input": "input", "act": "relu6", "group": "stem",
            "group_count": fit_group_count(32, preferred),
        }
    ]
    # (expansion, out width, repeats, first stride), as in the standard layout
    block_plan = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ]
    previous = "conv1"
    previous_width = 32
    previous_group = "stem"
    index = 1
    for expansion, out, repeats, first_stride in block_plan:
        chain_group = f"p{index}" if repeats > 1 else None
        for repeat in range(repeats):
            stride = first_stride if repeat == 0 else 1
            base = f"b{index}"
            if expansion == 1:
                # No expansion conv: the depthwise conv tracks the stem width.
                expand_group = previous_group
                dw_input = previous
            else:
                width = previous_width * expansion
                expand_group = f"e{index}"
                layers.append(
                    {
                        "name": f"{base}e", "kind": "conv", "out_channels": width,
                        "kernel": 1, "input": previous, "act": "relu6",
                        "group": expand_group, "group_count": fit_group_count(width, preferred),
                    }
                )
                dw_input = f"{base}e"
            layers.append(
                {
                    "name": f"{base}d", "kind": "dwconv", "kernel": 3, "stride": stride,
                    "input": dw_input, "act": "relu6", "group": expand_group,
                }
            )
            project: dict = {
                "name": f"{base}p", "kind": "conv", "out_channels": out, "kernel": 1,
                "input": f"{base}d", "act": "none",
                "group_count": fit_group_count(out, preferred),
            }
            if chain_group is not None:
                project["group"] = chain_group
            layers.append(project)
            if repeat > 0:
                layers.append({"name": f"{base}add", "kind": "add", "inputs": [f"{base}p", previous]})
                previous = f"{base}add"
            else:
                previous = f"{base}p"
            previous_width = out
            previous_group = project.get("group")
            index += 1
    layers += [
        {
            "name": "head", "kind": "conv", "out_channels": 1280, "kernel": 1,
            "input": previous, "act": "relu6",
            "group_count": fit_group_count(1280, preferred),
        },
        {"name": "gap", "kind": "gpool", "input": "head"},
        {"name": "fc", "kind": "linear", "out_channels": num_classes, "input": "gap", "group_count": 1},
    ]
    return {
        "name": "mobilenet_v2",
        "input_channels": 3,
        "reference_resolution": [224, 224],
        "group_count": preferred,
        "min_keep_ratio": 0.2,
        "layers": layers,
    }


def vgg16(num_classes: int = 1000) -> dict:
    """VGG-16 with batch norm; the 25088-wide fully-connected layer becomes a
    7x7 conv over the final map so linear costs stay a plain width product."""
    preferred = 20
    plan = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
    layers: list[dict] = []
    previous = "input"
    for stage, (repeats, width) in enumerate(plan, start=1):
        for repeat in range(1, repeats + 1):
            name = f"s{stage}c{repeat}"
            layers.append(
                {
                    "name": name, "kind": "conv", "out_channels": width, "kernel": 3,
                    "input": previous, "group_count": fit_group_count(width, preferred),
                }
            )
            previous = name
        layers.append({"name": f"pool{stage}", "kind": "maxpool", "kernel": 2, "input": previous})
        previous = f"pool{stage}"
    layers += [
        {
            "name": "fc1", "kind": "conv", "out_channels": 4096, "kernel": 7, "padding": 0,
            "input": previous, "group_count": fit_group_count(4096, preferred),
        },
        {"name": "squeeze", "kind": "gpool", "input": "fc1"},
        {
            "name": "fc2", "kind": "linear", "out_channels": 4096, "input": "squeeze",
            "act": "relu", "group_count": fit_group_count(4096, preferred),
        },
        {"name": "fc3", "kind": "linear", "out_channels": num_classes, "input": "fc2", "group_count": 1},
    ]
    return {
        "name": "vgg16",
        "input_channels": 3,
        "reference_resolution": [224, 224],
        "group_count": preferred,
        "min_keep_ratio": 0.2,
        "layers": layers,
    }


PRESETS = {
    "desk8": desk8,
    "resnet50": resnet50,
    "mobilenet_v2": mobilenet_v2,
    "vgg16": vgg16,
}


def available_presets() -> tuple[str, ...]:
    return tuple(sorted(PRESETS))


def load_preset(name: str, num_classes: int | None = None) -> ArchDescription:
    """Build a preset description by name; unknown names list the options."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(available_presets())}")
    if num_classes is None:
        return load_description(PRESETS[name]())
    return load_description(PRESETS[name](num_classes))
