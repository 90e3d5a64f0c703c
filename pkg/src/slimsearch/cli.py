"""Command-line surface for the channel-pruning pipeline.

Subcommands cover the full workflow: train-supernet, build-prior, search,
retrain, flops, export-widths. Every artifact-producing command writes exactly
one run manifest next to its outputs, and reruns with unchanged inputs and
seed produce byte-identical artifacts (manifest timestamps aside).

Cost convention, used everywhere a FLOPs number appears: one FLOP means one
multiply-accumulate (MAC), counted once, over conv and linear layers only.
Under this convention the bundled ResNet50 description costs 4.1G.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .archdesc import ArchDescription, load_description, space_hash
from .datasets import DatasetBundle, DatasetSpec, build_dataset
from .errors import SlimsearchError
from .evolution import EvoConfig, search, write_ranked_csv
from .presets import available_presets, load_preset
from .prior import PriorDistribution, build_distribution, default_bucket_width
from .records import read_records
from .space import WidthConfig
from .supernet import load_checkpoint
from .training import (
    OptimizerSpec,
    TrainRecipe,
    retrain_subnet,
    train_supernet,
    write_results_table,
)

DATA_ROOT_ENV = "SLIMSEARCH_DATA_ROOT"

FLOPS_HELP = (
    "FLOPs are multiply-accumulates counted once, conv and linear layers only "
    "(the convention under which ResNet50 is 4.1G)."
)


class UsageError(Exception):
    """Bad flags, unreadable config, malformed inputs: exit code 2."""


@dataclass(frozen=True)
class RunManifest:
    """One per command invocation, written next to the outputs."""

    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    version: str
    wall_clock_seconds: float
    created: str
    details: dict

    def write(self, path: Path) -> None:
        with open(path, "w") as handle:
            json.dump(dataclasses.asdict(self), handle, indent=2, sort_keys=True)
            handle.write("\n")


def _write_manifest(
    path: Path,
    command: str,
    config: dict,
    inputs: dict,
    outputs: dict,
    seed: int | None,
    started: float,
    details: dict,
) -> None:
    manifest = RunManifest(
        command=command,
        config=config,
        inputs={key: str(value) for key, value in inputs.items()},
        outputs={key: str(value) for key, value in outputs.items()},
        seed=seed,
        version=__version__,
        wall_clock_seconds=time.monotonic() - started,
        created=datetime.now(timezone.utc).isoformat(),
        details=details,
    )
    manifest.write(path)


# -- input resolution ---------------------------------------------------------


def resolve_description(token: str) -> ArchDescription:
    """A --space value is a bundled preset name or a description file path."""
    if token in available_presets():
        return load_preset(token)
    path = Path(token)
    if not path.exists():
        raise UsageError(
            f"space {token!r} is neither a bundled preset "
            f"({', '.join(available_presets())}) nor an existing file"
        )
    try:
        return load_description(path)
    except (SlimsearchError, OSError, yaml.YAMLError) as error:
        raise UsageError(f"cannot load space from {path}: {error}") from error


def parse_widths(text: str, desc: ArchDescription) -> WidthConfig:
    try:
        widths = tuple(int(token) for token in text.split(","))
    except ValueError as error:
        raise UsageError(f"--widths must be comma-separated integers: {error}") from error
    config = WidthConfig(widths)
    try:
        desc.space.validate_config(config)
    except SlimsearchError as error:
        raise UsageError(str(error)) from error
    return config


def _require_file(path_text: str, what: str) -> Path:
    path = Path(path_text)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# -- run configuration file ---------------------------------------------------

RUN_CONFIG_SECTIONS = ("space", "recipe", "search", "paths")


@dataclass(frozen=True)
class RunConfig:
    desc: ArchDescription
    recipe: TrainRecipe
    search: dict
    paths: dict
    raw: dict


def _build_section(cls, mapping: dict, context: str):
    # Reject unknown keys so config typos fail loudly instead of silently
    # falling back to defaults.
    fields = {field.name for field in dataclasses.fields(cls)}
    unknown = set(mapping) - fields
    if unknown:
        raise UsageError(f"{context}: unknown keys {sorted(unknown)}")
    return cls(**mapping)


def load_run_config(path_text: str) -> RunConfig:
    path = _require_file(path_text, "config file")
    try:
        with open(path) as handle:
            raw = yaml.safe_load(handle)
    except yaml.YAMLError as error:
        raise UsageError(f"cannot parse config {path}: {error}") from error
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(raw) - set(RUN_CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    if "space" not in raw:
        raise UsageError(f"config {path}: missing required section 'space'")
    desc = resolve_description(str(raw["space"]))

    recipe_map = dict(raw.get("recipe") or {})
    optimizer_map = dict(recipe_map.pop("optimizer", None) or {})
    dataset_map = dict(recipe_map.pop("dataset", None) or {})
    paths = dict(raw.get("paths") or {})
    root = dataset_map.get("root") or paths.get("dataset_root") or os.environ.get(DATA_ROOT_ENV)
    if root is not None:
        dataset_map["root"] = str(root)
    try:
        optimizer = _build_section(OptimizerSpec, optimizer_map, "recipe.optimizer")
        dataset = _build_section(DatasetSpec, dataset_map, "recipe.dataset")
        recipe = _build_section(
            TrainRecipe,
            {**recipe_map, "optimizer": optimizer, "dataset": dataset},
            "recipe",
        )
    except (TypeError, SlimsearchError) as error:
        raise UsageError(f"config {path}: {error}") from error
    if dataset.kind == "folder" and dataset.root is None:
        raise UsageError(
            f"config {path}: folder dataset needs 'root' (recipe.dataset.root, "
            f"paths.dataset_root, or ${DATA_ROOT_ENV})"
        )
    return RunConfig(
        desc=desc,
        recipe=recipe,
        search=dict(raw.get("search") or {}),
        paths=paths,
        raw=raw,
    )


def _recipe_dict(recipe: TrainRecipe) -> dict:
    return dataclasses.asdict(recipe)


def _resolve_budget(value: float, reference: int, what: str) -> int:
    """Budget flags take a fraction of `reference` when < 1, else an absolute
    MAC count."""
    if value <= 0:
        raise UsageError(f"{what} must be positive")
    if value < 1.0:
        return round(value * reference)
    return int(round(value))


def _search_settings(config_search: dict, args: argparse.Namespace, space) -> EvoConfig:
    def pick(flag_value, key: str, default):
        if flag_value is not None:
            return flag_value
        return config_search.get(key, default)

    largest = space.flops(space.largest_config())
    flops_value = pick(args.flops, "flops", None)
    if flops_value is None:
        raise UsageError("search needs --flops (or a 'flops' entry in the config)")
    target = _resolve_budget(float(flops_value), largest, "--flops")
    tolerance = _resolve_budget(float(pick(args.tolerance, "tolerance", 0.02)), target, "--tolerance")
    try:
        return EvoConfig(
            target_flops=target,
            tolerance=tolerance,
            population_size=int(pick(args.population, "population", 128)),
            parent_count=int(pick(args.parents, "parents", 64)),
            mutation_prob=float(pick(args.mutation_prob, "mutation_prob", 0.2)),
            generations=int(pick(args.generations, "generations", 20)),
            seed=int(pick(args.seed, "seed", 0)),
        )
    except SlimsearchError as error:
        raise UsageError(str(error)) from error


def _load_dataset(recipe: TrainRecipe) -> DatasetBundle:
    try:
        return build_dataset(recipe.dataset)
    except (SlimsearchError, OSError) as error:
        raise UsageError(f"cannot load dataset: {error}") from error


# -- subcommand handlers ------------------------------------------------------


def cmd_train_supernet(args: argparse.Namespace) -> int:
    started = time.monotonic()
    run = load_run_config(args.config)
    recipe = run.recipe
    if args.seed is not None:
        recipe = dataclasses.replace(recipe, seed=args.seed)
    data = _load_dataset(recipe)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    handle, records_path = train_supernet(run.desc, recipe, data, out_dir)

    _write_manifest(
        out_dir / "manifest.json",
        command="train-supernet",
        config={"space": run.desc.name, "recipe": _recipe_dict(recipe)},
        inputs={"config": args.config},
        outputs={"records": records_path, "checkpoint": out_dir / "checkpoint.pt"},
        seed=recipe.seed,
        started=started,
        details={"iterations": handle.iteration, "bn_mode": handle.bn_mode},
    )
    print(f"trained {handle.iteration} iterations; records at {records_path}")
    return 0


def cmd_build_prior(args: argparse.Namespace) -> int:
    started = time.monotonic()
    records_path = _require_file(args.records, "records file")
    desc = resolve_description(args.space)
    try:
        records = read_records(records_path)
    except SlimsearchError as error:
        raise UsageError(str(error)) from error

    bucket_width = args.bucket_width or default_bucket_width(desc.space)
    try:
        dist = build_distribution(
            records, desc.space, bucket_width=bucket_width, weighting=args.weighting
        )
    except SlimsearchError as error:
        raise UsageError(str(error)) from error
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dist.save(out_path)

    _write_manifest(
        out_path.with_name(out_path.stem + ".manifest.json"),
        command="build-prior",
        config={
            "space": desc.name,
            "weighting": args.weighting,
            "bucket_width": bucket_width,
        },
        inputs={"records": records_path, "space": args.space},
        outputs={"distribution": out_path},
        seed=None,
        started=started,
        details={
            "records": len(records),
            "buckets": len(dist.buckets),
            "fallback_cells": len(dist.fallback_flags),
        },
    )
    print(f"distribution over {len(dist.buckets)} buckets written to {out_path}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    started = time.monotonic()
    run = load_run_config(args.config)
    checkpoint_path = _require_file(args.checkpoint, "checkpoint")
    prior_path = _require_file(args.prior, "prior distribution")
    try:
        bundle = load_checkpoint(checkpoint_path)
        dist = PriorDistribution.load(prior_path)
    except SlimsearchError as error:
        raise UsageError(str(error)) from error
    handle = bundle.handle
    if space_hash(handle.desc) != space_hash(run.desc):
        raise UsageError("checkpoint and config describe different search spaces")
    records = []
    if args.records is not None:
        try:
            records = read_records(_require_file(args.records, "records file"))
        except SlimsearchError as error:
            raise UsageError(str(error)) from error
    evo = _search_settings(run.search, args, handle.space)

    data = _load_dataset(run.recipe)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = search(
        handle,
        dist,
        records,
        evo,
        data.val.batch_list(run.recipe.batch_size),
        data.calib.batch_list(run.recipe.batch_size),
        log_path=out_dir / "search_log.jsonl",
    )
    ranked_path = out_dir / "ranked.csv"
    write_ranked_csv(results, ranked_path)
    best = results[0]
    widths_path = out_dir / "best_widths.txt"
    widths_path.write_text(",".join(str(width) for width in best.config) + "\n")

    _write_manifest(
        out_dir / "manifest.json",
        command="search",
        config={
            "space": run.desc.name,
            "evolution": dataclasses.asdict(evo),
            "recipe": _recipe_dict(run.recipe),
        },
        inputs={
            "config": args.config,
            "checkpoint": checkpoint_path,
            "prior": prior_path,
            **({"records": args.records} if args.records else {}),
        },
        outputs={"ranked": ranked_path, "log": out_dir / "search_log.jsonl", "widths": widths_path},
        seed=evo.seed,
        started=started,
        details={
            "evaluated": len(results),
            "best_widths": list(best.config),
            "best_proxy_accuracy": best.proxy_accuracy,
            "best_flops": best.flops,
        },
    )
    print(
        f"searched {len(results)} candidates; best {tuple(best.config)} "
        f"proxy top-1 {best.proxy_accuracy:.4f} at {best.flops} FLOPs"
    )
    return 0


def cmd_retrain(args: argparse.Namespace) -> int:
    started = time.monotonic()
    run = load_run_config(args.config)
    desc = resolve_description(args.space) if args.space else run.desc
    config = parse_widths(args.widths, desc)
    recipe = run.recipe
    if args.seed is not None:
        recipe = dataclasses.replace(recipe, seed=args.seed)
    data = _load_dataset(recipe)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    _, accuracy = retrain_subnet(desc, config, recipe, data)
    space = desc.space
    results_path = out_dir / "results.csv"
    write_results_table(
        [
            {
                "config_id": 0,
                "widths": ",".join(str(width) for width in config),
                "flops": space.flops(config),
                "params": space.params(config),
                "retrained_acc": f"{accuracy:.6f}",
            }
        ],
        results_path,
    )

    _write_manifest(
        out_dir / "manifest.json",
        command="retrain",
        config={"space": desc.name, "recipe": _recipe_dict(recipe), "widths": list(config)},
        inputs={"config": args.config},
        outputs={"results": results_path},
        seed=recipe.seed,
        started=started,
        details={
            "retrained_acc": accuracy,
            "flops": space.flops(config),
            "params": space.params(config),
        },
    )
    print(f"retrained {tuple(config)}: top-1 {accuracy:.4f}")
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    started = time.monotonic()
    desc = resolve_description(args.space)
    space = desc.space
    config = parse_widths(args.widths, desc) if args.widths else space.largest_config()
    report = {
        "space": desc.name,
        "widths": list(config),
        "flops": space.flops(config),
        "params": space.params(config),
        "largest_flops": space.flops(space.largest_config()),
        "convention": FLOPS_HELP,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text)
        _write_manifest(
            out_path.with_name(out_path.stem + ".manifest.json"),
            command="flops",
            config={"space": desc.name, "widths": list(config)},
            inputs={"space": args.space},
            outputs={"report": out_path},
            seed=None,
            started=started,
            details={"flops": report["flops"], "params": report["params"]},
        )
    return 0


def _read_results_rows(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise UsageError(f"{path}: no result rows")
    if "widths" not in rows[0]:
        raise UsageError(f"{path}: missing 'widths' column")
    return rows


def cmd_export_widths(args: argparse.Namespace) -> int:
    started = time.monotonic()
    results_path = _require_file(args.results, "results file")
    desc = resolve_description(args.space)
    space = desc.space
    rows = _read_results_rows(results_path)[: args.top]

    # One keep-ratio row per (config, layer): the per-layer profile view.
    table: list[dict] = []
    profiles: list[tuple[str, list[float]]] = []
    for index, row in enumerate(rows):
        config = parse_widths(row["widths"], desc)
        label = row.get("rank") or row.get("config_id") or str(index)
        ratios = []
        for position, layer in enumerate(space.layers):
            ratio = config[position] / layer.max_out_channels
            ratios.append(ratio)
            table.append(
                {
                    "config_id": label,
                    "layer": layer.name,
                    "max_channels": layer.max_out_channels,
                    "width": config[position],
                    "keep_ratio": f"{ratio:.6f}",
                }
            )
        profiles.append((label, ratios))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path if args.format == "csv" else out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as handle:
        writer = csv.DictWriter(
            handle, fieldnames=["config_id", "layer", "max_channels", "width", "keep_ratio"]
        )
        writer.writeheader()
        writer.writerows(table)

    outputs = {"table": csv_path}
    if args.format == "chart":
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axis = plt.subplots(figsize=(max(6, len(space.layers) * 0.45), 4))
        positions = range(len(space.layers))
        for label, ratios in profiles:
            axis.plot(positions, ratios, marker="o", label=f"config {label}")
        axis.set_xticks(list(positions))
        axis.set_xticklabels([layer.name for layer in space.layers], rotation=60, ha="right")
        axis.set_ylabel("ratio of maintained channels")
        axis.set_ylim(0.0, 1.05)
        axis.grid(True, alpha=0.3)
        if len(profiles) > 1:
            axis.legend()
        fig.tight_layout()
        fig.savefig(out_path, metadata={"Software": "slimsearch"})
        plt.close(fig)
        outputs["chart"] = out_path

    _write_manifest(
        out_path.with_name(out_path.stem + ".manifest.json"),
        command="export-widths",
        config={"space": desc.name, "format": args.format, "top": args.top},
        inputs={"results": results_path},
        outputs=outputs,
        seed=None,
        started=started,
        details={"configs": len(profiles), "layers": len(space.layers)},
    )
    print(f"exported {len(profiles)} width profile(s) to {out_path}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimsearch",
        description="One-shot channel pruning: supernet training, prior-guided "
        "sampling, and FLOPs-constrained evolutionary width search. " + FLOPS_HELP,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train-supernet", help="constraint-free supernet pre-training")
    train.add_argument("--config", required=True, help="run config file (sections space/recipe/search/paths)")
    train.add_argument("--out", required=True, help="output directory for checkpoints and records")
    train.add_argument("--seed", type=int, default=None, help="override recipe seed")
    train.set_defaults(func=cmd_train_supernet)

    prior = sub.add_parser("build-prior", help="fit the width prior from training loss records")
    prior.add_argument("--records", required=True, help="loss-record file from train-supernet")
    prior.add_argument("--space", required=True, help="bundled preset name or description file")
    prior.add_argument(
        "--weighting",
        default="inverse-proxy",
        choices=("inverse-proxy", "literal-proxy", "frequency"),
        help="how records vote for their widths",
    )
    prior.add_argument("--bucket-width", type=int, default=None, help="FLOPs bucket width (MACs)")
    prior.add_argument("--out", required=True, help="distribution output file")
    prior.set_defaults(func=cmd_build_prior)

    searchp = sub.add_parser("search", help="FLOPs-constrained evolutionary width search")
    searchp.add_argument("--config", required=True, help="run config file")
    searchp.add_argument("--checkpoint", required=True, help="supernet checkpoint")
    searchp.add_argument("--prior", required=True, help="prior distribution file")
    searchp.add_argument("--records", default=None, help="loss records to seed the population")
    searchp.add_argument(
        "--flops",
        type=float,
        default=None,
        help="target budget: fraction of the largest config when < 1, else MACs. " + FLOPS_HELP,
    )
    searchp.add_argument(
        "--tolerance",
        type=float,
        default=None,
        help="allowed |flops - target|: fraction of the target when < 1, else MACs",
    )
    searchp.add_argument("--generations", type=int, default=None)
    searchp.add_argument("--population", type=int, default=None)
    searchp.add_argument("--parents", type=int, default=None)
    searchp.add_argument("--mutation-prob", type=float, default=None)
    searchp.add_argument("--seed", type=int, default=None)
    searchp.add_argument("--out", required=True, help="output directory")
    searchp.set_defaults(func=cmd_search)

    retrain = sub.add_parser("retrain", help="train a searched subnet from scratch")
    retrain.add_argument("--config", required=True, help="run config file")
    retrain.add_argument("--space", default=None, help="override the config's space")
    retrain.add_argument("--widths", required=True, help="comma-separated output widths")
    retrain.add_argument("--seed", type=int, default=None, help="override recipe seed")
    retrain.add_argument("--out", required=True, help="output directory")
    retrain.set_defaults(func=cmd_retrain)

    flopsp = sub.add_parser("flops", help="cost report for a width config. " + FLOPS_HELP)
    flopsp.add_argument("--space", required=True, help="bundled preset name or description file")
    flopsp.add_argument("--widths", default=None, help="comma-separated widths (default: largest)")
    flopsp.add_argument("--out", default=None, help="also write the report to this file")
    flopsp.set_defaults(func=cmd_flops)

    export = sub.add_parser(
        "export-widths", help="per-layer keep-ratio table or chart from a results file"
    )
    export.add_argument("--results", required=True, help="ranked.csv or results.csv")
    export.add_argument("--space", required=True, help="bundled preset name or description file")
    export.add_argument("--format", required=True, choices=("csv", "chart"))
    export.add_argument("--top", type=int, default=1, help="number of leading rows to export")
    export.add_argument("--out", required=True, help="output file (.csv or image path)")
    export.set_defaults(func=cmd_export_widths)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    except (SlimsearchError, OSError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
