"""Release acceptance gates.

Each test here guards one numbered release criterion end to end, at the
tolerances we commit to in the README. Every check prints a single verdict
line, and conftest echoes all of them together in the terminal summary, so
one glance at the run shows which commitments hold.

The last three criteria share one real (if desk-sized) training run: a
supernet trained for 30 epochs on a synthetic motif-classification set that
is deliberately tuned so network capacity matters.
"""

import copy
import itertools
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import conftest
from slimsearch import (
    DatasetSpec,
    EvoConfig,
    LayerSpec,
    LossRecord,
    PriorDistribution,
    SamplingExhausted,
    SearchSpace,
    WidthConfig,
    build_dataset,
    build_distribution,
    build_supernet,
    default_bucket_width,
    desk_recipe,
    iter_records,
    load_description,
    load_preset,
    parallel_forward,
    recalibrate_bn,
    retrain_subnet,
    sample_conditioned,
    sample_partition,
    search,
    serial_forward_oracle,
    serial_reference_step,
    supernet_train_step,
    train_supernet,
    uniform_width_config,
)
from slimsearch.training import subnet_top1
from netgen import random_description, randomize_norm_state, simple_conv_net

# Dataset for the training-based criteria: small enough that a 30-epoch
# supernet run takes ~20s on one CPU core, with the motif amplitude pushed
# high enough above the noise floor that wider subnets measurably win.
DESK_DATA = dict(
    kind="motifs",
    num_classes=10,
    image_size=16,
    train_size=2048,
    val_size=1024,
    calib_size=512,
    seed=11,
    signal_scale=4.0,
    noise_std=0.75,
)


def verdict(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[criterion {number:02d}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    print(line)
    conftest.CRITERION_LINES.append(line)
    assert passed, line


def frozen_handle(desc, seed):
    handle = build_supernet(desc, seed=seed)
    randomize_norm_state(handle.model, np.random.default_rng(seed))
    handle.set_bn_mode("frozen")
    return handle


def enumerate_configs(space):
    class_choices = [space.allowed_choices(members[0]) for members in space.coupling_classes]
    for combo in itertools.product(*class_choices):
        widths = [0] * len(space)
        for members, choice in zip(space.coupling_classes, combo):
            for member in members:
                widths[member] = choice
        yield WidthConfig(tuple(widths))


def kendall_tau(xs, ys):
    """Tau-b: tie-corrected, so saturated accuracies cannot fake a ranking."""
    n = len(xs)
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            if dx == 0 and dy == 0:
                ties_x += 1
                ties_y += 1
            elif dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif (dx > 0) == (dy > 0):
                concordant += 1
            else:
                discordant += 1
    pairs = n * (n - 1) // 2
    denom = math.sqrt((pairs - ties_x) * (pairs - ties_y))
    return (concordant - discordant) / denom if denom else 0.0


@pytest.fixture(scope="module")
def desk_run(desk, tmp_path_factory):
    """One shared 30-epoch supernet training run on the motif set.

    Also snapshots the full-network batch statistics right after a largest-
    config recalibration: the stale-statistics arm of criterion 11 needs them
    untouched, and later recalibrations overwrite the live buffers.
    """
    data = build_dataset(DatasetSpec(**DESK_DATA))
    recipe = desk_recipe()
    out_dir = tmp_path_factory.mktemp("desk_run")
    handle, records_path = train_supernet(desk, recipe, data, out_dir)
    records = list(iter_records(records_path))
    recalibrate_bn(
        handle, handle.space.largest_config(), data.calib.batch_list(recipe.batch_size)
    )
    full_net_stats = {
        name: buffer.clone()
        for name, buffer in handle.model.named_buffers()
        if "running" in name
    }
    return SimpleNamespace(
        handle=handle,
        records=records,
        data=data,
        recipe=recipe,
        full_net_stats=full_net_stats,
    )


def test_criterion_01_masked_parallel_matches_serial():
    started = time.monotonic()
    tolerances = {torch.float32: 1e-5, torch.float64: 1e-12}
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    cases = 0
    for net_index in range(25):
        rng = np.random.default_rng(1000 + net_index)
        desc = random_description(rng)
        taps = tuple(name for name, idx in desc.compute_index.items() if idx is not None)
        for dtype in (torch.float32, torch.float64):
            handle = frozen_handle(desc, net_index)
            handle.model.to(dtype)
            for _ in range(4):
                n_parts = int(rng.choice([2, 4]))
                batch = n_parts * int(rng.choice([1, 2]))
                partition = sample_partition(handle.space, n_parts, batch, rng, "all-random")
                gen = torch.Generator().manual_seed(cases)
                x = torch.randn(batch, 3, 8, 8, dtype=dtype, generator=gen)
                logits, collected = parallel_forward(handle, x, partition, collect=taps)
                for part, (part_logits, _) in enumerate(serial_forward_oracle(handle, x, partition)):
                    delta = (logits[partition.rows(part)] - part_logits).abs().max().item()
                    worst[dtype] = max(worst[dtype], delta)
                for node, feature in collected.items():
                    layer_index = desc.compute_index[node]
                    for part in range(partition.n_parts):
                        active = partition.part_configs[part][layer_index]
                        tail = feature[partition.rows(part), active:]
                        assert tail.abs().sum().item() == 0.0, (node, part)
                cases += 1
    elapsed = time.monotonic() - started
    passed = (
        cases >= 200
        and worst[torch.float32] <= tolerances[torch.float32]
        and worst[torch.float64] <= tolerances[torch.float64]
        and elapsed <= 120
    )
    verdict(
        1,
        "masked-parallel equivalence",
        passed,
        f"{cases} cases, worst fp32 {worst[torch.float32]:.2e} (<=1e-5), "
        f"worst fp64 {worst[torch.float64]:.2e} (<=1e-12), masked tails exactly 0, "
        f"{elapsed:.1f}s",
    )


def test_criterion_02_gradients_match_finite_differences():
    started = time.monotonic()
    worst = 0.0
    checked = 0
    for seed in range(20):
        desc = simple_conv_net(channels=(8,), num_classes=3)
        handle = build_supernet(desc, seed=seed)
        handle.model.double()
        rng = np.random.default_rng(seed)
        batch = 8
        partition = sample_partition(handle.space, 2, batch, rng, "all-random")
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(batch, 3, 8, 8, dtype=torch.float64, generator=gen)
        y = torch.randint(0, 3, (batch,), generator=gen)

        def total_loss():
            logits, _ = parallel_forward(handle, x, partition)
            loss = logits.new_zeros(())
            for part in range(partition.n_parts):
                rows = partition.rows(part)
                loss = loss + F.cross_entropy(logits[rows], y[rows])
            return loss

        handle.model.zero_grad(set_to_none=True)
        total_loss().backward()
        model = handle.model
        for param in (model.ops["c0"].weight, model.norms["c0"].weight, model.ops["fc"].weight):
            flat = param.detach().reshape(-1)
            grad = param.grad.reshape(-1)
            for _ in range(3):
                at = int(rng.integers(flat.numel()))
                step = 1e-6 * max(1.0, abs(flat[at].item()))
                with torch.no_grad():
                    original = flat[at].item()
                    flat[at] = original + step
                    up = total_loss().item()
                    flat[at] = original - step
                    down = total_loss().item()
                    flat[at] = original
                numeric = (up - down) / (2 * step)
                analytic = grad[at].item()
                if abs(numeric) < 1e-12 and abs(analytic) < 1e-12:
                    continue
                worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic)))
                checked += 1
    elapsed = time.monotonic() - started
    passed = worst <= 1e-3 and checked >= 100 and elapsed <= 60
    verdict(
        2,
        "gradient correctness",
        passed,
        f"{checked} coordinates over 20 seeds, worst relative error {worst:.2e} (<=1e-3), "
        f"{elapsed:.1f}s",
    )


def test_criterion_03_preset_cost_accounting():
    published = {
        "resnet50": (4.1e9, 25.5e6),
        "mobilenet_v2": (300e6, 3.5e6),
    }
    details = []
    passed = True
    for name, (flops_target, params_target) in published.items():
        space = load_preset(name).space
        largest = space.largest_config()
        flops_err = abs(space.flops(largest) - flops_target) / flops_target
        params_err = abs(space.params(largest) - params_target) / params_target
        passed = passed and flops_err <= 0.02 and params_err <= 0.02
        details.append(f"{name} MACs off {flops_err:.2%}, params off {params_err:.2%}")
    verdict(3, "preset cost accounting", passed, "; ".join(details) + " (both <=2%)")


def test_criterion_04_space_size_accounting(desk):
    layers = tuple(
        LayerSpec(
            name=f"l{i}",
            kind="standard-conv",
            max_out_channels=20,
            kernel=(3, 3),
            out_size=(8, 8),
            coupling_group=None,
            group_count=20,
        )
        for i in range(50)
    )
    wide = SearchSpace(
        layers=layers,
        input_sources=tuple([None] + list(range(49))),
        input_channels=3,
        min_keep_ratio=0.0,
    )
    exact = wide.size() == 20**50
    desk_space = desk.space
    enumerated = sum(1 for _ in enumerate_configs(desk_space))
    agrees = enumerated == desk_space.size()
    verdict(
        4,
        "space size accounting",
        exact and agrees,
        f"50-layer 20-choice size == 20**50 exactly; "
        f"enumeration of {enumerated} configs matches size() on the desk space",
    )


def test_criterion_05_prior_weightings():
    space = SearchSpace(
        layers=(
            LayerSpec(
                name="l0",
                kind="standard-conv",
                max_out_channels=32,
                kernel=(3, 3),
                out_size=(8, 8),
                coupling_group=None,
                group_count=2,
            ),
        ),
        input_sources=(None,),
        input_channels=3,
        min_keep_ratio=0.0,
    )
    wide_cfg = WidthConfig((32,))
    narrow_cfg = WidthConfig((16,))
    records = [
        LossRecord(iteration=0, part=0, widths=wide_cfg, loss=3.0,
                   flops=space.flops(wide_cfg), is_largest=True),
        LossRecord(iteration=0, part=1, widths=narrow_cfg, loss=1.0,
                   flops=space.flops(narrow_cfg), is_largest=False),
        LossRecord(iteration=0, part=2, widths=narrow_cfg, loss=1.0,
                   flops=space.flops(narrow_cfg), is_largest=False),
    ]
    # Single iteration, so every proxy equals its raw loss: p(32)=3, p(16)=1.
    expected = {
        "frequency": {16: 2 / 3, 32: 1 / 3},
        "inverse-proxy": {16: 6 / 7, 32: 1 / 7},
        "literal-proxy": {16: 0.4, 32: 0.6},
    }
    one_bucket = 2 * space.flops(wide_cfg)
    worst = 0.0
    passed = True
    for weighting, cell_expected in expected.items():
        dist = build_distribution(records, space, bucket_width=one_bucket, weighting=weighting)
        if len(dist.buckets) != 1:
            passed = False
            continue
        cell = next(iter(dist.buckets.values()))[0]
        for choice, probability in cell_expected.items():
            worst = max(worst, abs(cell[choice] - probability))
        passed = passed and abs(sum(cell.values()) - 1.0) <= 1e-9
    passed = passed and worst <= 1e-12
    verdict(
        5,
        "prior weightings",
        passed,
        f"three-record fixture exact for frequency, inverse-proxy and literal-proxy "
        f"(worst deviation {worst:.1e} <=1e-12), cells normalized to 1e-9",
    )


def test_criterion_06_conditioned_sampling_efficiency():
    started = time.monotonic()
    layers = tuple(
        LayerSpec(
            name=f"l{i}",
            kind="standard-conv",
            max_out_channels=64,
            kernel=(3, 3),
            out_size=(8, 8),
            coupling_group=None,
            group_count=8,
        )
        for i in range(50)
    )
    space = SearchSpace(
        layers=layers,
        input_sources=tuple([None] + list(range(49))),
        input_channels=3,
        min_keep_ratio=0.0,
    )
    rng = np.random.default_rng(0)
    largest = space.largest_config()
    max_flops = space.flops(largest)
    min_flops = space.flops(space.smallest_config())

    # Synthetic training log with a long-tailed width mix: per record one
    # shared sharpness s ~ U(0,1) drives every layer's width via Binomial(7, s),
    # so the log covers thin, thick and mixed configs across the FLOPs range.
    records = []
    for sharpness in rng.uniform(0.0, 1.0, 20000):
        widths = WidthConfig(
            tuple(int(8 * (k + 1)) for k in rng.binomial(7, sharpness, size=50))
        )
        flops = space.flops(widths)
        records.append(
            LossRecord(
                iteration=0,
                part=1,
                widths=widths,
                loss=3.0 - 2.0 * (flops / max_flops) + float(rng.uniform(0.0, 0.05)),
                flops=flops,
                is_largest=False,
            )
        )
    records.append(
        LossRecord(
            iteration=0, part=0, widths=largest, loss=1.0, flops=max_flops, is_largest=True
        )
    )
    learned = build_distribution(records, space)
    uniform = PriorDistribution.uniform(space, learned.bucket_width)

    tolerance = max_flops // 50
    targets = rng.integers(min_flops, max_flops, 1000)

    def mean_trials(dist, seed):
        draw_rng = np.random.default_rng(seed)
        total = 0
        for target in targets:
            try:
                _, trials = sample_conditioned(
                    dist, space, int(target), tolerance, draw_rng, max_trials=1000
                )
            except SamplingExhausted:
                trials = 1000
            total += trials
        return total / len(targets)

    learned_mean = mean_trials(learned, 1)
    uniform_mean = mean_trials(uniform, 2)
    elapsed = time.monotonic() - started
    passed = learned_mean <= 0.5 * uniform_mean and elapsed <= 300
    verdict(
        6,
        "conditioned sampling efficiency",
        passed,
        f"mean trials over 1000 targets: learned prior {learned_mean:.1f} vs uniform "
        f"{uniform_mean:.1f} (ratio {learned_mean / uniform_mean:.3f} <=0.5), {elapsed:.1f}s",
    )


def test_criterion_07_search_finds_brute_force_optimum(desk):
    raw = copy.deepcopy(desk.raw)
    raw["min_keep_ratio"] = 0.5
    handle = build_supernet(load_description(raw), seed=0)
    space = handle.space
    configs = list(enumerate_configs(space))
    assert len(configs) == space.size() <= 4096

    largest = space.largest_config()
    largest_flops = space.flops(largest)
    prior = PriorDistribution.uniform(space, default_bucket_width(space))
    wins = 0
    for seed in range(10):
        coeff = np.random.default_rng(1000 + seed).uniform(0.0, 1.0, len(space))
        denominator = float(np.dot(coeff, largest.widths))

        def fitness(config, coeff=coeff, denominator=denominator):
            return float(np.dot(coeff, config.widths)) / denominator

        best_true = max(configs, key=fitness)
        evo = EvoConfig(target_flops=largest_flops // 2, tolerance=largest_flops, seed=seed)
        found = search(handle, prior, [], evo, evaluate_fn=fitness)[0].config
        wins += found == best_true
    verdict(
        7,
        "evolutionary search optimality",
        wins == 10,
        f"recovered the enumerated optimum of a {space.size()}-config space "
        f"under injected fitness on {wins}/10 seeds (need 10/10)",
    )


def test_criterion_08_parallel_step_throughput(desk):
    batch = 128
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(batch, 3, 32, 32, generator=gen)
    y = torch.randint(0, 10, (batch,), generator=gen)

    def timed_arm(step):
        for _ in range(10):
            step()
        started = time.perf_counter()
        for _ in range(100):
            step()
        return (time.perf_counter() - started) / 100

    # Both arms draw partitions from identically seeded generators, so they
    # train the exact same subnet mix in the same order.
    parallel_handle = build_supernet(desk, seed=0)
    parallel_opt = torch.optim.SGD(parallel_handle.model.parameters(), lr=0.05, momentum=0.9)
    parallel_rng = np.random.default_rng(3)
    parallel_seconds = timed_arm(
        lambda: supernet_train_step(parallel_handle, parallel_opt, x, y, parallel_rng)
    )

    serial_handle = build_supernet(desk, seed=0)
    serial_opt = torch.optim.SGD(serial_handle.model.parameters(), lr=0.05, momentum=0.9)
    serial_rng = np.random.default_rng(3)

    def serial_step():
        partition = sample_partition(serial_handle.space, 4, batch, serial_rng)
        serial_reference_step(serial_handle, serial_opt, x, y, partition.part_configs)

    serial_seconds = timed_arm(serial_step)

    ratio = parallel_seconds / serial_seconds
    verdict(
        8,
        "parallel step throughput",
        ratio <= 0.55,
        f"100 warm iterations each: parallel {parallel_seconds * 1e3:.1f} ms/step vs "
        f"serial {serial_seconds * 1e3:.1f} ms/step, ratio {ratio:.3f} (<=0.55)",
    )


def test_desk_training_loss_halves(desk_run):
    anchors = [record.loss for record in desk_run.records if record.part == 0]
    per_epoch = len(anchors) // desk_run.recipe.epochs
    first = float(np.mean(anchors[:per_epoch]))
    last = float(np.mean(anchors[-per_epoch:]))
    assert last <= 0.5 * first, (first, last)


def test_criterion_09_proxy_ranking_fidelity(desk_run):
    handle = desk_run.handle
    space = handle.space
    largest_flops = space.flops(space.largest_config())
    prior = build_distribution(desk_run.records, space)

    configs = [space.smallest_config(), space.largest_config()]
    seen = set(configs)
    rng = np.random.default_rng(5)
    for fraction in (0.35, 0.45, 0.55, 0.65, 0.75, 0.85):
        target = int(fraction * largest_flops)
        config, _ = sample_conditioned(
            prior, space, target, largest_flops // 20, rng
        )
        redraws = 0
        while config in seen and redraws < 50:
            config, _ = sample_conditioned(prior, space, target, largest_flops // 20, rng)
            redraws += 1
        seen.add(config)
        configs.append(config)

    batch = desk_run.recipe.batch_size
    proxies = [subnet_top1(handle, config, desk_run.data, batch) for config in configs]
    retrained = [
        retrain_subnet(load_preset("desk8"), config, desk_run.recipe, desk_run.data)[1]
        for config in configs
    ]
    tau = kendall_tau(proxies, retrained)
    pairs = ", ".join(f"{p:.3f}/{r:.3f}" for p, r in zip(proxies, retrained))
    verdict(
        9,
        "proxy ranking fidelity",
        tau > 0.0,
        f"Kendall tau {tau:.3f} (>0) over 8 subnets spanning the FLOPs range "
        f"(proxy/retrained: {pairs})",
    )


def test_criterion_10_searched_beats_uniform(desk_run):
    handle = desk_run.handle
    space = handle.space
    largest_flops = space.flops(space.largest_config())
    uniform = uniform_width_config(space, largest_flops // 2)
    target = space.flops(uniform)

    prior = build_distribution(desk_run.records, space)
    batch = desk_run.recipe.batch_size
    evo = EvoConfig(
        target_flops=target,
        tolerance=max(1, target // 50),
        population_size=16,
        parent_count=8,
        generations=6,
        seed=0,
    )
    searched = search(
        handle,
        prior,
        desk_run.records,
        evo,
        validation_batches=desk_run.data.val.batch_list(batch),
        calibration_batches=desk_run.data.calib.batch_list(batch),
    )[0].config

    desc = load_preset("desk8")
    _, searched_acc = retrain_subnet(desc, searched, desk_run.recipe, desk_run.data)
    _, uniform_acc = retrain_subnet(desc, uniform, desk_run.recipe, desk_run.data)
    margin = searched_acc - uniform_acc
    verdict(
        10,
        "searched beats uniform",
        margin >= -0.003,
        f"at ~50% FLOPs with one shared recipe: searched {searched_acc:.4f} vs uniform "
        f"{uniform_acc:.4f}, margin {margin:+.4f} (>=-0.003); searched widths "
        f"{searched.widths}, uniform widths {uniform.widths}",
    )


def test_criterion_11_recalibration_beats_stale_stats(desk_run):
    handle = desk_run.handle
    data = desk_run.data
    batch = desk_run.recipe.batch_size

    def stale_top1(config):
        # Full-network statistics, captured right after training: restore
        # them because every recalibrated evaluation overwrites the buffers.
        with torch.no_grad():
            for name, buffer in handle.model.named_buffers():
                if "running" in name:
                    buffer.copy_(desk_run.full_net_stats[name])
        previous = handle.bn_mode
        handle.set_bn_mode("frozen")
        correct = 0
        with torch.no_grad():
            for x, y in data.val.batch_list(batch):
                logits, _ = handle.model.sliced_forward(x, config, "frozen")
                correct += int((logits.argmax(1) == y).sum())
        handle.set_bn_mode(previous)
        return correct / len(data.val)

    rng = np.random.default_rng(31)
    wins = 0
    pairs = []
    for _ in range(10):
        config = handle.space.sample_uniform(rng)
        stale = stale_top1(config)
        recalibrated = subnet_top1(handle, config, data, batch)
        wins += recalibrated >= stale
        pairs.append(f"{stale:.3f}->{recalibrated:.3f}")
    verdict(
        11,
        "recalibration benefit",
        wins >= 9,
        f"recalibrated >= stale full-network statistics on {wins}/10 random subnets "
        f"(need >=9): {', '.join(pairs)}",
    )
