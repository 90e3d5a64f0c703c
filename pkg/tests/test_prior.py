import json

import numpy as np
import pytest

from slimsearch import (
    LayerSpec,
    LossRecord,
    NormalizationError,
    PriorDistribution,
    ProxyLossTable,
    RecordError,
    SamplingExhausted,
    SearchSpace,
    WidthConfig,
    build_distribution,
    default_bucket_width,
    proxy_loss,
    sample_conditioned,
    top_records,
)
from netgen import synthetic_records

WEIGHTINGS = ("inverse-proxy", "literal-proxy", "frequency")


def one_layer_space(channels=32, group_count=2, min_keep_ratio=0.5):
    layer = LayerSpec(
        name="l0",
        kind="standard-conv",
        max_out_channels=channels,
        kernel=(3, 3),
        out_size=(8, 8),
        coupling_group=None,
        group_count=group_count,
    )
    return SearchSpace(
        layers=(layer,),
        input_sources=(None,),
        input_channels=3,
        min_keep_ratio=min_keep_ratio,
    )


def rec(widths, loss, flops, iteration=0, part=0, largest=False):
    return LossRecord(
        iteration=iteration,
        part=part,
        widths=WidthConfig(tuple(widths)),
        loss=loss,
        flops=flops,
        is_largest=largest,
    )


class TestProxyLoss:
    def test_direct_substitution(self):
        record = rec((16,), 3.0, 100)
        assert proxy_loss(record, largest_loss_at_t=2.0, final_largest_loss=1.0) == 6.0

    def test_equal_trajectory_point_keeps_raw(self):
        record = rec((16,), 1.7, 100)
        assert proxy_loss(record, 1.5, 1.5) == 1.7

    def test_nonpositive_final_rejected(self):
        record = rec((16,), 1.0, 100)
        with pytest.raises(NormalizationError):
            proxy_loss(record, 1.0, 0.0)
        with pytest.raises(NormalizationError):
            proxy_loss(record, 1.0, -2.0)


class TestProxyLossTable:
    def test_trajectory_and_scaling(self):
        records = [
            rec((32,), 4.0, 200, iteration=0, largest=True),
            rec((16,), 1.0, 100, iteration=0, part=1),
            rec((32,), 2.0, 200, iteration=1, largest=True),
            rec((16,), 1.0, 100, iteration=1, part=1),
        ]
        table = ProxyLossTable.from_records(records)
        assert table.final_largest_loss == 2.0
        assert table.largest_loss_by_iter == {0: 4.0, 1: 2.0}
        # Early record is inflated by the 4.0/2.0 trajectory ratio.
        assert table.proxy_for(records[1]) == 2.0
        assert table.proxy_for(records[3]) == 1.0

    def test_final_iteration_largest_is_raw(self):
        records = [
            rec((32,), 3.0, 200, iteration=0, largest=True),
            rec((32,), 1.25, 200, iteration=7, largest=True),
        ]
        table = ProxyLossTable.from_records(records)
        assert table.proxy_for(records[1]) == 1.25

    def test_no_largest_anchor_rejected(self):
        with pytest.raises(NormalizationError):
            ProxyLossTable.from_records([rec((16,), 1.0, 100)])

    def test_unknown_iteration_rejected(self):
        table = ProxyLossTable.from_records([rec((32,), 1.0, 200, largest=True)])
        with pytest.raises(NormalizationError, match="iteration 5"):
            table.proxy_for(rec((16,), 1.0, 100, iteration=5))


class TestBuildDistribution:
    def probs(self, dist, space, flops=100):
        values, fallback = dist.layer_categorical(dist.bucket_of(flops), 0, space)
        assert not fallback
        return values

    def test_equal_proxies_are_symmetric(self):
        space = one_layer_space()
        records = [
            rec((32,), 2.0, 100, largest=True),
            rec((16,), 2.0, 100, part=1),
        ]
        for weighting in WEIGHTINGS:
            dist = build_distribution(records, space, bucket_width=1000, weighting=weighting)
            assert self.probs(dist, space) == pytest.approx([0.5, 0.5])

    def test_inverse_and_literal_transforms(self):
        # Single iteration, so each proxy equals its raw loss: p(16)=1, p(32)=3.
        space = one_layer_space()
        records = [
            rec((32,), 3.0, 100, largest=True),
            rec((16,), 1.0, 100, part=1),
        ]
        inverse = build_distribution(records, space, bucket_width=1000, weighting="inverse-proxy")
        assert self.probs(inverse, space) == pytest.approx([0.75, 0.25])
        literal = build_distribution(records, space, bucket_width=1000, weighting="literal-proxy")
        assert self.probs(literal, space) == pytest.approx([0.25, 0.75])

    def test_frequency_reproduces_hand_counts(self):
        space = one_layer_space()
        records = [
            rec((16,), 0.5, 100, part=0),
            rec((16,), 9.0, 100, part=1),
            rec((32,), 0.1, 100, part=2),
        ]
        dist = build_distribution(records, space, bucket_width=1000, weighting="frequency")
        assert self.probs(dist, space) == pytest.approx([2 / 3, 1 / 3])

    def test_single_record_concentrates_then_falls_back(self):
        space = one_layer_space()
        dist = build_distribution(
            [rec((32,), 2.0, 105, largest=True)], space, bucket_width=10
        )
        probs, fallback = dist.layer_categorical(10, 0, space)
        assert not fallback
        assert probs == pytest.approx([0.0, 1.0])
        probs, fallback = dist.layer_categorical(55, 0, space)
        assert fallback
        assert probs == pytest.approx([0.5, 0.5])

    def test_gap_buckets_are_flagged(self, desk):
        space = desk.space
        rng = np.random.default_rng(0)
        records = synthetic_records(space, rng, iterations=5)
        smallest = space.smallest_config()
        records.append(
            rec(tuple(smallest), 1.0, space.flops(smallest), iteration=0, part=3)
        )
        dist = build_distribution(records, space, bucket_width=default_bucket_width(space))
        occupied = set(dist.buckets)
        missing = set(range(min(occupied), max(occupied) + 1)) - occupied
        assert missing, "fixture should leave a hole between smallest and the bulk"
        flagged_buckets = {bucket for bucket, _ in dist.fallback_flags}
        assert flagged_buckets == missing
        for bucket in missing:
            for layer in range(len(space)):
                assert (bucket, layer) in dist.fallback_flags

    def test_cells_normalized(self, desk):
        space = desk.space
        records = synthetic_records(space, np.random.default_rng(3), iterations=50)
        for weighting in WEIGHTINGS:
            dist = build_distribution(records, space, weighting=weighting)
            for bucket, cells in dist.buckets.items():
                for layer, cell in enumerate(cells):
                    if not cell:
                        continue
                    assert sum(cell.values()) == pytest.approx(1.0, abs=1e-9)
                    assert all(weight >= 0 for weight in cell.values())
                    probs, _ = dist.layer_categorical(bucket, layer, space)
                    assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_loss_scale_invariance(self, desk):
        space = desk.space
        base = synthetic_records(space, np.random.default_rng(11), iterations=20)
        scaled = [
            rec((r.widths), r.loss * 7.3, r.flops, r.iteration, r.part, r.is_largest)
            for r in base
        ]
        for weighting in ("inverse-proxy", "literal-proxy"):
            a = build_distribution(base, space, weighting=weighting)
            b = build_distribution(scaled, space, weighting=weighting)
            assert set(a.buckets) == set(b.buckets)
            for bucket in a.buckets:
                for cell_a, cell_b in zip(a.buckets[bucket], b.buckets[bucket]):
                    assert set(cell_a) == set(cell_b)
                    for choice in cell_a:
                        assert cell_a[choice] == pytest.approx(cell_b[choice], rel=1e-9)

    def test_invalid_inputs(self, desk):
        space = one_layer_space()
        record = rec((32,), 1.0, 100, largest=True)
        with pytest.raises(RecordError):
            build_distribution([], space)
        with pytest.raises(RecordError):
            build_distribution([record], space, weighting="softmax")
        with pytest.raises(RecordError):
            build_distribution([record], space, bucket_width=0)
        with pytest.raises(RecordError):
            build_distribution([record], desk.space)


class TestSampleConditioned:
    def test_single_config_space_first_trial(self):
        space = one_layer_space(channels=8, group_count=1, min_keep_ratio=1.0)
        assert space.size() == 1
        only = space.largest_config()
        dist = PriorDistribution.uniform(space, bucket_width=1000)
        config, trials = sample_conditioned(
            dist, space, space.flops(only), tolerance=0, rng=np.random.default_rng(0)
        )
        assert config == only
        assert trials == 1

    def test_unbounded_tolerance_accepts_first_draw(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        config, trials = sample_conditioned(
            dist, space, space.flops(space.largest_config()) // 2,
            tolerance=space.flops(space.largest_config()),
            rng=np.random.default_rng(1),
        )
        assert trials == 1
        space.validate_config(config)

    def test_accepted_always_in_tolerance(self, desk):
        space = desk.space
        records = synthetic_records(space, np.random.default_rng(2), iterations=30)
        dist = build_distribution(records, space)
        target = space.flops(space.largest_config()) // 2
        tolerance = space.flops(space.largest_config()) // 20
        rng = np.random.default_rng(5)
        for _ in range(50):
            config, trials = sample_conditioned(dist, space, target, tolerance, rng)
            assert abs(space.flops(config) - target) <= tolerance
            assert trials >= 1

    def test_coupled_layers_drawn_once(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        rng = np.random.default_rng(9)
        target = space.flops(space.largest_config()) // 2
        tolerance = space.flops(space.largest_config()) // 10
        for _ in range(25):
            config, _ = sample_conditioned(dist, space, target, tolerance, rng)
            for members in space.coupling_classes:
                widths = {config[member] for member in members}
                assert len(widths) == 1

    def test_deterministic_given_seed(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        target = space.flops(space.largest_config()) // 2
        tolerance = space.flops(space.largest_config()) // 50
        first = sample_conditioned(dist, space, target, tolerance, np.random.default_rng(4))
        second = sample_conditioned(dist, space, target, tolerance, np.random.default_rng(4))
        assert first == second

    def test_exhaustion_carries_statistics(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        with pytest.raises(SamplingExhausted) as info:
            sample_conditioned(
                dist, space, target_flops=10, tolerance=0,
                rng=np.random.default_rng(0), max_trials=50,
            )
        error = info.value
        assert error.trials == 50
        assert error.target_flops == 10
        assert error.tolerance == 0
        assert error.closest is not None and error.closest > 0

    def test_trial_budget_validated(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        with pytest.raises(RecordError):
            sample_conditioned(dist, space, 100, 10, np.random.default_rng(0), max_trials=0)


class TestTopRecords:
    def space_and_records(self):
        space = one_layer_space(channels=64, group_count=4, min_keep_ratio=0.25)
        assert space.allowed_choices(0) == (16, 32, 48, 64)
        records = [
            rec((64,), 3.0, 300, largest=True),
            rec((16,), 1.0, 100, part=1),
            rec((32,), 2.0, 200, part=2),
        ]
        return space, records, ProxyLossTable.from_records(records)

    def test_inverse_ranks_ascending_proxy(self):
        _, records, table = self.space_and_records()
        picked = top_records(records, table, count=2, target_flops=200, tolerance=1000)
        assert picked == [WidthConfig((16,)), WidthConfig((32,))]

    def test_literal_ranks_descending_proxy(self):
        _, records, table = self.space_and_records()
        picked = top_records(
            records, table, count=2, target_flops=200, tolerance=1000,
            weighting="literal-proxy",
        )
        assert picked == [WidthConfig((64,)), WidthConfig((32,))]

    def test_tolerance_filters(self):
        _, records, table = self.space_and_records()
        assert top_records(records, table, 3, target_flops=200, tolerance=0) == [
            WidthConfig((32,))
        ]
        assert top_records(records, table, 3, target_flops=5000, tolerance=10) == []

    def test_duplicates_keep_best(self):
        _, records, table = self.space_and_records()
        records = records + [rec((32,), 0.5, 200, part=3)]
        picked = top_records(records, table, count=2, target_flops=200, tolerance=1000)
        assert picked == [WidthConfig((32,)), WidthConfig((16,))]

    def test_invalid_inputs(self):
        _, records, table = self.space_and_records()
        with pytest.raises(RecordError):
            top_records(records, table, count=0, target_flops=200, tolerance=10)
        with pytest.raises(RecordError):
            top_records(records, table, 1, 200, 10, weighting="frequency")


class TestSerialization:
    def test_roundtrip(self, desk, tmp_path):
        space = desk.space
        records = synthetic_records(space, np.random.default_rng(6), iterations=15)
        dist = build_distribution(records, space)
        path = tmp_path / "prior.json"
        dist.save(path)
        loaded = PriorDistribution.load(path)
        assert loaded.bucket_width == dist.bucket_width
        assert loaded.weighting == dist.weighting
        assert loaded.num_layers == dist.num_layers
        assert loaded.fallback_flags == dist.fallback_flags
        assert loaded.buckets == dist.buckets

    def test_denormalized_cell_rejected(self, tmp_path):
        space = one_layer_space()
        dist = build_distribution([rec((32,), 1.0, 100, largest=True)], space, bucket_width=10)
        path = tmp_path / "prior.json"
        dist.save(path)
        payload = json.loads(path.read_text())
        bucket = next(iter(payload["buckets"]))
        payload["buckets"][bucket]["0"] = {"16": 0.5, "32": 0.6}
        path.write_text(json.dumps(payload))
        with pytest.raises(RecordError, match="sums to"):
            PriorDistribution.load(path)

    def test_negative_weight_rejected(self, tmp_path):
        space = one_layer_space()
        dist = build_distribution([rec((32,), 1.0, 100, largest=True)], space, bucket_width=10)
        path = tmp_path / "prior.json"
        dist.save(path)
        payload = json.loads(path.read_text())
        bucket = next(iter(payload["buckets"]))
        payload["buckets"][bucket]["0"] = {"16": -0.5, "32": 1.5}
        path.write_text(json.dumps(payload))
        with pytest.raises(RecordError, match="negative"):
            PriorDistribution.load(path)


class TestDefaults:
    def test_bucket_width_is_five_percent_of_largest(self, desk):
        space = desk.space
        assert default_bucket_width(space) == space.flops(space.largest_config()) // 20

    def test_uniform_prior_serves_every_cell_as_fallback(self, desk):
        space = desk.space
        dist = PriorDistribution.uniform(space, default_bucket_width(space))
        for layer in range(len(space)):
            probs, fallback = dist.layer_categorical(3, layer, space)
            assert fallback
            assert probs == pytest.approx(
                [1 / len(space.allowed_choices(layer))] * len(space.allowed_choices(layer))
            )
