"""
Test delle metriche: classificazione degli esiti, regret, AVF e pesi
"""

import numpy as np
import pytest

from eval_metrics import (
    InjectionRecord,
    MetricsError,
    OutcomeClass,
    aggregate_avf,
    classify_outcome,
    max_abs_deviation,
    regret,
    top1,
    weight_stats,
    weight_stats_from_arrays,
)
from model_zoo import ArchConfig, build_resnet


def record(outcome, trial_id=0, golden=0, faulty=0, label=None):
    return InjectionRecord(trial_id, "test", golden, faulty, outcome, 0.0, label)


# ===== ESITI =====

def test_identical_logits_are_masked():
    logits = np.array([2.0, 1.0, -3.5], dtype=np.float32)
    assert classify_outcome(logits, logits.copy()) is OutcomeClass.MASKED


def test_small_change_is_tolerable():
    assert classify_outcome(np.array([2.0, 1.0]), np.array([2.1, 1.0])) is OutcomeClass.TOLERABLE_SDC


def test_argmax_change_is_critical():
    assert classify_outcome(np.array([2.0, 1.0]), np.array([1.0, 2.0])) is OutcomeClass.CRITICAL_SDC


def test_negative_zero_is_not_bit_identical():
    assert classify_outcome(np.array([0.0, -1.0]), np.array([-0.0, -1.0])) is OutcomeClass.TOLERABLE_SDC


def test_ties_resolve_to_lowest_index():
    assert top1(np.array([1.0, 3.0, 3.0])) == 1
    assert classify_outcome(np.array([3.0, 3.0]), np.array([3.0, 3.5])) is OutcomeClass.CRITICAL_SDC


def test_shape_mismatch_rejected():
    with pytest.raises(MetricsError):
        classify_outcome(np.zeros(3), np.zeros(4))


def test_max_abs_deviation_treats_nan_as_infinite():
    assert max_abs_deviation([1.0, 2.0], [1.5, 2.0]) == 0.5
    assert max_abs_deviation([1.0], [np.nan]) == np.inf


# ===== REGRET =====

@pytest.mark.parametrize("clean, noisy, expected", [(90.0, 80.0, 10.0), (75.0, 75.0, 0.0)])
def test_regret(clean, noisy, expected):
    assert regret(clean, noisy) == pytest.approx(expected)


def test_regret_is_antisymmetric():
    assert regret(60.0, 85.0) == -regret(85.0, 60.0)


# ===== AVF =====

def test_all_masked():
    report = aggregate_avf([record(OutcomeClass.MASKED, i) for i in range(10)], "arm")
    assert report.fractions[OutcomeClass.MASKED] == 1.0
    assert report.critical_per_corrupted == 0.0
    assert report.to_row()['configuration'] == "arm"


def test_mixed_fractions():
    outcomes = [OutcomeClass.MASKED] * 3 + [OutcomeClass.TOLERABLE_SDC] * 4 + [OutcomeClass.CRITICAL_SDC] * 3
    report = aggregate_avf([record(o, i) for i, o in enumerate(outcomes)])
    assert report.total == 10
    assert [report.fractions[o] for o in OutcomeClass] == pytest.approx([0.3, 0.4, 0.3])
    assert sum(report.fractions.values()) == pytest.approx(1.0, abs=1e-9)
    assert sum(report.counts.values()) == report.total
    assert report.critical_per_corrupted == pytest.approx(3 / 7)
    row = report.to_row()
    assert row['sdc_fraction'] == pytest.approx(0.7)
    assert row['label_mispredictions'] == -1


def test_label_mispredictions_counted_against_ground_truth():
    records = [
        record(OutcomeClass.MASKED, 0, golden=1, faulty=1, label=1),
        record(OutcomeClass.CRITICAL_SDC, 1, golden=1, faulty=2, label=1),
        record(OutcomeClass.MASKED, 2, golden=0, faulty=0, label=2),
    ]
    assert aggregate_avf(records).label_mispredictions == 2


def test_aggregation_is_order_independent():
    rng = np.random.default_rng(0)
    outcomes = list(OutcomeClass)
    records = [record(outcomes[int(rng.integers(3))], i) for i in range(50)]
    forward = aggregate_avf(records).to_row()
    backward = aggregate_avf(list(reversed(records))).to_row()
    assert forward == backward


def test_empty_records_rejected():
    with pytest.raises(MetricsError):
        aggregate_avf([])


def test_record_row_round_trip_keeps_missing_label():
    original = InjectionRecord(4, "warp(site=1,n=0,start=32)", 2, 0, OutcomeClass.CRITICAL_SDC, 12.5)
    row = original.to_row()
    assert row['label'] == -1
    assert InjectionRecord.from_row(row) == original


# ===== PESI =====

def test_zero_network_weight_stats():
    network = build_resnet(ArchConfig(blocks_per_stage=1, stage_widths=(4, 4, 4), num_classes=2,
                                      input_shape=(3, 8, 8)), 0)
    for weights in network.weight_arrays():
        weights[...] = 0.0
    stats = weight_stats(network)
    assert stats.mean == 0.0
    assert stats.mean_abs == 0.0
    assert stats.histogram.sum() == stats.count
    assert stats.histogram[50] == stats.count


def test_symmetric_weights():
    stats = weight_stats_from_arrays([np.array([-0.5, 0.5])])
    assert stats.mean == 0.0
    assert stats.mean_abs == 0.5
    assert len(stats.histogram) == 101
    assert stats.histogram[0] == 1 and stats.histogram[-1] == 1


def test_histogram_plus_out_of_range_equals_count():
    values = np.random.default_rng(1).standard_normal(1000)
    stats = weight_stats_from_arrays([values[:400].reshape(20, 20), values[400:]])
    assert stats.count == 1000
    assert stats.histogram.sum() + stats.out_of_range == stats.count
    assert stats.out_of_range == int(np.sum(np.abs(values) > 0.5))


def test_weight_stats_excludes_norm_parameters():
    network = build_resnet(ArchConfig(blocks_per_stage=1, stage_widths=(4, 4, 4), num_classes=2,
                                      input_shape=(3, 8, 8)), 0)
    expected = sum(w.size for w in network.weight_arrays())
    assert weight_stats(network).count == expected
    assert expected < network.parameter_count()
