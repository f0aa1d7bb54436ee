"""
Test della configurazione degli esperimenti: profili, override da file,
validazione, stream di seme e bracci di ablazione
"""

import json
from pathlib import Path

import numpy as np
import pytest

from experiment_config import (
    ARMS,
    PROFILES,
    ConfigError,
    config_for_arm,
    eval_descriptor,
    experiment_from_dict,
    load_experiment_config,
    seed_sequences,
    seed_streams,
)
from model_zoo import LayerOrder
from tensor_core import ActivationKind

ROOT = Path(__file__).parent


def test_desk_profile_defaults():
    config = experiment_from_dict({})
    assert config.profile == 'desk'
    assert config.dataset.kind == 'synthetic'
    assert config.arch.input_shape == (3, 16, 16)
    assert config.arch.num_classes == 4
    assert config.arch.stage_widths == (8, 16, 32)
    assert config.arch.depth == 8
    assert config.train.epochs == 30
    assert config.train.batch_size == 32
    assert config.arms == list(ARMS)


def test_profiles_inject_feature_maps_and_calibrate_warp(tmp_path):
    for config in (experiment_from_dict({}),
                   experiment_from_dict({'dataset': {'path': str(tmp_path)}}, profile='paper')):
        assert config.train.injection_sites == 'conv'
        assert config.eval_injection.injection_sites == 'conv'
        assert (config.campaign.alpha, config.campaign.xmin) == (1.5, 10.0)
    override = experiment_from_dict({'train': {'injection_sites': 'all'}, 'campaign': {'alpha': 3.0}})
    assert override.train.injection_sites == 'all'
    assert override.campaign.alpha == 3.0


def test_magnitude_ceiling_defaults_to_epochs():
    assert experiment_from_dict({}).magnitude_ceiling == 30.0
    config = experiment_from_dict({'eval_injection': {'magnitude_ceiling': 12}})
    assert config.magnitude_ceiling == 12.0


def test_shipped_desk_config_loads():
    config = load_experiment_config(ROOT / 'config_desk.json')
    assert config.output_dir == 'runs/desk'
    assert config.workers == 4
    assert config.campaign.fault_kinds == ['bitflip', 'warp']


def test_overrides_from_arguments(tmp_path):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps({'train': {'epochs': 2}, 'seeds': {'master': 5}}), encoding='utf-8')
    config = load_experiment_config(path, seed=9, output_dir=str(tmp_path / 'out'))
    assert config.train.epochs == 2
    assert config.seeds.master == 9
    assert config.train.seed == 9
    assert config.output_dir == str(tmp_path / 'out')


def test_paper_profile_requires_existing_cifar_dir():
    with pytest.raises(ConfigError, match="CIFAR-10"):
        experiment_from_dict({}, profile='paper')


def test_paper_profile_with_data_dir(tmp_path):
    config = experiment_from_dict({'dataset': {'path': str(tmp_path)}}, profile='paper')
    assert config.arch.depth == 44
    assert config.arch.input_shape == (3, 32, 32)
    assert config.train.lr0 == 2.0
    assert config.train.momentum == 0.9


def test_cifar_class_subset_sets_num_classes(tmp_path):
    config = experiment_from_dict({'dataset': {'path': str(tmp_path), 'classes': [1, 3, 5]}}, profile='paper')
    assert config.arch.num_classes == 3


@pytest.mark.parametrize("data", [
    {'colour': 'blue'},
    {'train': {'fault_aware': True}},
    {'arch': {'num_classes': 10}},
    {'dataset': {'kind': 'imagenet'}},
    {'arms': ['baseline', 'quantized']},
    {'arms': []},
    {'workers': 0},
    {'campaign': {'fault_kinds': ['stuck_at']}},
    {'campaign': {'trials': -1}},
    {'eval_injection': {'geometry_policy': 'random'}},
    {'eval_injection': {'geometry_policy': 'descriptor', 'descriptor_path': 'missing.json'}},
    {'arch': {'stage_widths': [32, 16, 8]}},
    {'arch': {'activation': 'gelu'}},
    {'train': {'lr0': -1.0}},
    {'profile': 'laptop'},
    {'train': {'injection_sites': 'fc'}},
    {'eval_injection': {'injection_sites': 'logits'}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        experiment_from_dict(data)


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError, match="non trovato"):
        load_experiment_config(tmp_path / 'none.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{"train": ', encoding='utf-8')
    with pytest.raises(ConfigError, match="JSON"):
        load_experiment_config(broken)


def test_zero_trials_accepted_at_load_time():
    assert experiment_from_dict({'campaign': {'trials': 0}}).campaign.trials == 0


# ===== SEMI =====

def test_seed_streams_are_independent_and_reproducible():
    config = experiment_from_dict({})
    first = {name: rng.random(4) for name, rng in seed_streams(config.seeds).items()}
    second = {name: rng.random(4) for name, rng in seed_streams(config.seeds).items()}
    assert set(first) == {'init', 'augment', 'fault', 'campaign'}
    for name in first:
        assert np.array_equal(first[name], second[name])
    values = [tuple(v) for v in first.values()]
    assert len(set(values)) == 4


def test_explicit_stream_seed_leaves_others_untouched():
    base = experiment_from_dict({})
    pinned = experiment_from_dict({'seeds': {'fault': 123}})
    a, b = seed_sequences(base.seeds), seed_sequences(pinned.seeds)
    assert a['init'].generate_state(2).tolist() == b['init'].generate_state(2).tolist()
    assert a['fault'].generate_state(2).tolist() != b['fault'].generate_state(2).tolist()
    assert b['fault'].entropy == 123


# ===== BRACCI =====

@pytest.mark.parametrize("arm, activation, order, fault_aware", [
    ('baseline', ActivationKind.STANDARD_RELU, LayerOrder.CONV_NORM_ACT, False),
    ('relu6', ActivationKind.RELU6, LayerOrder.CONV_NORM_ACT, False),
    ('relu6_fat', ActivationKind.RELU6, LayerOrder.CONV_NORM_ACT, True),
    ('hardened', ActivationKind.RELU6, LayerOrder.CONV_ACT_NORM, True),
])
def test_ablation_arms(arm, activation, order, fault_aware):
    config = experiment_from_dict({})
    arch, train = config_for_arm(config, arm)
    assert arch.activation is activation
    assert arch.layer_order is order
    assert train.fault_aware is fault_aware
    assert arch.stage_widths == config.arch.stage_widths
    assert train.epochs == config.train.epochs


def test_unknown_arm_rejected():
    with pytest.raises(ConfigError):
        config_for_arm(experiment_from_dict({}), 'mystery')


def test_eval_descriptor_policy():
    assert eval_descriptor(experiment_from_dict({})) is None
    config = experiment_from_dict({'eval_injection': {
        'geometry_policy': 'descriptor',
        'descriptor_path': str(ROOT / 'fault_model_default.json'),
    }})
    assert eval_descriptor(config).name == 'protocol'


def test_to_dict_is_json_serializable():
    data = experiment_from_dict({}).to_dict()
    assert json.loads(json.dumps(data))['arch']['activation'] == 'relu'
    assert set(PROFILES) == {'desk', 'paper'}
