"""
Test della costruzione delle ResNet: conteggio dei layer, siti di iniezione,
determinismo dell'inizializzazione e comportamento degli hook
"""

import numpy as np
import pytest

from fault_models import AdditiveUniform, make_corruption, sample_eval_fault
from model_zoo import (
    ArchConfig,
    ArchConfigError,
    FaultHook,
    LayerOrder,
    build_resnet,
    count_sites,
    forward_with_hook,
)
from tensor_core import ActivationKind, ConvLayer, LinearLayer, ShapeError


def small_config(**overrides):
    values = dict(activation=ActivationKind.RELU6, layer_order=LayerOrder.CONV_ACT_NORM,
                  blocks_per_stage=1, stage_widths=(4, 8, 8), num_classes=3, input_shape=(3, 8, 8))
    values.update(overrides)
    return ArchConfig(**values)


def random_batch(seed=0, n=4, shape=(3, 8, 8)):
    return np.random.default_rng(seed).standard_normal((n,) + shape).astype(np.float32)


# ===== STRUTTURA =====

@pytest.mark.parametrize("blocks, expected", [(1, 8), (7, 44)])
def test_counted_layers(blocks, expected):
    config = ArchConfig(blocks_per_stage=blocks)
    network = build_resnet(config, 0)
    sites, _ = count_sites(network)
    assert sites == expected == config.depth
    convs = [layer for layer in network.sites() if isinstance(layer, ConvLayer)]
    linears = [layer for layer in network.sites() if isinstance(layer, LinearLayer)]
    assert len(convs) == expected - 1
    assert len(linears) == 1


def test_site_shapes_cifar_widths():
    network = build_resnet(ArchConfig(blocks_per_stage=1), 0)
    assert network.site_shapes == [
        (16, 32, 32), (16, 32, 32), (16, 32, 32),
        (32, 16, 16), (32, 16, 16),
        (64, 8, 8), (64, 8, 8),
        (10, 1, 1),
    ]


def test_site_indices_are_stable_and_named():
    network = build_resnet(small_config(), 0)
    names = [layer.name for layer in network.sites()]
    assert names[0] == "stem.conv"
    assert names[1:3] == ["stage1.block1.conv1", "stage1.block1.conv2"]
    assert names[-1] == "fc"
    assert [layer.site_index for layer in network.sites()] == list(range(len(names)))
    again = build_resnet(small_config(), 99)
    assert [layer.name for layer in again.sites()] == names


def test_injection_site_policies():
    network = build_resnet(small_config(), 0)
    assert network.injection_sites() == list(range(8))
    assert network.injection_sites('conv') == list(range(7))
    with pytest.raises(ArchConfigError):
        network.injection_sites('logits')


def test_same_seed_gives_bit_identical_parameters():
    first = build_resnet(small_config(), 1234).named_parameters()
    second = build_resnet(small_config(), 1234).named_parameters()
    other = build_resnet(small_config(), 1235).named_parameters()
    assert first.keys() == second.keys()
    for name in first:
        assert np.array_equal(first[name], second[name])
    assert any(not np.array_equal(first[name], other[name]) for name in first)


def test_norm_starts_at_identity():
    params = build_resnet(small_config(), 0).named_parameters()
    assert np.all(params["stem.bn.gamma"] == 1.0)
    assert np.all(params["stem.bn.beta"] == 0.0)


@pytest.mark.parametrize("overrides", [
    {"stage_widths": (16, 8, 32)},
    {"stage_widths": (16, 32)},
    {"blocks_per_stage": 0},
    {"num_classes": 1},
    {"input_shape": (3, 8)},
    {"input_shape": (3, 0, 8)},
])
def test_invalid_configs_rejected(overrides):
    with pytest.raises(ArchConfigError):
        build_resnet(small_config(**overrides), 0)


def test_config_dict_round_trip():
    config = small_config(conv_bias=True)
    assert ArchConfig.from_dict(config.to_dict()) == config


# ===== FORWARD E HOOK =====

def test_forward_without_hook_equals_plain_forward():
    network = build_resnet(small_config(), 0).eval()
    x = random_batch()
    assert np.array_equal(forward_with_hook(network, x), network.forward(x))


@pytest.mark.parametrize("site", [0, 3, 7])
def test_identity_hook_is_bit_identical(site):
    network = build_resnet(small_config(), 0).eval()
    x = random_batch(1)
    hooked = forward_with_hook(network, x, FaultHook(site, lambda output, layer, layer_input: output))
    assert np.array_equal(hooked, network.forward(x))


def test_hook_changes_only_when_it_corrupts():
    network = build_resnet(small_config(layer_order=LayerOrder.CONV_NORM_ACT,
                                        activation=ActivationKind.STANDARD_RELU), 0).eval()
    x = random_batch(2)
    hooked = forward_with_hook(network, x, FaultHook(7, lambda output, layer, layer_input: output + 1.0))
    assert np.allclose(hooked, network.forward(x) + 1.0)


def test_invalid_site_rejected():
    network = build_resnet(small_config(), 0).eval()
    with pytest.raises(ShapeError):
        forward_with_hook(network, random_batch(), FaultHook(8, lambda o, l, i: o))


def test_wrong_input_shape_rejected():
    network = build_resnet(small_config(), 0).eval()
    with pytest.raises(ShapeError):
        forward_with_hook(network, random_batch(shape=(3, 16, 16)))


def test_forward_is_batch_independent():
    network = build_resnet(small_config(), 3).eval()
    x = random_batch(4, n=6)
    full = network.forward(x)
    for i in range(6):
        assert np.array_equal(network.forward(x[i:i + 1])[0], full[i])


def test_relu6_act_norm_keeps_norm_inputs_bounded():
    network = build_resnet(small_config(), 0).eval()
    rng = np.random.default_rng(2024)
    conv_sites = network.injection_sites('conv')
    bounds = []

    def trace(event, name, tensor):
        if event == 'norm_input':
            bounds.append((float(tensor.min()), float(tensor.max())))

    hit_sites = set()
    for _ in range(100):
        x = (rng.standard_normal((2, 3, 8, 8)) * rng.uniform(1.0, 100.0)).astype(np.float32)
        forward_with_hook(network, x, None, trace)
        spec = sample_eval_fault(2, network.site_shapes, 1e6, rng, sites=conv_sites)
        assert spec.value_model == AdditiveUniform(1e6)
        hit_sites.add(spec.layer_index)
        forward_with_hook(network, x, FaultHook(spec.layer_index, make_corruption(spec)), trace)

    assert len(bounds) == 200 * len(network.conv_sites())
    assert all(0.0 <= low and high <= 6.0 for low, high in bounds)
    assert len(hit_sites) > 1


def test_standard_order_lets_large_values_reach_norm():
    network = build_resnet(small_config(activation=ActivationKind.STANDARD_RELU,
                                        layer_order=LayerOrder.CONV_NORM_ACT), 0).eval()
    peaks = []

    def trace(event, name, tensor):
        if event == 'norm_input':
            peaks.append(float(np.abs(tensor).max()))

    explode = FaultHook(2, lambda output, layer, layer_input: output + 1e4)
    forward_with_hook(network, random_batch(6), explode, trace)
    assert max(peaks) > 6.0


def test_float64_copy_matches_float32():
    network = build_resnet(small_config(), 0).eval()
    shadow = network.astype(np.float64)
    x = random_batch(7)
    assert shadow.forward(x.astype(np.float64)).dtype == np.float64
    assert np.allclose(shadow.forward(x.astype(np.float64)), network.forward(x), atol=1e-4)
    assert network.named_parameters()["fc.weight"].dtype == np.float32
