"""
Costruzione della ResNet configurabile per CIFAR
Le manopole di hardening sono l'attivazione (ReLU / ReLU6), l'ordine
normalizzazione/attivazione e la profondità (6n + 2 layer contati).

Ogni uscita di convoluzione e del layer lineare è un "sito" di iniezione
con indice stabile a parità di ArchConfig.
"""

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from tensor_core import (
    ActivationKind,
    ActivationLayer,
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    Mode,
    ShapeError,
    conv_output_size,
    global_avg_pool,
    global_avg_pool_backward,
)


# siti candidati per le iniezioni di alto livello
INJECTION_SITE_POLICIES = ('all', 'conv')


class ArchConfigError(ValueError):
    """Configurazione di architettura non valida"""


class LayerOrder(enum.Enum):
    CONV_NORM_ACT = "conv_norm_act"
    CONV_ACT_NORM = "conv_act_norm"


@dataclass(frozen=True)
class ArchConfig:
    activation: ActivationKind = ActivationKind.STANDARD_RELU
    layer_order: LayerOrder = LayerOrder.CONV_NORM_ACT
    blocks_per_stage: int = 7
    stage_widths: tuple = (16, 32, 64)
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    conv_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        object.__setattr__(self, "layer_order", LayerOrder(self.layer_order))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def depth(self):
        return 6 * self.blocks_per_stage + 2

    def validate(self):
        if self.blocks_per_stage < 1:
            raise ArchConfigError(f"blocks_per_stage deve essere positivo, ricevuto {self.blocks_per_stage}")
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
            raise ArchConfigError(f"stage_widths deve contenere tre larghezze positive, ricevuto {self.stage_widths}")
        if list(self.stage_widths) != sorted(self.stage_widths):
            raise ArchConfigError(f"stage_widths deve essere non decrescente, ricevuto {self.stage_widths}")
        if self.num_classes < 2:
            raise ArchConfigError(f"num_classes deve essere >= 2, ricevuto {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchConfigError(f"input_shape (C, H, W) non valido: {self.input_shape}")
        _, h, w = self.input_shape
        for _ in range(2):
            h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
        if h < 1 or w < 1:
            raise ArchConfigError(f"input {self.input_shape} troppo piccolo per tre stadi")

    def to_dict(self):
        return {
            'activation': self.activation.value,
            'layer_order': self.layer_order.value,
            'blocks_per_stage': self.blocks_per_stage,
            'stage_widths': list(self.stage_widths),
            'num_classes': self.num_classes,
            'input_shape': list(self.input_shape),
            'conv_bias': self.conv_bias,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class FaultHook:
    """
    Corruzione da applicare all'uscita di un sito durante il forward

    corrupt(output, layer, layer_input) -> tensore corrotto
    """
    site_index: int
    corrupt: object = field(repr=False)


# ===== BLOCCHI =====

def _run_site(layer, x, mode, hook, trace):
    out = layer.forward(x, mode)
    if hook is not None and hook.site_index == layer.site_index:
        out = hook.corrupt(out, layer, x)
    if trace is not None:
        trace('site', layer.name, out)
    return out


def _run_norm(norm, x, mode, trace):
    if trace is not None:
        trace('norm_input', norm.name, x)
    return norm.forward(x, mode)


class ConvUnit:
    """Convoluzione seguita da normalizzazione e attivazione nell'ordine configurato"""

    def __init__(self, conv, norm, act, order):
        self.conv = conv
        self.norm = norm
        self.act = act
        self.order = order

    def layers(self):
        return [self.conv, self.norm] + ([self.act] if self.act is not None else [])

    def forward(self, x, mode, hook=None, trace=None):
        out = _run_site(self.conv, x, mode, hook, trace)
        if self.order is LayerOrder.CONV_ACT_NORM and self.act is not None:
            out = self.act.forward(out, mode)
            return _run_norm(self.norm, out, mode, trace)
        out = _run_norm(self.norm, out, mode, trace)
        if self.act is not None:
            out = self.act.forward(out, mode)
        return out

    def backward(self, dout):
        if self.order is LayerOrder.CONV_ACT_NORM and self.act is not None:
            dout = self.norm.backward(dout)
            dout = self.act.backward(dout)
        else:
            if self.act is not None:
                dout = self.act.backward(dout)
            dout = self.norm.backward(dout)
        return self.conv.backward(dout)


class BasicBlock:
    """
    Blocco residuo con due convoluzioni 3x3

    In ConvNormAct: conv-bn-act, conv-bn, somma, act.
    In ConvActNorm: conv-act-bn, conv-act-bn, somma, act.
    La scorciatoia è un'identità senza parametri; ai cambi di stadio
    sottocampiona di 2 e aggiunge canali nulli.
    """

    def __init__(self, unit1, unit2, final_act, in_channels, out_channels, stride):
        self.unit1 = unit1
        self.unit2 = unit2
        self.final_act = final_act
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self._shortcut_shape = None

    def layers(self):
        return self.unit1.layers() + self.unit2.layers() + [self.final_act]

    def _shortcut(self, x):
        if self.stride == 1 and self.in_channels == self.out_channels:
            return x
        sub = x[:, :, ::self.stride, ::self.stride]
        extra = self.out_channels - self.in_channels
        before = extra // 2
        return np.pad(sub, ((0, 0), (before, extra - before), (0, 0), (0, 0)))

    def _shortcut_backward(self, dout):
        if self.stride == 1 and self.in_channels == self.out_channels:
            return dout
        before = (self.out_channels - self.in_channels) // 2
        dx = np.zeros(self._shortcut_shape, dtype=dout.dtype)
        dx[:, :, ::self.stride, ::self.stride] = dout[:, before:before + self.in_channels]
        return dx

    def forward(self, x, mode, hook=None, trace=None):
        if mode is Mode.TRAIN:
            self._shortcut_shape = x.shape
        out = self.unit1.forward(x, mode, hook, trace)
        out = self.unit2.forward(out, mode, hook, trace)
        return self.final_act.forward(out + self._shortcut(x), mode)

    def backward(self, dout):
        dsum = self.final_act.backward(dout)
        dx = self.unit2.backward(dsum)
        dx = self.unit1.backward(dx)
        return dx + self._shortcut_backward(dsum)


class Network:
    """ResNet per CIFAR: stem, tre stadi di BasicBlock, pooling medio e lineare"""

    def __init__(self, config, stem, blocks, fc, site_shapes):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.fc = fc
        self.site_shapes = list(site_shapes)
        self.mode = Mode.TRAIN
        self._pool_shape = None

    # ----- modalità -----

    def train(self):
        self.mode = Mode.TRAIN
        return self

    def eval(self):
        self.mode = Mode.EVAL
        return self

    # ----- struttura -----

    def layers(self):
        result = self.stem.layers()
        for block in self.blocks:
            result.extend(block.layers())
        result.append(self.fc)
        return result

    def sites(self):
        """Layer che producono un sito di iniezione, in ordine di indice"""
        return [layer for layer in self.layers() if getattr(layer, 'site_index', None) is not None]

    def conv_sites(self):
        return [layer for layer in self.sites() if isinstance(layer, ConvLayer)]

    def injection_sites(self, policy='all'):
        """Indici dei siti per la politica: 'all' (conv e lineare) o 'conv' (solo feature map)"""
        if policy not in INJECTION_SITE_POLICIES:
            raise ArchConfigError(f"Politica dei siti sconosciuta: {policy!r}")
        layers = self.sites() if policy == 'all' else self.conv_sites()
        return [layer.site_index for layer in layers]

    def named_parameters(self):
        params = {}
        for layer in self.layers():
            params.update(layer.parameters())
        return params

    def named_buffers(self):
        buffers = {}
        for layer in self.layers():
            if isinstance(layer, BatchNormLayer):
                buffers.update(layer.buffers())
        return buffers

    def weight_arrays(self):
        """Pesi di convoluzioni e lineare (gamma/beta esclusi)"""
        return [layer.weights for layer in self.sites()]

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))

    def gradients(self):
        grads = {}
        for layer in self.layers():
            grads.update(getattr(layer, 'grads', {}))
        return grads

    # ----- calcolo -----

    def forward(self, x, hook=None, trace=None):
        out = self.stem.forward(x, self.mode, hook, trace)
        for block in self.blocks:
            out = block.forward(out, self.mode, hook, trace)
        if self.mode is Mode.TRAIN:
            self._pool_shape = out.shape
        pooled = global_avg_pool(out)
        return _run_site(self.fc, pooled, self.mode, hook, trace)

    def backward(self, dlogits):
        dpooled = self.fc.backward(dlogits)
        dout = global_avg_pool_backward(dpooled, self._pool_shape)
        for block in reversed(self.blocks):
            dout = block.backward(dout)
        return self.stem.backward(dout)

    def astype(self, dtype):
        """Copia della rete con tutti i parametri e le statistiche nel dtype indicato"""
        clone = copy.deepcopy(self)
        for layer in clone.layers():
            for attr in ('weights', 'bias', 'gamma', 'beta', 'running_mean', 'running_var'):
                value = getattr(layer, attr, None)
                if value is not None:
                    setattr(layer, attr, value.astype(dtype))
        return clone

    def copy(self):
        return copy.deepcopy(self)


# ===== COSTRUZIONE =====

def _kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_resnet(config, init_seed):
    """
    Costruisce la rete

    Args:
        config: ArchConfig
        init_seed: Seme (int o SeedSequence) per l'inizializzazione Kaiming-uniform

    Returns:
        Network: rete in modalità Train, gamma = 1, beta = 0
    """
    config.validate()
    rng = np.random.default_rng(init_seed)
    order = config.layer_order
    kind = config.activation
    site_shapes = []

    def make_conv(in_c, out_c, stride, name, spatial):
        weights = _kaiming_uniform(rng, (out_c, in_c, 3, 3), in_c * 9)
        bias = None
        if config.conv_bias:
            limit = 1.0 / np.sqrt(in_c * 9)
            bias = rng.uniform(-limit, limit, size=out_c).astype(np.float32)
        conv = ConvLayer(weights, bias, stride=stride, padding=1, name=name)
        conv.site_index = len(site_shapes)
        shape = conv.output_shape((in_c,) + spatial)
        site_shapes.append(shape)
        return conv, shape[1:]

    in_c, h, w = config.input_shape
    width = config.stage_widths[0]
    conv, spatial = make_conv(in_c, width, 1, "stem.conv", (h, w))
    stem = ConvUnit(conv, BatchNormLayer(width, name="stem.bn"),
                    ActivationLayer(kind, name="stem.act"), order)

    blocks = []
    in_c = width
    for stage, out_c in enumerate(config.stage_widths):
        for b in range(config.blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            prefix = f"stage{stage + 1}.block{b + 1}"
            conv1, spatial1 = make_conv(in_c, out_c, stride, f"{prefix}.conv1", spatial)
            conv2, spatial2 = make_conv(out_c, out_c, 1, f"{prefix}.conv2", spatial1)
            unit1 = ConvUnit(conv1, BatchNormLayer(out_c, name=f"{prefix}.bn1"),
                             ActivationLayer(kind, name=f"{prefix}.act1"), order)
            # in ConvNormAct l'attivazione del secondo ramo segue la somma residua
            act2 = ActivationLayer(kind, name=f"{prefix}.act2") if order is LayerOrder.CONV_ACT_NORM else None
            unit2 = ConvUnit(conv2, BatchNormLayer(out_c, name=f"{prefix}.bn2"), act2, order)
            blocks.append(BasicBlock(unit1, unit2, ActivationLayer(kind, name=f"{prefix}.out_act"),
                                     in_c, out_c, stride))
            in_c = out_c
            spatial = spatial2

    fan_in = config.stage_widths[-1]
    limit = 1.0 / np.sqrt(fan_in)
    fc = LinearLayer(_kaiming_uniform(rng, (config.num_classes, fan_in), fan_in),
                     rng.uniform(-limit, limit, size=config.num_classes).astype(np.float32),
                     name="fc")
    fc.site_index = len(site_shapes)
    site_shapes.append((config.num_classes, 1, 1))

    return Network(config, stem, blocks, fc, site_shapes)


def forward_with_hook(network, input, hook=None, trace=None):
    """
    Forward standard con corruzione opzionale all'uscita di un sito

    Args:
        network: Network
        input: Batch (N, C, H, W)
        hook: FaultHook oppure None
        trace: callback(evento, nome_layer, tensore) per forward strumentati

    Returns:
        np.ndarray: logit (N, K, 1, 1)
    """
    if hook is not None and not 0 <= hook.site_index < len(network.site_shapes):
        raise ShapeError(f"Sito {hook.site_index} non valido: la rete ha {len(network.site_shapes)} siti")
    expected = tuple(network.config.input_shape)
    if tuple(np.shape(input)[1:]) != expected:
        raise ShapeError(f"Input con shape {np.shape(input)}, atteso (N,) + {expected}")
    return network.forward(input, hook=hook, trace=trace)


def count_sites(network):
    """Numero di siti di iniezione e relative shape (C, H, W)"""
    return len(network.site_shapes), list(network.site_shapes)
