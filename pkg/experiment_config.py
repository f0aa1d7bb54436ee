"""
Configurazione degli esperimenti
Profili predefiniti (desk / paper), caricamento da file JSON, stream di
seme indipendenti e bracci dello studio di ablazione.
"""

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from fault_models import FaultSpecError, load_fault_descriptor
from model_zoo import INJECTION_SITE_POLICIES, ArchConfig, ArchConfigError, LayerOrder
from tensor_core import ActivationKind
from train_engine import TrainConfig, TrainingError

SEED_STREAMS = ('init', 'augment', 'fault', 'campaign')
GEOMETRY_POLICIES = ('protocol', 'descriptor')

# nome -> (attivazione, ordine dei layer, fault-aware)
ARMS = {
    'baseline': (ActivationKind.STANDARD_RELU, LayerOrder.CONV_NORM_ACT, False),
    'relu6': (ActivationKind.RELU6, LayerOrder.CONV_NORM_ACT, False),
    'relu6_fat': (ActivationKind.RELU6, LayerOrder.CONV_NORM_ACT, True),
    'hardened': (ActivationKind.RELU6, LayerOrder.CONV_ACT_NORM, True),
}


class ConfigError(ValueError):
    """File di configurazione non valido"""


@dataclass
class DatasetConfig:
    kind: str = 'synthetic'
    path: str = None
    num_classes: int = 4
    samples: int = 2000
    test_samples: int = 500
    image_size: int = 16
    noise: float = 0.1
    classes: list = None
    limit_train: int = None
    limit_test: int = None

    @property
    def effective_classes(self):
        if self.kind == 'cifar10':
            return len(self.classes) if self.classes else 10
        return self.num_classes

    @property
    def input_shape(self):
        if self.kind == 'cifar10':
            return (3, 32, 32)
        return (3, self.image_size, self.image_size)


@dataclass
class EvalInjectionConfig:
    repeats: int = 5
    batch_size: int = 128
    magnitude_ceiling: float = None  # None: numero di epoche di training
    geometry_policy: str = 'protocol'
    descriptor_path: str = None
    shared_geometry: bool = True
    injection_sites: str = 'all'


@dataclass
class CampaignConfig:
    trials: int = 1000
    fault_kinds: list = field(default_factory=lambda: ['bitflip', 'warp'])
    sample_size: int = 200
    alpha: float = 3.0
    xmin: float = 1.0
    timing_batch: int = 200


@dataclass
class SeedConfig:
    master: int = 0
    init: int = None
    augment: int = None
    fault: int = None
    campaign: int = None


@dataclass
class ExperimentConfig:
    profile: str
    dataset: DatasetConfig
    arch: ArchConfig
    train: TrainConfig
    eval_injection: EvalInjectionConfig
    campaign: CampaignConfig
    seeds: SeedConfig
    arms: list
    output_dir: str = 'runs'
    workers: int = 1

    @property
    def magnitude_ceiling(self):
        if self.eval_injection.magnitude_ceiling is None:
            return float(self.train.epochs)
        return float(self.eval_injection.magnitude_ceiling)

    def to_dict(self):
        return {
            'profile': self.profile,
            'dataset': asdict(self.dataset),
            'arch': self.arch.to_dict(),
            'train': asdict(self.train),
            'eval_injection': asdict(self.eval_injection),
            'campaign': asdict(self.campaign),
            'seeds': asdict(self.seeds),
            'arms': list(self.arms),
            'output_dir': self.output_dir,
            'workers': self.workers,
        }


# ===== PROFILI =====

# iniezioni di alto livello solo sulle feature map delle convoluzioni;
# warp con valori di Pareto da 10 in su, coda pesante (alpha 1.5)
PROFILES = {
    'desk': {
        'dataset': {'kind': 'synthetic', 'num_classes': 4, 'samples': 2000, 'test_samples': 500,
                    'image_size': 16, 'noise': 0.1},
        'arch': {'blocks_per_stage': 1, 'stage_widths': [8, 16, 32]},
        'train': {'epochs': 30, 'batch_size': 32, 'lr0': 0.1, 'momentum': 0.0,
                  'weight_decay': 1e-5, 'clip_norm': 1.0, 'injection_sites': 'conv'},
        'eval_injection': {'repeats': 5, 'batch_size': 128, 'injection_sites': 'conv'},
        'campaign': {'trials': 1000, 'sample_size': 200, 'alpha': 1.5, 'xmin': 10.0},
    },
    'paper': {
        'dataset': {'kind': 'cifar10', 'path': 'data/cifar-10-batches-bin'},
        'arch': {'blocks_per_stage': 7, 'stage_widths': [16, 32, 64]},
        'train': {'epochs': 100, 'batch_size': 128, 'lr0': 2.0, 'momentum': 0.9,
                  'weight_decay': 1e-5, 'clip_norm': 1.0, 'injection_sites': 'conv'},
        'eval_injection': {'repeats': 5, 'batch_size': 128, 'injection_sites': 'conv'},
        'campaign': {'trials': 1000, 'sample_size': 200, 'alpha': 1.5, 'xmin': 10.0},
    },
}

_SECTIONS = {
    'dataset': DatasetConfig,
    'eval_injection': EvalInjectionConfig,
    'campaign': CampaignConfig,
    'seeds': SeedConfig,
}
_ARCH_KEYS = {'activation', 'layer_order', 'blocks_per_stage', 'stage_widths', 'conv_bias'}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {'fault_aware', 'seed'}
_TOP_LEVEL = set(_SECTIONS) | {'arch', 'train', 'arms', 'output_dir', 'workers', 'profile'}


def _merge(base, override):
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merge(result[key], value)
        else:
            result[key] = value
    return result


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"La sezione '{section}' deve essere un oggetto JSON")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"Chiavi sconosciute in '{section}': {sorted(unknown)}")


def _build_section(name, data):
    cls = _SECTIONS[name]
    _check_keys(name, data, {f.name for f in fields(cls)})
    return cls(**data)


def _validate(config):
    dataset = config.dataset
    if dataset.kind not in ('synthetic', 'cifar10'):
        raise ConfigError(f"dataset.kind sconosciuto: {dataset.kind!r}")
    if dataset.kind == 'cifar10':
        if not dataset.path or not Path(dataset.path).is_dir():
            raise ConfigError(f"Cartella CIFAR-10 non trovata: {dataset.path}")
        if dataset.classes is not None and (len(set(dataset.classes)) < 2
                                            or not all(0 <= c < 10 for c in dataset.classes)):
            raise ConfigError(f"dataset.classes non valido: {dataset.classes}")
    elif dataset.num_classes < 2 or dataset.samples < 1 or dataset.image_size < 1:
        raise ConfigError("Dataset sintetico: servono num_classes >= 2, samples e image_size positivi")

    injection = config.eval_injection
    if injection.repeats < 1 or injection.batch_size < 1:
        raise ConfigError("eval_injection: repeats e batch_size devono essere positivi")
    if injection.geometry_policy not in GEOMETRY_POLICIES:
        raise ConfigError(f"geometry_policy sconosciuta: {injection.geometry_policy!r}")
    if injection.geometry_policy == 'descriptor':
        if not injection.descriptor_path or not Path(injection.descriptor_path).is_file():
            raise ConfigError(f"Descrittore dei guasti non trovato: {injection.descriptor_path}")
    if injection.magnitude_ceiling is not None and injection.magnitude_ceiling < 0:
        raise ConfigError(f"magnitude_ceiling negativo: {injection.magnitude_ceiling}")
    if injection.injection_sites not in INJECTION_SITE_POLICIES:
        raise ConfigError(f"eval_injection.injection_sites sconosciuto: {injection.injection_sites!r}")

    campaign = config.campaign
    if campaign.trials < 0 or campaign.sample_size < 1 or campaign.timing_batch < 1:
        raise ConfigError("campaign: trials >= 0, sample_size e timing_batch positivi")
    unknown_kinds = set(campaign.fault_kinds) - {'bitflip', 'warp'}
    if unknown_kinds:
        raise ConfigError(f"campaign.fault_kinds sconosciuti: {sorted(unknown_kinds)}")

    if not config.arms:
        raise ConfigError("Nessun braccio di ablazione configurato")
    unknown_arms = [arm for arm in config.arms if arm not in ARMS]
    if unknown_arms:
        raise ConfigError(f"Bracci sconosciuti: {unknown_arms} (disponibili: {list(ARMS)})")
    if config.workers < 1:
        raise ConfigError(f"workers deve essere positivo, ricevuto {config.workers}")

    try:
        config.arch.validate()
        config.train.validate()
    except (ArchConfigError, TrainingError) as e:
        raise ConfigError(str(e))


def experiment_from_dict(data, profile='desk', seed=None, output_dir=None):
    """
    Costruisce un ExperimentConfig sovrapponendo i valori al profilo

    Args:
        data: dict letto dal file di configurazione (può essere vuoto)
        profile: 'desk' o 'paper'; una chiave 'profile' nel file ha la precedenza
        seed: Seme principale che sostituisce quello del file
        output_dir: Cartella di output che sostituisce quella del file

    Returns:
        ExperimentConfig validato
    """
    _check_keys('config', data, _TOP_LEVEL)
    profile = data.get('profile', profile)
    if profile not in PROFILES:
        raise ConfigError(f"Profilo sconosciuto: {profile!r} (disponibili: {list(PROFILES)})")
    merged = _merge(PROFILES[profile], {k: v for k, v in data.items() if k != 'profile'})

    sections = {name: _build_section(name, merged.get(name, {})) for name in _SECTIONS}
    dataset = sections['dataset']

    arch_data = merged.get('arch', {})
    _check_keys('arch', arch_data, _ARCH_KEYS)
    train_data = merged.get('train', {})
    _check_keys('train', train_data, _TRAIN_KEYS)
    try:
        arch = ArchConfig(num_classes=dataset.effective_classes, input_shape=dataset.input_shape, **arch_data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Sezione 'arch' non valida: {e}")

    seeds = sections['seeds']
    if seed is not None:
        seeds.master = int(seed)

    config = ExperimentConfig(
        profile=profile,
        dataset=dataset,
        arch=arch,
        train=TrainConfig(seed=seeds.master, **train_data),
        eval_injection=sections['eval_injection'],
        campaign=sections['campaign'],
        seeds=seeds,
        arms=list(merged.get('arms', list(ARMS))),
        output_dir=str(output_dir if output_dir is not None else merged.get('output_dir', 'runs')),
        workers=int(merged.get('workers', 1)),
    )
    _validate(config)
    return config


def load_experiment_config(path=None, profile='desk', seed=None, output_dir=None):
    """Carica il file JSON (UTF-8) di configurazione; senza path usa solo il profilo"""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"File di configurazione non trovato: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} non è JSON valido: {e}")
    return experiment_from_dict(data, profile, seed, output_dir)


# ===== SEMI E BRACCI =====

def seed_sequences(seeds):
    """
    Quattro SeedSequence indipendenti (init, augment, fault, campaign)

    Gli stream non impostati esplicitamente derivano dal seme principale.
    """
    spawned = np.random.SeedSequence(seeds.master).spawn(len(SEED_STREAMS))
    result = {}
    for name, child in zip(SEED_STREAMS, spawned):
        explicit = getattr(seeds, name)
        result[name] = np.random.SeedSequence(explicit) if explicit is not None else child
    return result


def seed_streams(seeds):
    """Generator numpy per ciascuno stream"""
    return {name: np.random.default_rng(seq) for name, seq in seed_sequences(seeds).items()}


def config_for_arm(config, arm):
    """ArchConfig e TrainConfig di un braccio di ablazione"""
    if arm not in ARMS:
        raise ConfigError(f"Braccio sconosciuto: {arm!r}")
    activation, layer_order, fault_aware = ARMS[arm]
    return (replace(config.arch, activation=activation, layer_order=layer_order),
            replace(config.train, fault_aware=fault_aware))


def eval_descriptor(config):
    """Descrittore dei guasti di test secondo la geometry_policy"""
    if config.eval_injection.geometry_policy != 'descriptor':
        return None
    try:
        return load_fault_descriptor(config.eval_injection.descriptor_path)
    except FaultSpecError as e:
        raise ConfigError(str(e))
