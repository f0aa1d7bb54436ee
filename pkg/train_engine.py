"""
Motore di addestramento
Loss Binary Cross Entropy, cosine annealing, clipping della norma globale,
SGD con weight decay e ciclo di epoca con iniezione fault-aware.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from dataset_processor import augment_batch
from fault_models import make_corruption, sample_training_fault
from model_zoo import INJECTION_SITE_POLICIES, FaultHook
from tensor_core import Mode, backprop

LOG_CLAMP = 1e-12


class TrainingError(ValueError):
    """Configurazione o input di addestramento non validi"""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 2.0
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    fault_aware: bool = False
    injected_fraction: float = 0.75
    momentum: float = 0.0
    seed: int = 0
    augment: bool = True
    shared_geometry: bool = True
    eval_batch_size: int = 256
    injection_sites: str = 'all'

    def validate(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs deve essere positivo, ricevuto {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size deve essere positivo, ricevuto {self.batch_size}")
        if not self.lr0 > 0:
            raise TrainingError(f"lr0 deve essere > 0, ricevuto {self.lr0}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay negativo: {self.weight_decay}")
        if not self.clip_norm > 0:
            raise TrainingError(f"clip_norm deve essere > 0, ricevuto {self.clip_norm}")
        if not 0.0 <= self.injected_fraction <= 1.0:
            raise TrainingError(f"injected_fraction fuori da [0, 1]: {self.injected_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum fuori da [0, 1): {self.momentum}")
        if self.injection_sites not in INJECTION_SITE_POLICIES:
            raise TrainingError(f"injection_sites sconosciuto: {self.injection_sites!r}")


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    epoch: int = 1
    step: int = 0


# ===== LOSS, SCHEDULE, OTTIMIZZATORE =====

def _sigmoid(z):
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    expz = np.exp(z[~positive])
    out[~positive] = expz / (1.0 + expz)
    return out


def bce_loss(logits, labels):
    """
    Binary Cross Entropy media su N·K con target one-hot

    Args:
        logits: Array (N, K)
        labels: Indici di classe (N,)

    Returns:
        tuple: (loss float, gradiente (sigma(z) - y) / (N·K) con il dtype dei logit)
    """
    z = np.asarray(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise TrainingError(f"Logit {z.shape} incompatibili con {labels.shape[0]} etichette")
    n, k = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise TrainingError(f"Etichette fuori da [0, {k}): min {labels.min()}, max {labels.max()}")

    z64 = z.astype(np.float64)
    target = np.zeros((n, k), dtype=np.float64)
    target[np.arange(n), labels] = 1.0
    p = _sigmoid(z64)
    losses = target * np.log(np.maximum(p, LOG_CLAMP)) + (1.0 - target) * np.log(np.maximum(1.0 - p, LOG_CLAMP))
    loss = float(-losses.sum() / (n * k))
    grad = ((p - target) / (n * k)).astype(z.dtype)
    return loss, grad


def cosine_lr(epoch, total, lr0):
    """lr(t) = 0.5 · lr0 · (1 + cos(pi·t/T)), mai negativo"""
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total)))


def global_norm(gradients):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in gradients.values()))


def clip_global_norm(gradients, clip_norm):
    """Riscala tutti i gradienti se la norma globale supera clip_norm"""
    if not clip_norm > 0:
        raise TrainingError(f"clip_norm deve essere > 0, ricevuto {clip_norm}")
    norm = global_norm(gradients)
    if norm <= clip_norm:
        return dict(gradients)
    scale = clip_norm / norm
    return {name: (g * scale).astype(g.dtype) for name, g in gradients.items()}


def sgd_step(params, gradients, lr, weight_decay, state=None, momentum=0.0):
    """
    Aggiornamento SGD in place: g' = g + wd·w ; w <- w - lr·g'

    Con momentum > 0 usa i buffer di velocità di state (v <- mu·v + g').
    """
    for name, weights in params.items():
        if name not in gradients:
            continue
        grad = gradients[name]
        if grad.shape != weights.shape:
            raise TrainingError(f"{name}: gradiente {grad.shape} diverso dal parametro {weights.shape}")
        step = grad + weights.dtype.type(weight_decay) * weights
        if momentum:
            velocity = state.velocity.get(name)
            if velocity is None:
                velocity = np.zeros_like(weights)
            velocity = weights.dtype.type(momentum) * velocity + step
            state.velocity[name] = velocity
            step = velocity
        weights -= weights.dtype.type(lr) * step
    return params


# ===== CICLO DI EPOCA =====

def predict_logits(network, images, batch_size=256, hook_factory=None):
    """Logit in modalità Eval, a batch"""
    network.eval()
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        hook = hook_factory(batch) if hook_factory else None
        outputs.append(network.forward(batch, hook=hook).reshape(batch.shape[0], -1))
    return np.concatenate(outputs, axis=0)


def evaluate_accuracy(network, split, batch_size=256):
    """Accuratezza pulita (%) sul dataset, senza iniezioni"""
    logits = predict_logits(network, split.normalize(split.images), batch_size)
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == split.labels))


def train_epoch(network, dataset, config, epoch_index, rng_streams, state=None):
    """
    Una epoca di addestramento

    Args:
        network: Rete in modalità Train
        dataset: DatasetSplit di training
        config: TrainConfig
        epoch_index: Epoca 1-based
        rng_streams: dict con i Generator 'augment' e 'fault'
        state: OptimizerState (creato se assente)

    Returns:
        tuple: (network, dict con le metriche dell'epoca)
    """
    if len(dataset) == 0:
        raise TrainingError("Dataset di training vuoto")
    if network.mode is not Mode.TRAIN:
        raise TrainingError("train_epoch richiede la rete in modalità Train")
    state = state if state is not None else OptimizerState()
    state.epoch = epoch_index

    augment_rng = rng_streams['augment']
    fault_rng = rng_streams['fault']
    lr = cosine_lr(epoch_index - 1, config.epochs, config.lr0)
    params = network.named_parameters()
    sites = network.injection_sites(config.injection_sites)
    order = augment_rng.permutation(len(dataset))

    total_loss = 0.0
    injected_batches = 0
    injected_images = 0
    for start in range(0, len(dataset), config.batch_size):
        indices = order[start:start + config.batch_size]
        images = dataset.images[indices]
        if config.augment:
            images = augment_batch(images, augment_rng)
        batch = dataset.normalize(images)

        hook = None
        if config.fault_aware:
            spec = sample_training_fault(epoch_index, len(indices), network.site_shapes, fault_rng,
                                         injected_fraction=config.injected_fraction,
                                         shared_geometry=config.shared_geometry, sites=sites)
            if spec is not None:
                # corruzione additiva: il gradiente attraversa il sito invariato
                hook = FaultHook(spec.layer_index, make_corruption(spec))
                injected_batches += 1
                injected_images += len(spec.image_indices)

        loss, grads = backprop(network, batch, dataset.labels[indices], hook=hook)
        grads = clip_global_norm(grads, config.clip_norm)
        sgd_step(params, grads, lr, config.weight_decay, state, config.momentum)
        state.step += 1
        total_loss += loss * len(indices)

    metrics = {
        'epoch': epoch_index,
        'lr': lr,
        'train_loss': total_loss / len(dataset),
        'injected_batches': injected_batches,
        'injected_images': injected_images,
    }
    return network, metrics


class FaultAwareTrainer:
    """Addestramento completo con monitoraggio dell'accuratezza pulita per epoca"""

    def __init__(self, network, config, rng_streams, log_callback=None, progress_callback=None):
        """
        Inizializza il trainer

        Args:
            network: Network da addestrare (posseduta dal trainer durante il fit)
            config: TrainConfig
            rng_streams: dict con i Generator 'augment' e 'fault'
            log_callback: Funzione per logging
            progress_callback: Funzione per progress bar
        """
        config.validate()
        self.network = network
        self.config = config
        self.rng_streams = rng_streams
        self.log_callback = log_callback
        self.progress_callback = progress_callback
        self.state = OptimizerState()
        self.history = []

    def log(self, message):
        """Invia messaggio al log se callback disponibile"""
        if self.log_callback:
            self.log_callback(message)

    def update_progress(self, value):
        """Aggiorna progress bar se callback disponibile"""
        if self.progress_callback:
            self.progress_callback(value)

    def fit(self, train_split, test_split, epoch_callback=None):
        """
        Esegue tutte le epoche

        Args:
            train_split: DatasetSplit di training
            test_split: DatasetSplit di test (monitoraggio senza iniezioni)
            epoch_callback: Funzione(epoch, metrics) chiamata a fine epoca

        Returns:
            list: metriche per epoca (epoch, lr, train_loss, clean_test_accuracy, ...)
        """
        mode = "fault-aware" if self.config.fault_aware else "standard"
        self.log(f"🏋️ Addestramento {mode}: {self.config.epochs} epoche, batch {self.config.batch_size}, "
                 f"lr0 {self.config.lr0}")

        for epoch in range(1, self.config.epochs + 1):
            self.network.train()
            _, metrics = train_epoch(self.network, train_split, self.config, epoch,
                                     self.rng_streams, self.state)
            metrics['clean_test_accuracy'] = evaluate_accuracy(self.network, test_split,
                                                               self.config.eval_batch_size)
            self.network.train()
            self.history.append(metrics)

            self.log(f"   Epoca {epoch}/{self.config.epochs}: lr={metrics['lr']:.4f} "
                     f"loss={metrics['train_loss']:.5f} acc={metrics['clean_test_accuracy']:.2f}%")
            if epoch_callback:
                epoch_callback(epoch, metrics)
            self.update_progress(100.0 * epoch / self.config.epochs)

        self.network.eval()
        return self.history
