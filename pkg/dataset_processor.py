"""
Modulo per il caricamento dei dataset
CIFAR-10 in formato binario (record da 3073 byte), generatore sintetico di
blob gaussiani e data augmentation (random crop + flip orizzontale).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_CLASSES = 10
CIFAR_IMAGE_SIZE = 32
CIFAR_CHANNEL_BYTES = CIFAR_IMAGE_SIZE * CIFAR_IMAGE_SIZE
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_CHANNEL_BYTES
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
AUGMENT_PADDING = 4


class DatasetFormatError(ValueError):
    """File di dataset malformato o parametri di generazione non validi"""


@dataclass
class DatasetSplit:
    """
    Immagini (N, C, H, W) in [0, 1], etichette e costanti di normalizzazione per canale

    Le costanti vengono dal training split e sono condivise con il test split.
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(f"{self.images.shape[0]} immagini ma {self.labels.shape[0]} etichette")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"Etichette fuori da [0, {self.num_classes})")

    def __len__(self):
        return int(self.images.shape[0])

    def normalize(self, images):
        mean = self.channel_mean.astype(np.float32)[None, :, None, None]
        std = self.channel_std.astype(np.float32)[None, :, None, None]
        return ((images - mean) / std).astype(np.float32)

    def subset(self, indices):
        indices = np.asarray(indices)
        return DatasetSplit(self.images[indices], self.labels[indices], self.num_classes,
                            self.channel_mean, self.channel_std)


def channel_statistics(images):
    """Media e deviazione standard per canale (std nulla sostituita da 1)"""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def _make_splits(train_images, train_labels, test_images, test_labels, num_classes):
    mean, std = channel_statistics(train_images)
    return (DatasetSplit(train_images, train_labels, num_classes, mean, std),
            DatasetSplit(test_images, test_labels, num_classes, mean, std))


# ===== CIFAR-10 =====

def parse_cifar10_bytes(data, source="<bytes>"):
    """
    Decodifica record CIFAR-10: 1 byte etichetta + 1024 R + 1024 G + 1024 B

    Args:
        data: Contenuto del file
        source: Nome del file per i messaggi di errore

    Returns:
        tuple: (immagini float32 (N, 3, 32, 32) con valori v/255, etichette int64)
    """
    if len(data) % CIFAR_RECORD_BYTES != 0:
        complete = len(data) // CIFAR_RECORD_BYTES
        raise DatasetFormatError(
            f"{source}: file troncato, record incompleto all'offset {complete * CIFAR_RECORD_BYTES} "
            f"(lunghezza {len(data)} non multipla di {CIFAR_RECORD_BYTES})"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    invalid = np.nonzero(labels >= CIFAR10_CLASSES)[0]
    if invalid.size:
        record = int(invalid[0])
        raise DatasetFormatError(
            f"{source}: etichetta {labels[record]} non valida all'offset {record * CIFAR_RECORD_BYTES}"
        )
    pixels = raw[:, 1:].reshape(-1, 3, CIFAR_IMAGE_SIZE, CIFAR_IMAGE_SIZE)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return images, labels


def serialize_cifar10(images, labels):
    """Ricostruisce i byte del formato binario da immagini in [0, 1]"""
    pixels = np.rint(np.asarray(images, dtype=np.float64) * 255.0).astype(np.uint8)
    n = pixels.shape[0]
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = pixels.reshape(n, -1)
    return records.tobytes()


def _read_cifar_file(path):
    with open(path, 'rb') as f:
        return parse_cifar10_bytes(f.read(), source=path.name)


def _select(images, labels, classes, limit):
    if classes is not None:
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        remap = {int(c): i for i, c in enumerate(classes)}
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def load_cifar10(directory, classes=None, limit_train=None, limit_test=None):
    """
    Carica CIFAR-10 (versione binaria) da una cartella

    Args:
        directory: Cartella con data_batch_1..5.bin e test_batch.bin
        classes: Sottoinsieme opzionale di classi (rimappate a 0..k-1)
        limit_train: Numero massimo di immagini di training
        limit_test: Numero massimo di immagini di test

    Returns:
        tuple: (train DatasetSplit, test DatasetSplit)
    """
    directory = Path(directory)
    missing = [name for name in CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,) if not (directory / name).exists()]
    if missing:
        raise DatasetFormatError(f"File CIFAR-10 mancanti in {directory}: {', '.join(missing)}")

    parts = [_read_cifar_file(directory / name) for name in CIFAR10_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = _read_cifar_file(directory / CIFAR10_TEST_FILE)

    train_images, train_labels = _select(train_images, train_labels, classes, limit_train)
    test_images, test_labels = _select(test_images, test_labels, classes, limit_test)
    if len(train_labels) == 0 or len(test_labels) == 0:
        raise DatasetFormatError("Selezione CIFAR-10 vuota")
    num_classes = len(classes) if classes is not None else CIFAR10_CLASSES
    return _make_splits(train_images, train_labels, test_images, test_labels, num_classes)


# ===== DATASET SINTETICO =====

def _class_prototypes(num_classes, channels, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    prototypes = np.empty((num_classes, channels, size, size), dtype=np.float64)
    for k in range(num_classes):
        for c in range(channels):
            cy, cx = rng.uniform(0, size - 1, size=2)
            sigma = rng.uniform(size / 8.0, size / 3.0)
            amplitude = rng.uniform(0.5, 1.0)
            prototypes[k, c] = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    return prototypes


def _draw_samples(prototypes, count, noise, rng):
    num_classes = prototypes.shape[0]
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    images = prototypes[labels]
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    return np.clip(images, 0.0, 1.0).astype(np.float32), labels


def synth_dataset(num_classes, samples, image_size, noise, seed, test_samples=None, channels=3):
    """
    Dataset sintetico: un prototipo a blob gaussiani per classe più rumore per campione

    Prototipi, training e test usano stream distinti derivati dal seme.

    Args:
        num_classes: Classi (>= 2)
        samples: Campioni di training
        image_size: Lato dell'immagine
        noise: Deviazione standard del rumore gaussiano
        seed: Seme
        test_samples: Campioni di test (default samples // 4)
        channels: Canali per immagine

    Returns:
        tuple: (train DatasetSplit, test DatasetSplit)
    """
    if num_classes < 2:
        raise DatasetFormatError(f"Servono almeno 2 classi, ricevuto {num_classes}")
    if samples < 1 or image_size < 1:
        raise DatasetFormatError(f"Parametri non validi: samples={samples}, image_size={image_size}")
    if noise < 0:
        raise DatasetFormatError(f"Rumore negativo: {noise}")
    test_samples = test_samples if test_samples is not None else max(num_classes, samples // 4)

    proto_seq, train_seq, test_seq = np.random.SeedSequence(seed).spawn(3)
    prototypes = _class_prototypes(num_classes, channels, image_size, np.random.default_rng(proto_seq))
    train_images, train_labels = _draw_samples(prototypes, samples, noise, np.random.default_rng(train_seq))
    test_images, test_labels = _draw_samples(prototypes, test_samples, noise, np.random.default_rng(test_seq))
    return _make_splits(train_images, train_labels, test_images, test_labels, num_classes)


# ===== AUGMENTATION =====

def crop_and_flip(image, dy, dx, flip, padding=AUGMENT_PADDING):
    """Zero-padding di `padding` pixel, ritaglio alla dimensione nativa da (dy, dx), flip opzionale"""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)))
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images, rng, padding=AUGMENT_PADDING):
    """Random crop con padding 4 e flip orizzontale con probabilità 0.5 per immagine"""
    images = np.asarray(images)
    if images.shape[2] != images.shape[3]:
        raise DatasetFormatError(f"Augmentation su immagini non quadrate: {images.shape}")
    n = images.shape[0]
    offsets = rng.integers(0, 2 * padding + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return np.stack([
        crop_and_flip(images[i], int(offsets[i, 0]), int(offsets[i, 1]), bool(flips[i]), padding)
        for i in range(n)
    ]).astype(images.dtype, copy=False)
