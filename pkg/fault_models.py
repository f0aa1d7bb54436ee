"""
Modelli di guasto realistici sull'uscita delle convoluzioni
Geometrie (valore singolo, riga, blocco), maschere di canale, distribuzioni
dei valori corrotti e file descrittori JSON per modelli ricavati empiricamente.
"""

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FaultSpecError(ValueError):
    """Piano di iniezione non valido per il tensore o parametri fuori range"""


class GeometryKind(enum.Enum):
    SINGLE = "single"
    LINE = "line"
    BLOCK = "block"


TRAIN_IMAGE_FRACTION = 0.75
TRAIN_BLOCK_CHANNEL_PROB = 0.3
EVAL_CHANNEL_PROB = {
    GeometryKind.SINGLE: 1.0,
    GeometryKind.LINE: 0.75,
    GeometryKind.BLOCK: 0.3,
}


# ===== GEOMETRIE =====

@dataclass(frozen=True)
class SingleValue:
    y: int
    x: int

    kind = GeometryKind.SINGLE

    def region(self, height, width):
        return slice(self.y, self.y + 1), slice(self.x, self.x + 1)

    def validate(self, height, width):
        if not (0 <= self.y < height and 0 <= self.x < width):
            raise FaultSpecError(f"Valore singolo ({self.y}, {self.x}) fuori dalla mappa {height}x{width}")

    def describe(self):
        return f"single(y={self.y},x={self.x})"


@dataclass(frozen=True)
class Line:
    """Una riga intera della mappa"""
    y: int

    kind = GeometryKind.LINE

    def region(self, height, width):
        return slice(self.y, self.y + 1), slice(0, width)

    def validate(self, height, width):
        if not 0 <= self.y < height:
            raise FaultSpecError(f"Riga {self.y} fuori dalla mappa {height}x{width}")

    def describe(self):
        return f"line(y={self.y})"


@dataclass(frozen=True)
class Block:
    y0: int
    x0: int
    height: int
    width: int

    kind = GeometryKind.BLOCK

    def region(self, height, width):
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)

    def validate(self, height, width):
        if self.height < 1 or self.width < 1:
            raise FaultSpecError(f"Blocco con estensione non positiva: {self.height}x{self.width}")
        if not (0 <= self.y0 and 0 <= self.x0
                and self.y0 + self.height <= height and self.x0 + self.width <= width):
            raise FaultSpecError(
                f"Blocco ({self.y0},{self.x0}) {self.height}x{self.width} fuori dalla mappa {height}x{width}"
            )

    def describe(self):
        return f"block(y0={self.y0},x0={self.x0},h={self.height},w={self.width})"


def sample_geometry(kind, height, width, rng):
    """
    Campiona una geometria del tipo richiesto, uniforme sulle posizioni valide

    Il blocco sceglie prima l'angolo, poi altezza ~ U[1, H - y0] e larghezza ~ U[1, W - x0].
    """
    kind = GeometryKind(kind)
    if kind is GeometryKind.SINGLE:
        return SingleValue(int(rng.integers(height)), int(rng.integers(width)))
    if kind is GeometryKind.LINE:
        return Line(int(rng.integers(height)))
    y0 = int(rng.integers(height))
    x0 = int(rng.integers(width))
    return Block(y0, x0, int(rng.integers(1, height - y0 + 1)), int(rng.integers(1, width - x0 + 1)))


# ===== MODELLI DI VALORE =====

def power_law_inverse_cdf(u, alpha, xmin):
    """Trasformazione inversa di Pareto: xmin * U^(-1/(alpha-1))"""
    return xmin * np.power(u, -1.0 / (alpha - 1.0))


def sample_power_law(alpha, xmin, rng, size=None):
    """
    Estrae valori di Pareto con supporto [xmin, inf)

    Args:
        alpha: Esponente (> 1)
        xmin: Minimo (> 0)
        rng: np.random.Generator
        size: None per un singolo valore, altrimenti numero di estrazioni

    Returns:
        float o np.ndarray
    """
    if not alpha > 1.0:
        raise FaultSpecError(f"alpha deve essere > 1, ricevuto {alpha}")
    if not xmin > 0.0:
        raise FaultSpecError(f"xmin deve essere > 0, ricevuto {xmin}")
    # 1 - [0, 1) = (0, 1]: evita U = 0
    u = 1.0 - rng.random(size)
    values = power_law_inverse_cdf(u, alpha, xmin)
    return float(values) if size is None else values


def _random_signs(count, rng):
    return np.where(rng.random(count) < 0.5, -1.0, 1.0)


@dataclass(frozen=True)
class AdditiveUniform:
    """x + s*u con s uniforme in {-1, +1} e u uniforme in [0, m], indipendenti per elemento"""
    max_magnitude: float

    def __post_init__(self):
        if self.max_magnitude < 0:
            raise FaultSpecError(f"Magnitudo massima negativa: {self.max_magnitude}")

    def corrupt(self, values, rng):
        count = values.size
        signs = _random_signs(count, rng)
        magnitudes = rng.uniform(0.0, self.max_magnitude, count)
        return values + (signs * magnitudes).astype(values.dtype)

    def to_dict(self):
        return {'kind': 'additive_uniform', 'max_magnitude': self.max_magnitude}

    def describe(self):
        return f"additive_uniform(m={self.max_magnitude:g})"


@dataclass(frozen=True)
class PowerLawReplace:
    """Sostituzione con s*v, v di Pareto(alpha, xmin) e segno uniforme"""
    alpha: float = 3.0
    xmin: float = 1.0

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise FaultSpecError(f"alpha deve essere > 1, ricevuto {self.alpha}")
        if not self.xmin > 0.0:
            raise FaultSpecError(f"xmin deve essere > 0, ricevuto {self.xmin}")

    def corrupt(self, values, rng):
        count = values.size
        signs = _random_signs(count, rng)
        magnitudes = sample_power_law(self.alpha, self.xmin, rng, size=count)
        return (signs * magnitudes).astype(values.dtype)

    def to_dict(self):
        return {'kind': 'power_law', 'alpha': self.alpha, 'xmin': self.xmin}

    def describe(self):
        return f"power_law(alpha={self.alpha:g},xmin={self.xmin:g})"


# ===== PIANO DI INIEZIONE =====

@dataclass(frozen=True)
class FaultSpec:
    """
    Piano di iniezione completamente materializzato

    geometry e channel_mask sono condivisi dalle immagini selezionate; con
    per_image valorizzato ogni immagine ha invece la sua coppia (geometria, maschera).
    """
    layer_index: int
    image_indices: tuple
    channel_mask: tuple
    geometry: object
    value_model: object
    seed: int
    per_image: tuple = None

    def geometry_for(self, position):
        if self.per_image is not None:
            return self.per_image[position]
        return self.geometry, self.channel_mask

    def describe(self):
        channels = sum(self.channel_mask)
        return (f"site={self.layer_index};images={len(self.image_indices)};channels={channels};"
                f"{self.geometry.describe()};{self.value_model.describe()}")


def images_to_corrupt(batch_size, fraction):
    """round(fraction * B) con arrotondamento half-up"""
    return int(np.floor(fraction * batch_size + 0.5))


def sample_channel_mask(channels, probability, rng):
    """Bernoulli(p) per canale, ricampionata finché almeno un canale è selezionato"""
    if probability <= 0:
        raise FaultSpecError(f"Probabilità di canale non positiva: {probability}")
    if probability >= 1.0:
        return tuple([True] * channels)
    while True:
        mask = rng.random(channels) < probability
        if mask.any():
            return tuple(bool(v) for v in mask)


def _draw_seed(rng):
    return int(rng.integers(0, 2 ** 63))


def _build_spec(layer, site_shapes, image_indices, kind, channel_prob, value_model, rng, shared_geometry):
    channels, height, width = site_shapes[layer]
    geometry = sample_geometry(kind, height, width, rng)
    mask = sample_channel_mask(channels, channel_prob, rng)
    per_image = None
    if not shared_geometry:
        per_image = tuple(
            (sample_geometry(kind, height, width, rng), sample_channel_mask(channels, channel_prob, rng))
            for _ in image_indices
        )
    return FaultSpec(layer, tuple(int(i) for i in image_indices), mask, geometry,
                     value_model, _draw_seed(rng), per_image)


def _check_sites(site_shapes, batch_size):
    if not site_shapes:
        raise FaultSpecError("La rete non espone siti di iniezione")
    if batch_size < 1:
        raise FaultSpecError(f"Batch vuoto: {batch_size}")


def _pick_site(site_shapes, sites, rng):
    """Sito uniforme tra i candidati (tutti i siti se sites è None)"""
    if sites is None:
        return int(rng.integers(len(site_shapes)))
    sites = [int(s) for s in sites]
    if not sites:
        raise FaultSpecError("Nessun sito candidato per l'iniezione")
    if min(sites) < 0 or max(sites) >= len(site_shapes):
        raise FaultSpecError(f"Siti candidati {sites} fuori da [0, {len(site_shapes)})")
    return sites[int(rng.integers(len(sites)))]


def sample_training_fault(epoch, batch_size, site_shapes, rng,
                          injected_fraction=TRAIN_IMAGE_FRACTION,
                          channel_prob=TRAIN_BLOCK_CHANNEL_PROB,
                          shared_geometry=True, sites=None):
    """
    Campiona il guasto "blocco" usato durante il fault-aware training

    Args:
        epoch: Epoca (1-based), tetto della magnitudo
        batch_size: Immagini nel batch
        site_shapes: Shape (C, H, W) di ogni sito
        rng: np.random.Generator
        injected_fraction: Frazione di immagini da corrompere
        channel_prob: Probabilità di corruzione per canale
        shared_geometry: False per campionare geometria e canali per immagine
        sites: Indici dei siti candidati (None: tutti i siti)

    Returns:
        FaultSpec oppure None se la frazione non seleziona alcuna immagine
    """
    _check_sites(site_shapes, batch_size)
    if not 0.0 <= injected_fraction <= 1.0:
        raise FaultSpecError(f"injected_fraction fuori da [0, 1]: {injected_fraction}")
    layer = _pick_site(site_shapes, sites, rng)
    count = images_to_corrupt(batch_size, injected_fraction)
    if count == 0:
        return None
    images = np.sort(rng.choice(batch_size, size=count, replace=False))
    return _build_spec(layer, site_shapes, images, GeometryKind.BLOCK, channel_prob,
                       AdditiveUniform(float(epoch)), rng, shared_geometry)


def sample_eval_fault(batch_size, site_shapes, magnitude_ceiling, rng, shared_geometry=True, sites=None):
    """
    Guasto di test: geometria uniforme tra singolo/riga/blocco, tutte le immagini corrotte

    Canali: singolo -> tutti, riga -> Bernoulli(0.75), blocco -> Bernoulli(0.3).
    """
    return sample_descriptor_fault(default_fault_descriptor(), batch_size, site_shapes,
                                   magnitude_ceiling, rng, shared_geometry, sites)


def apply_fault(feature, spec, rng=None):
    """
    Applica il piano di iniezione a un tensore di feature

    Args:
        feature: Tensore (N, C, H, W) in uscita dal sito
        spec: FaultSpec
        rng: Generator per i valori; se None viene usato spec.seed

    Returns:
        tuple: (tensore corrotto, maschera booleana delle coordinate corrotte)
    """
    x = np.asarray(feature)
    if x.ndim != 4:
        raise FaultSpecError(f"Feature attesa a 4 assi, ricevuto shape {x.shape}")
    n, c, h, w = x.shape
    if not spec.image_indices:
        raise FaultSpecError("Nessuna immagine selezionata")
    if min(spec.image_indices) < 0 or max(spec.image_indices) >= n:
        raise FaultSpecError(f"Indici immagine {spec.image_indices} fuori dal batch di {n}")
    if spec.per_image is not None and len(spec.per_image) != len(spec.image_indices):
        raise FaultSpecError("per_image deve avere una voce per ogni immagine selezionata")

    mask = np.zeros(x.shape, dtype=bool)
    for position, image in enumerate(spec.image_indices):
        geometry, channel_mask = spec.geometry_for(position)
        if len(channel_mask) != c:
            raise FaultSpecError(f"Maschera di {len(channel_mask)} canali per feature con {c} canali")
        if not any(channel_mask):
            raise FaultSpecError("Maschera di canale senza canali selezionati")
        geometry.validate(h, w)
        ys, xs = geometry.region(h, w)
        region = np.zeros((h, w), dtype=bool)
        region[ys, xs] = True
        mask[image] |= np.asarray(channel_mask, dtype=bool)[:, None, None] & region[None, :, :]

    generator = rng if rng is not None else np.random.default_rng(spec.seed)
    out = x.copy()
    out[mask] = spec.value_model.corrupt(x[mask], generator)
    return out, mask


def corrupted_coordinates(mask):
    """Insieme delle coordinate (n, c, y, x) corrotte"""
    return {tuple(int(v) for v in coord) for coord in np.argwhere(mask)}


def make_corruption(spec, rng=None):
    """Funzione di corruzione per FaultHook: applica spec all'uscita del sito"""
    def corrupt(output, layer, layer_input):
        return apply_fault(output, spec, rng)[0]
    return corrupt


# ===== FILE DESCRITTORI =====

@dataclass(frozen=True)
class DescriptorEntry:
    geometry: GeometryKind
    frequency: float
    channel_prob: float
    value_model: object = None  # None: AdditiveUniform con il tetto della campagna


@dataclass(frozen=True)
class FaultModelDescriptor:
    name: str
    entries: tuple

    def probabilities(self):
        weights = np.array([entry.frequency for entry in self.entries], dtype=np.float64)
        return weights / weights.sum()


_DESCRIPTOR_KEYS = {'name', 'entries'}
_ENTRY_KEYS = {'geometry', 'frequency', 'channel_prob', 'value_model'}
_VALUE_MODEL_KEYS = {
    'additive_uniform': {'kind', 'max_magnitude'},
    'power_law': {'kind', 'alpha', 'xmin'},
}


def _reject_unknown(data, allowed, where):
    unknown = set(data) - allowed
    if unknown:
        raise FaultSpecError(f"Campi sconosciuti in {where}: {sorted(unknown)}")


def _parse_value_model(data):
    if data is None:
        return None
    kind = data.get('kind')
    if kind not in _VALUE_MODEL_KEYS:
        raise FaultSpecError(f"value_model.kind sconosciuto: {kind!r}")
    _reject_unknown(data, _VALUE_MODEL_KEYS[kind], 'value_model')
    if kind == 'additive_uniform':
        if 'max_magnitude' not in data:
            return None
        return AdditiveUniform(float(data['max_magnitude']))
    return PowerLawReplace(float(data.get('alpha', 3.0)), float(data.get('xmin', 1.0)))


def parse_fault_descriptor(data):
    """Valida e converte il contenuto JSON di un descrittore"""
    if not isinstance(data, dict):
        raise FaultSpecError("Il descrittore deve essere un oggetto JSON")
    _reject_unknown(data, _DESCRIPTOR_KEYS, 'descrittore')
    if 'name' not in data or 'entries' not in data:
        raise FaultSpecError("Descrittore senza 'name' o 'entries'")

    entries = []
    for i, raw in enumerate(data['entries']):
        _reject_unknown(raw, _ENTRY_KEYS, f'entries[{i}]')
        try:
            geometry = GeometryKind(raw['geometry'])
        except (KeyError, ValueError):
            raise FaultSpecError(f"entries[{i}]: geometria non valida {raw.get('geometry')!r}")
        frequency = float(raw.get('frequency', 1.0))
        channel_prob = float(raw.get('channel_prob', EVAL_CHANNEL_PROB[geometry]))
        if frequency < 0:
            raise FaultSpecError(f"entries[{i}]: frequenza negativa {frequency}")
        if not 0.0 < channel_prob <= 1.0:
            raise FaultSpecError(f"entries[{i}]: channel_prob fuori da (0, 1]: {channel_prob}")
        entries.append(DescriptorEntry(geometry, frequency, channel_prob,
                                       _parse_value_model(raw.get('value_model'))))

    if not entries or sum(e.frequency for e in entries) <= 0:
        raise FaultSpecError("Le frequenze del descrittore devono avere somma positiva")
    return FaultModelDescriptor(str(data['name']), tuple(entries))


def load_fault_descriptor(path):
    """Carica un descrittore da file JSON (UTF-8)"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise FaultSpecError(f"Descrittore non trovato: {path}")
    except json.JSONDecodeError as e:
        raise FaultSpecError(f"Descrittore {path} non è JSON valido: {e}")
    return parse_fault_descriptor(data)


def default_fault_descriptor():
    """Protocollo di test: singolo/riga/blocco equiprobabili con le probabilità di canale standard"""
    return FaultModelDescriptor('protocol', tuple(
        DescriptorEntry(kind, 1.0, EVAL_CHANNEL_PROB[kind]) for kind in GeometryKind
    ))


def sample_descriptor_fault(descriptor, batch_size, site_shapes, magnitude_ceiling, rng,
                            shared_geometry=True, sites=None):
    """
    Guasto di test che sceglie la voce del descrittore in base alla frequenza relativa

    Tutte le immagini del batch vengono corrotte.
    """
    _check_sites(site_shapes, batch_size)
    layer = _pick_site(site_shapes, sites, rng)
    entry = descriptor.entries[int(rng.choice(len(descriptor.entries), p=descriptor.probabilities()))]
    value_model = entry.value_model or AdditiveUniform(float(magnitude_ceiling))
    return _build_spec(layer, site_shapes, np.arange(batch_size), entry.geometry,
                       entry.channel_prob, value_model, rng, shared_geometry)
