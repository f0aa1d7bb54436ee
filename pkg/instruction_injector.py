"""
Iniettore a livello di istruzione (analogo della campagna SASS)
Bit flip sulla somma parziale di accumulazione dentro la convoluzione e
sostituzione dei 32 elementi di un warp con valori di Pareto.
"""

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from eval_metrics import InjectionRecord, classify_outcome, max_abs_deviation, top1
from fault_models import PowerLawReplace
from model_zoo import FaultHook, forward_with_hook
from tensor_core import conv2d_forward, pad_spatial

WARP_SIZE = 32
FLOAT_BITS = 32


class InstructionSiteError(ValueError):
    """Sito di iniezione a livello di istruzione non valido"""


class FaultKind(enum.Enum):
    BIT_FLIP = "bitflip"
    WARP = "warp"


@dataclass(frozen=True)
class InstructionFaultSite:
    layer_index: int
    n: int
    c: int
    y: int
    x: int
    mac_step: int = 0
    bit_index: int = 0
    warp_start: int = 0

    def validate(self, layer, input_shape):
        """Controlla coordinate, passo di accumulazione, bit e inizio warp per questo layer"""
        n, c, h, w = input_shape
        oc, oh, ow = layer.output_shape((c, h, w))
        if not (0 <= self.n < n and 0 <= self.c < oc and 0 <= self.y < oh and 0 <= self.x < ow):
            raise InstructionSiteError(
                f"Coordinata ({self.n},{self.c},{self.y},{self.x}) fuori dall'output ({n},{oc},{oh},{ow})"
            )
        if not 0 <= self.mac_step < layer.mac_count:
            raise InstructionSiteError(f"mac_step {self.mac_step} fuori da [0, {layer.mac_count})")
        if not 0 <= self.bit_index < FLOAT_BITS:
            raise InstructionSiteError(f"bit_index {self.bit_index} fuori da [0, {FLOAT_BITS})")
        if not 0 <= self.warp_start < oc * oh * ow:
            raise InstructionSiteError(f"warp_start {self.warp_start} fuori dal volume di {oc * oh * ow} elementi")

    def describe(self, kind):
        if FaultKind(kind) is FaultKind.BIT_FLIP:
            return (f"bitflip(site={self.layer_index},n={self.n},c={self.c},y={self.y},x={self.x},"
                    f"step={self.mac_step},bit={self.bit_index})")
        return f"warp(site={self.layer_index},n={self.n},start={self.warp_start})"


def flip_bit(value, bit_index):
    """Inverte un bit della rappresentazione IEEE-754 a 32 bit"""
    pattern = np.array([value], dtype=np.float32).view(np.uint32)
    pattern ^= np.uint32(1 << bit_index)
    return pattern.view(np.float32)[0]


def _check_float32(x):
    if x.dtype != np.float32:
        raise InstructionSiteError(f"L'iniezione a livello di istruzione richiede float32, ricevuto {x.dtype}")


def convolve_with_bitflip(input, layer, site):
    """
    Convoluzione con un bit flip nella somma parziale di un elemento di output

    L'elemento scelto viene ricalcolato passo per passo nello stesso ordine del
    kernel; dopo il passo mac_step il bit indicato viene invertito e
    l'accumulazione prosegue. Tutti gli altri elementi restano identici.
    """
    x = np.asarray(input)
    _check_float32(x)
    site.validate(layer, x.shape)
    out = conv2d_forward(x, layer)

    kh, kw = layer.kernel_size
    s = layer.stride
    padded = pad_spatial(x, layer.padding)
    weights = layer.weights.astype(np.float32, copy=False)
    acc = np.float32(0.0)
    step = 0
    for ci in range(layer.in_channels):
        for i in range(kh):
            for j in range(kw):
                product = weights[site.c, ci, i, j] * padded[site.n, ci, site.y * s + i, site.x * s + j]
                acc = np.float32(acc + product)
                if step == site.mac_step:
                    acc = flip_bit(acc, site.bit_index)
                step += 1
    if layer.bias is not None:
        acc = np.float32(acc + np.float32(layer.bias[site.c]))
    out[site.n, site.c, site.y, site.x] = acc
    return out


def warp_slice(site, volume):
    """Intervallo lineare (c, y, x) coperto dal warp, troncato a fine volume"""
    return slice(site.warp_start, min(site.warp_start + WARP_SIZE, volume))


def convolve_with_warp_corruption(input, layer, site, value_model, rng):
    """
    Convoluzione corretta seguita dalla sostituzione di 32 elementi consecutivi

    La linearizzazione è row-major sul volume (c, y, x) di una immagine; a fine
    volume vengono sostituiti meno di 32 elementi.
    """
    x = np.asarray(input)
    _check_float32(x)
    site.validate(layer, x.shape)
    out = conv2d_forward(x, layer)
    image = out[site.n].reshape(-1)
    span = warp_slice(site, image.size)
    image[span] = value_model.corrupt(image[span], rng)
    out[site.n] = image.reshape(out.shape[1:])
    return out


def sample_instruction_site(network, fault_kind, rng):
    """
    Campiona un sito uniforme: convoluzione, coordinata, passo, bit e warp

    Il warp parte sempre da un multiplo di 32 del volume di output.
    """
    convs = network.conv_sites()
    layer = convs[int(rng.integers(len(convs)))]
    c, h, w = network.site_shapes[layer.site_index]
    volume = c * h * w
    return InstructionFaultSite(
        layer_index=layer.site_index,
        n=0,
        c=int(rng.integers(c)),
        y=int(rng.integers(h)),
        x=int(rng.integers(w)),
        mac_step=int(rng.integers(layer.mac_count)),
        bit_index=int(rng.integers(FLOAT_BITS)),
        warp_start=WARP_SIZE * int(rng.integers((volume + WARP_SIZE - 1) // WARP_SIZE)),
    )


def instruction_hook(site, fault_kind, value_model=None, rng=None):
    """FaultHook che sostituisce l'uscita del sito con la convoluzione iniettata"""
    kind = FaultKind(fault_kind)

    def corrupt(output, layer, layer_input):
        if kind is FaultKind.BIT_FLIP:
            return convolve_with_bitflip(layer_input, layer, site)
        return convolve_with_warp_corruption(layer_input, layer, site, value_model, rng)

    return FaultHook(site.layer_index, corrupt)


def run_instruction_trial(network, image, site, fault_kind, trial_id, value_model=None, rng=None, label=None):
    """Esegue golden e faulty su una immagine e classifica l'esito"""
    golden = forward_with_hook(network, image)
    faulty = forward_with_hook(network, image, instruction_hook(site, fault_kind, value_model, rng))
    return InjectionRecord(
        trial_id=trial_id,
        fault=site.describe(fault_kind),
        golden_top1=top1(golden[0]),
        faulty_top1=top1(faulty[0]),
        outcome=classify_outcome(golden[0], faulty[0]),
        max_abs_deviation=max_abs_deviation(golden[0], faulty[0]),
        label=None if label is None else int(label),
    )


def run_instruction_campaign(network, images, count, fault_kind, rng, labels=None,
                             value_model=None, workers=1, progress_callback=None):
    """
    Campagna di iniezioni a livello di istruzione

    Ogni prova ha un proprio stream derivato dal generatore della campagna,
    quindi l'elenco dei record non dipende dal numero di worker.

    Args:
        network: Rete addestrata (viene usata in modalità Eval)
        images: Campione del dataset (M, C, H, W), già normalizzato
        count: Numero di prove (>= 1)
        fault_kind: FaultKind o stringa 'bitflip' / 'warp'
        rng: np.random.Generator della campagna
        labels: Etichette reali opzionali per la colonna per-label
        value_model: PowerLawReplace per i guasti di warp
        workers: Thread paralleli
        progress_callback: Funzione per progress bar (0-100)

    Returns:
        list: InjectionRecord in ordine di prova
    """
    if count < 1:
        raise InstructionSiteError(f"Numero di prove non valido: {count}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InstructionSiteError(f"Campione di immagini non valido: shape {images.shape}")
    kind = FaultKind(fault_kind)
    value_model = value_model or PowerLawReplace()
    network.eval()
    trial_seeds = np.random.SeedSequence(int(rng.integers(0, 2 ** 63))).spawn(count)

    def trial(trial_id):
        trial_rng = np.random.default_rng(trial_seeds[trial_id])
        index = int(trial_rng.integers(images.shape[0]))
        site = sample_instruction_site(network, kind, trial_rng)
        label = None if labels is None else labels[index]
        return run_instruction_trial(network, images[index:index + 1], site, kind, trial_id,
                                     value_model, trial_rng, label)

    records = []
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        for record in pool.map(trial, range(count)):
            records.append(record)
            if progress_callback:
                progress_callback(100.0 * len(records) / count)
    return records
