"""
Metriche di valutazione: classificazione degli esiti di iniezione,
regret, AVF aggregato e statistiche sulla distribuzione dei pesi
"""

import enum
from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    """Input non valido per le metriche"""


class OutcomeClass(enum.Enum):
    MASKED = "masked"
    TOLERABLE_SDC = "tolerable_sdc"
    CRITICAL_SDC = "critical_sdc"


@dataclass(frozen=True)
class InjectionRecord:
    trial_id: int
    fault: str
    golden_top1: int
    faulty_top1: int
    outcome: OutcomeClass
    max_abs_deviation: float
    label: int = None

    def to_row(self):
        return {
            'trial_id': self.trial_id,
            'fault': self.fault,
            'golden_top1': self.golden_top1,
            'faulty_top1': self.faulty_top1,
            'outcome': self.outcome.value,
            'max_abs_deviation': self.max_abs_deviation,
            'label': -1 if self.label is None else self.label,
        }

    @classmethod
    def from_row(cls, row):
        label = int(row['label'])
        return cls(int(row['trial_id']), str(row['fault']), int(row['golden_top1']),
                   int(row['faulty_top1']), OutcomeClass(row['outcome']),
                   float(row['max_abs_deviation']), None if label < 0 else label)


@dataclass
class AvfReport:
    label: str
    total: int
    counts: dict
    fractions: dict
    critical_per_corrupted: float
    label_mispredictions: int = None

    def to_row(self):
        row = {'configuration': self.label, 'total': self.total}
        for outcome in OutcomeClass:
            row[outcome.value] = self.counts[outcome]
        for outcome in OutcomeClass:
            row[f'{outcome.value}_fraction'] = self.fractions[outcome]
        row['sdc_fraction'] = self.fractions[OutcomeClass.TOLERABLE_SDC] + self.fractions[OutcomeClass.CRITICAL_SDC]
        row['critical_per_corrupted'] = self.critical_per_corrupted
        row['label_mispredictions'] = -1 if self.label_mispredictions is None else self.label_mispredictions
        return row


@dataclass
class WeightStats:
    mean: float
    mean_abs: float
    histogram: np.ndarray
    bin_edges: np.ndarray = field(repr=False)
    out_of_range: int
    count: int


def top1(logits):
    """Classe predetta; a parità vince l'indice più basso"""
    return int(np.argmax(np.asarray(logits).reshape(-1)))


def max_abs_deviation(golden, faulty):
    diff = np.abs(np.asarray(faulty, dtype=np.float64) - np.asarray(golden, dtype=np.float64))
    diff = np.where(np.isnan(diff), np.inf, diff)
    return float(diff.max()) if diff.size else 0.0


def classify_outcome(golden_logits, faulty_logits):
    """
    Masked se i logit sono identici bit a bit, CriticalSDC se cambia la classe
    predetta rispetto al golden run, altrimenti TolerableSDC
    """
    golden = np.asarray(golden_logits)
    faulty = np.asarray(faulty_logits)
    if golden.shape != faulty.shape:
        raise MetricsError(f"Logit con shape diverse: {golden.shape} vs {faulty.shape}")
    if golden.dtype == faulty.dtype and golden.tobytes() == faulty.tobytes():
        return OutcomeClass.MASKED
    if top1(golden) != top1(faulty):
        return OutcomeClass.CRITICAL_SDC
    return OutcomeClass.TOLERABLE_SDC


def regret(clean_accuracy, noisy_accuracy):
    """Calo di accuratezza (punti percentuali) tra esecuzione pulita e con guasti"""
    return clean_accuracy - noisy_accuracy


def aggregate_avf(records, label=""):
    """
    Aggrega i record in un AvfReport

    critical_per_corrupted usa come denominatore le sole inferenze con output
    alterato (non Masked); label_mispredictions conta gli esiti faulty diversi
    dall'etichetta reale, quando disponibile.
    """
    records = list(records)
    if not records:
        raise MetricsError("Nessun record da aggregare")
    total = len(records)
    counts = {outcome: 0 for outcome in OutcomeClass}
    for record in records:
        counts[record.outcome] += 1
    fractions = {outcome: counts[outcome] / total for outcome in OutcomeClass}
    corrupted = total - counts[OutcomeClass.MASKED]
    critical_per_corrupted = counts[OutcomeClass.CRITICAL_SDC] / corrupted if corrupted else 0.0

    labelled = [r for r in records if r.label is not None]
    label_mispredictions = sum(1 for r in labelled if r.faulty_top1 != r.label) if labelled else None
    return AvfReport(label, total, counts, fractions, critical_per_corrupted, label_mispredictions)


def weight_stats_from_arrays(arrays, bins=101, limit=0.5):
    values = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])
    inside = np.abs(values) <= limit
    histogram, edges = np.histogram(values[inside], bins=bins, range=(-limit, limit))
    return WeightStats(
        mean=float(values.mean()),
        mean_abs=float(np.abs(values).mean()),
        histogram=histogram,
        bin_edges=edges,
        out_of_range=int((~inside).sum()),
        count=int(values.size),
    )


def weight_stats(network, bins=101, limit=0.5):
    """Statistiche su tutti i pesi di convoluzioni e lineare, istogramma su [-0.5, 0.5]"""
    return weight_stats_from_arrays(network.weight_arrays(), bins, limit)
