"""
Campagne di iniezione su una rete addestrata
Campagna di alto livello (accuratezza con guasti sull'intero test set,
ripetuta con semi distinti), campagne a livello di istruzione e misura
del tempo di inferenza. Ogni braccio scrive i propri file nella sua cartella.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from eval_metrics import InjectionRecord, OutcomeClass, aggregate_avf, classify_outcome, max_abs_deviation, regret, top1
from fault_models import PowerLawReplace, make_corruption, sample_descriptor_fault, sample_eval_fault
from instruction_injector import FaultKind, run_instruction_campaign
from model_zoo import FaultHook, forward_with_hook
from train_engine import predict_logits

# stream figli dello stream 'campaign', indipendenti dai tipi di guasto abilitati
CAMPAIGN_CHILDREN = ('highlevel', 'bitflip', 'warp')


class CampaignError(ValueError):
    """Campagna non eseguibile con la configurazione fornita"""


@dataclass
class HighLevelResult:
    clean_accuracy: float
    noisy_accuracies: list
    records: list = field(default_factory=list)
    repeat_of: list = field(default_factory=list)

    @property
    def mean_noisy_accuracy(self):
        return float(np.mean(self.noisy_accuracies))

    @property
    def regret(self):
        return regret(self.clean_accuracy, self.mean_noisy_accuracy)


def campaign_sequences(campaign_seed):
    """SeedSequence figlie per campagna di alto livello, bit flip e warp"""
    if isinstance(campaign_seed, np.random.SeedSequence):
        # copia senza figli già generati: ogni braccio riceve gli stessi stream
        seq = np.random.SeedSequence(campaign_seed.entropy, spawn_key=campaign_seed.spawn_key)
    else:
        seq = np.random.SeedSequence(campaign_seed)
    return dict(zip(CAMPAIGN_CHILDREN, seq.spawn(len(CAMPAIGN_CHILDREN))))


def _injected_repeat(network, images, labels, golden, repeat_seq, batch_size, ceiling,
                     descriptor, shared_geometry, first_trial, sites=None):
    """Una passata sul test set con un guasto per batch; tutte le immagini del batch corrotte"""
    rng = np.random.default_rng(repeat_seq)
    records = []
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        if descriptor is None:
            spec = sample_eval_fault(batch.shape[0], network.site_shapes, ceiling, rng, shared_geometry, sites)
        else:
            spec = sample_descriptor_fault(descriptor, batch.shape[0], network.site_shapes,
                                           ceiling, rng, shared_geometry, sites)
        faulty = forward_with_hook(network, batch, FaultHook(spec.layer_index, make_corruption(spec)))
        faulty = faulty.reshape(batch.shape[0], -1)
        description = spec.describe()
        for i in range(batch.shape[0]):
            index = start + i
            predicted = top1(faulty[i])
            correct += int(predicted == labels[index])
            records.append(InjectionRecord(
                trial_id=first_trial + index,
                fault=description,
                golden_top1=top1(golden[index]),
                faulty_top1=predicted,
                outcome=classify_outcome(golden[index], faulty[i]),
                max_abs_deviation=max_abs_deviation(golden[index], faulty[i]),
                label=int(labels[index]),
            ))
    return 100.0 * correct / images.shape[0], records


def run_highlevel_campaign(network, split, magnitude_ceiling, seed_sequence, repeats=5,
                           batch_size=128, descriptor=None, shared_geometry=True,
                           workers=1, progress_callback=None, injection_sites='all'):
    """
    Accuratezza con guasti: un'iniezione per batch su tutto il test set, ripetuta

    Args:
        network: Rete addestrata (usata in Eval)
        split: DatasetSplit di test
        magnitude_ceiling: Tetto della magnitudo additiva
        seed_sequence: SeedSequence della campagna di alto livello
        repeats: Ripetizioni con semi distinti
        batch_size: Immagini per batch (tutte corrotte)
        descriptor: FaultModelDescriptor opzionale al posto del protocollo standard
        shared_geometry: Geometria condivisa tra le immagini del batch
        workers: Thread per le ripetizioni
        progress_callback: Funzione per progress bar (0-100)
        injection_sites: 'all' (conv e lineare) o 'conv' (solo feature map)

    Returns:
        HighLevelResult
    """
    if repeats < 1:
        raise CampaignError(f"Numero di ripetizioni non valido: {repeats}")
    if len(split) == 0:
        raise CampaignError("Test set vuoto")
    network.eval()
    images = split.normalize(split.images)
    labels = split.labels
    golden = predict_logits(network, images, batch_size).reshape(images.shape[0], -1)
    clean_accuracy = 100.0 * float(np.mean(np.argmax(golden, axis=1) == labels))
    sites = network.injection_sites(injection_sites)
    repeat_seqs = np.random.SeedSequence(seed_sequence.entropy, spawn_key=seed_sequence.spawn_key).spawn(repeats)

    def one_repeat(r):
        return _injected_repeat(network, images, labels, golden, repeat_seqs[r], batch_size,
                                magnitude_ceiling, descriptor, shared_geometry, r * images.shape[0], sites)

    result = HighLevelResult(clean_accuracy, [])
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        for r, (accuracy, records) in enumerate(pool.map(one_repeat, range(repeats))):
            result.noisy_accuracies.append(accuracy)
            result.records.extend(records)
            result.repeat_of.extend([r] * len(records))
            if progress_callback:
                progress_callback(100.0 * (r + 1) / repeats)
    return result


def measure_inference_time(network, images, rounds=3):
    """Tempo (secondi) del forward pulito di un batch, minimo su alcuni giri"""
    network.eval()
    timings = []
    for _ in range(rounds):
        start = time.perf_counter()
        network.forward(images)
        timings.append(time.perf_counter() - start)
    return {'batch_size': int(images.shape[0]), 'seconds_min': min(timings),
            'seconds_mean': float(np.mean(timings)), 'rounds': rounds}


def records_frame(records, repeat_of=None):
    """DataFrame con una riga per InjectionRecord"""
    frame = pd.DataFrame([record.to_row() for record in records],
                         columns=['trial_id', 'fault', 'golden_top1', 'faulty_top1',
                                  'outcome', 'max_abs_deviation', 'label'])
    if repeat_of is not None:
        frame.insert(0, 'repeat', repeat_of)
    return frame


def records_from_frame(frame):
    return [InjectionRecord.from_row(row) for row in frame.to_dict('records')]


class CampaignRunner:
    """Esegue e salva tutte le campagne di un braccio di ablazione"""

    def __init__(self, config, log_callback=None, progress_callback=None):
        """
        Inizializza il runner

        Args:
            config: ExperimentConfig
            log_callback: Funzione per logging
            progress_callback: Funzione per progress bar
        """
        self.config = config
        self.log_callback = log_callback
        self.progress_callback = progress_callback

    def log(self, message):
        """Invia messaggio al log se callback disponibile"""
        if self.log_callback:
            self.log_callback(message)

    def update_progress(self, value):
        """Aggiorna progress bar se callback disponibile"""
        if self.progress_callback:
            self.progress_callback(value)

    def _stage_progress(self, first, span):
        return lambda value: self.update_progress(first + span * value / 100.0)

    def run_arm(self, label, network, test_split, output_dir, campaign_seed, descriptor=None):
        """
        Campagna completa per una rete

        Args:
            label: Nome del braccio
            network: Rete addestrata
            test_split: DatasetSplit di test
            output_dir: Cartella del braccio
            campaign_seed: SeedSequence dello stream 'campaign' (uguale per tutti i bracci)
            descriptor: FaultModelDescriptor opzionale

        Returns:
            dict: riepilogo scritto anche in campaign_summary.json
        """
        config = self.config
        campaign = config.campaign
        if campaign.trials < 1:
            raise CampaignError(f"Numero di prove configurato non valido: {campaign.trials}")
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        sequences = campaign_sequences(campaign_seed)
        injection = config.eval_injection

        self.log(f"🎯 Campagna di alto livello [{label}]: {injection.repeats} ripetizioni, "
                 f"tetto magnitudo {config.magnitude_ceiling:g}")
        highlevel = run_highlevel_campaign(
            network, test_split, config.magnitude_ceiling, sequences['highlevel'],
            repeats=injection.repeats, batch_size=injection.batch_size, descriptor=descriptor,
            shared_geometry=injection.shared_geometry, workers=config.workers,
            progress_callback=self._stage_progress(0, 40), injection_sites=injection.injection_sites,
        )
        records_frame(highlevel.records, highlevel.repeat_of).to_csv(
            output_dir / 'highlevel_records.csv', index=False)
        pd.DataFrame({
            'repeat': range(len(highlevel.noisy_accuracies)),
            'clean_accuracy': highlevel.clean_accuracy,
            'noisy_accuracy': highlevel.noisy_accuracies,
            'regret': [regret(highlevel.clean_accuracy, a) for a in highlevel.noisy_accuracies],
        }).to_csv(output_dir / 'highlevel_accuracy.csv', index=False)
        self.log(f"   Accuratezza pulita {highlevel.clean_accuracy:.2f}%, con guasti "
                 f"{highlevel.mean_noisy_accuracy:.2f}%, regret {highlevel.regret:.2f}")

        summary = {
            'arm': label,
            'clean_accuracy': highlevel.clean_accuracy,
            'noisy_accuracies': highlevel.noisy_accuracies,
            'mean_noisy_accuracy': highlevel.mean_noisy_accuracy,
            'regret': highlevel.regret,
            'magnitude_ceiling': config.magnitude_ceiling,
            'avf': {'highlevel': aggregate_avf(highlevel.records, f"{label}/highlevel").to_row()},
        }

        sample = test_split.normalize(test_split.images[:campaign.sample_size])
        sample_labels = test_split.labels[:campaign.sample_size]
        value_model = PowerLawReplace(campaign.alpha, campaign.xmin)
        kinds = [FaultKind(kind) for kind in campaign.fault_kinds]
        for position, kind in enumerate(kinds):
            self.log(f"🔬 Campagna a livello di istruzione [{label}]: {campaign.trials} prove {kind.value}")
            span = 50.0 / len(kinds)
            records = run_instruction_campaign(
                network, sample, campaign.trials, kind,
                np.random.default_rng(sequences[kind.value]), labels=sample_labels,
                value_model=value_model, workers=config.workers,
                progress_callback=self._stage_progress(40 + position * span, span),
            )
            records_frame(records).to_csv(output_dir / f'{kind.value}_records.csv', index=False)
            report = aggregate_avf(records, f"{label}/{kind.value}")
            summary['avf'][kind.value] = report.to_row()
            self.log(f"   Critical SDC {report.fractions[OutcomeClass.CRITICAL_SDC]:.3f}, "
                     f"Tolerable SDC {report.fractions[OutcomeClass.TOLERABLE_SDC]:.3f}")

        timing_images = test_split.normalize(test_split.images[:campaign.timing_batch])
        timing = measure_inference_time(network, timing_images)
        with open(output_dir / 'inference_timing.json', 'w', encoding='utf-8') as f:
            json.dump(timing, f, indent=2)
        self.log(f"⏱️ Inferenza di {timing['batch_size']} immagini: {timing['seconds_min'] * 1000:.1f} ms")

        with open(output_dir / 'campaign_summary.json', 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        self.update_progress(100)
        return summary

