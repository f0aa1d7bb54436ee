"""
Fault-aware ResNet Guard - interfaccia a riga di comando
Sottocomandi train | campaign | report per lo studio di ablazione
(baseline, ReLU6, ReLU6 + fault-aware training, ordine attivazione/normalizzazione invertito).
"""

import argparse
import json
import sys
from dataclasses import asdict
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from campaign_runner import CampaignError, CampaignRunner
from checkpoint_manager import CheckpointError, load_checkpoint, save_checkpoint
from dataset_processor import DatasetFormatError, load_cifar10, synth_dataset
from eval_metrics import MetricsError
from experiment_config import (
    PROFILES,
    ConfigError,
    config_for_arm,
    eval_descriptor,
    load_experiment_config,
    seed_sequences,
)
from fault_models import FaultSpecError
from instruction_injector import InstructionSiteError
from model_zoo import ArchConfigError, build_resnet
from report_generator import ReportError, ReportGenerator
from tensor_core import ShapeError
from train_engine import FaultAwareTrainer, TrainingError

APP_TITLE = "FAULT-AWARE RESNET GUARD"
LOG_FILENAME = "LOG_OPERAZIONI.txt"
METRIC_COLUMNS = ['epoch', 'lr', 'train_loss', 'clean_test_accuracy', 'injected_batches', 'injected_images']

HANDLED_ERRORS = (
    ConfigError, DatasetFormatError, CheckpointError, CampaignError, ReportError, ShapeError,
    TrainingError, FaultSpecError, InstructionSiteError, ArchConfigError, MetricsError,
)


class ConsoleLogger:
    """Log su terminale con buffer per LOG_OPERAZIONI.txt e barra di avanzamento tqdm"""

    def __init__(self, stream=None):
        self.log_buffer = []
        self.stream = stream
        self.bar = None

    def log(self, message):
        """Aggiunge un messaggio al log (terminale e buffer)"""
        timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        self.log_buffer.append(f"[{timestamp}] {message}")
        tqdm.write(message, file=self.stream)

    def start_progress(self, description):
        self.close_progress()
        self.bar = tqdm(total=100, desc=description, file=self.stream, leave=False,
                        bar_format='{desc}: {percentage:3.0f}%|{bar}| {elapsed}')

    def progress(self, value):
        if self.bar is None:
            return
        self.bar.n = min(100.0, max(0.0, float(value)))
        self.bar.refresh()

    def close_progress(self):
        if self.bar is not None:
            self.bar.close()
            self.bar = None

    def save_log_file(self, output_dir):
        """Salva il log delle operazioni in un file .txt"""
        output_dir = Path(output_dir)
        log_file = output_dir / LOG_FILENAME
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
            with open(log_file, 'w', encoding='utf-8') as f:
                f.write("=" * 80 + "\n")
                f.write(f"{APP_TITLE} - LOG OPERAZIONI\n")
                f.write("=" * 80 + "\n\n")

                for entry in self.log_buffer:
                    f.write(f"{entry}\n")

                f.write("\n" + "=" * 80 + "\n")
                f.write(f"Fine log - {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
                f.write("=" * 80 + "\n")
            return str(log_file)
        except OSError as e:
            self.log(f"✗ Errore salvataggio log: {e}")
            return None


# ===== SUPPORTO =====

def load_datasets(config, logger):
    """Train e test split secondo la sezione dataset"""
    dataset = config.dataset
    if dataset.kind == 'cifar10':
        logger.log(f"📂 Caricamento CIFAR-10 da {dataset.path}")
        return load_cifar10(dataset.path, dataset.classes, dataset.limit_train, dataset.limit_test)
    logger.log(f"🧪 Dataset sintetico: {dataset.num_classes} classi, {dataset.samples} campioni, "
               f"immagini {dataset.image_size}x{dataset.image_size}")
    return synth_dataset(dataset.num_classes, dataset.samples, dataset.image_size, dataset.noise,
                         config.seeds.master, test_samples=dataset.test_samples)


def _write_experiment_echo(config, output_dir):
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / 'experiment.json', 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)


# ===== COMANDI =====

def cmd_train(config, logger):
    """
    Addestra ogni braccio configurato

    Scrive <output_dir>/<braccio>/checkpoint.ffrg e metrics.csv.
    """
    output_dir = Path(config.output_dir)
    train_split, test_split = load_datasets(config, logger)
    _write_experiment_echo(config, output_dir)
    sequences = seed_sequences(config.seeds)

    for arm in config.arms:
        arch, train_config = config_for_arm(config, arm)
        arm_dir = output_dir / arm
        arm_dir.mkdir(parents=True, exist_ok=True)
        logger.log("=" * 60)
        logger.log(f"🧠 Braccio {arm}: {arch.activation.value}, {arch.layer_order.value}, "
                   f"fault-aware={train_config.fault_aware}, profondità {arch.depth}")

        network = build_resnet(arch, sequences['init'])
        rng_streams = {
            'augment': np.random.default_rng(sequences['augment']),
            'fault': np.random.default_rng(sequences['fault']),
        }
        logger.start_progress(f"train {arm}")
        trainer = FaultAwareTrainer(network, train_config, rng_streams,
                                    log_callback=logger.log, progress_callback=logger.progress)
        history = trainer.fit(train_split, test_split)
        logger.close_progress()

        pd.DataFrame(history, columns=METRIC_COLUMNS).to_csv(arm_dir / 'metrics.csv', index=False)
        seeds_state = {
            'config': asdict(config.seeds),
            'augment': rng_streams['augment'].bit_generator.state,
            'fault': rng_streams['fault'].bit_generator.state,
        }
        path = save_checkpoint(network, {'epoch': train_config.epochs, 'step': trainer.state.step},
                               arm_dir / 'checkpoint.ffrg', seeds=seeds_state,
                               velocity=trainer.state.velocity)
        logger.log(f"💾 Checkpoint salvato: {path} ({network.parameter_count()} parametri)")
    return output_dir


def _campaign_targets(config, checkpoint, out_dir):
    if checkpoint is not None:
        path = Path(checkpoint)
        if not path.is_file():
            raise CheckpointError(f"Checkpoint non trovato: {path}")
        target_dir = Path(out_dir) if out_dir else path.parent
        return [(target_dir.name, path, None, target_dir)]
    output_dir = Path(config.output_dir)
    targets = []
    for arm in config.arms:
        path = output_dir / arm / 'checkpoint.ffrg'
        if not path.is_file():
            raise CheckpointError(f"Checkpoint del braccio {arm} non trovato: {path} (eseguire prima train)")
        targets.append((arm, path, config_for_arm(config, arm)[0], path.parent))
    return targets


def cmd_campaign(config, logger, checkpoint=None, out_dir=None):
    """
    Campagne di iniezione sui checkpoint addestrati

    Con --checkpoint elabora solo quel file e scrive in out_dir (default: accanto al file).
    """
    if config.campaign.trials < 1:
        raise ConfigError(f"campaign.trials deve essere >= 1, configurato {config.campaign.trials}")
    targets = _campaign_targets(config, checkpoint, out_dir)
    descriptor = eval_descriptor(config)
    _, test_split = load_datasets(config, logger)
    campaign_seed = seed_sequences(config.seeds)['campaign']

    summaries = []
    for label, path, expected, target_dir in targets:
        network = load_checkpoint(path, expected_config=expected)
        logger.log("=" * 60)
        logger.log(f"⚡ Campagna per {label} ({path})")
        logger.start_progress(f"campaign {label}")
        runner = CampaignRunner(config, log_callback=logger.log, progress_callback=logger.progress)
        summaries.append(runner.run_arm(label, network, test_split, target_dir, campaign_seed, descriptor))
        logger.close_progress()
    return summaries


def cmd_report(run_dirs, output_dir, logger):
    """Aggrega i bracci di uno o più run (uno per seme) nelle tabelle CSV, summary.json e index.html"""
    generator = ReportGenerator(run_dirs, output_dir, log_callback=logger.log,
                                progress_callback=logger.progress)
    logger.start_progress("report")
    summary = generator.generate()
    logger.close_progress()
    return summary


# ===== ENTRY POINT =====

def build_parser():
    parser = argparse.ArgumentParser(
        prog='ffrg_cli.py',
        description="Addestramento fault-aware e campagne di iniezione di guasti transitori",
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    def common(sub):
        sub.add_argument('--config', help="File JSON dell'esperimento")
        sub.add_argument('--profile', choices=sorted(PROFILES), default='desk', help="Profilo di default")
        sub.add_argument('--seed', type=int, help="Seme principale (sostituisce quello del file)")
        sub.add_argument('--out', help="Cartella di output")

    common(subparsers.add_parser('train', help="Addestra i bracci di ablazione"))
    campaign = subparsers.add_parser('campaign', help="Esegue le campagne di iniezione")
    common(campaign)
    campaign.add_argument('--checkpoint', help="Singolo checkpoint da analizzare")
    report = subparsers.add_parser('report', help="Genera il report dai run")
    common(report)
    report.add_argument('run_dirs', nargs='*', help="Cartelle di esperimento o di braccio")
    return parser


def main(argv=None, stream=None):
    """
    Esegue un sottocomando

    Returns:
        int: 0 in caso di successo, 1 se l'input non è valido
    """
    args = build_parser().parse_args(argv)
    logger = ConsoleLogger(stream)
    log_dir = Path(args.out) if args.out else None
    logger.log("=" * 60)
    logger.log(f"▶ {APP_TITLE} - {args.command}")

    try:
        if args.command == 'report' and args.run_dirs:
            log_dir = log_dir or Path(args.run_dirs[0]) / 'report'
            cmd_report(args.run_dirs, log_dir, logger)
        else:
            # per report --out è la cartella del report, non quella dei run
            run_out = None if args.command == 'report' else args.out
            config = load_experiment_config(args.config, args.profile, args.seed, run_out)
            if args.command == 'train':
                log_dir = cmd_train(config, logger)
            elif args.command == 'campaign':
                checkpoint = getattr(args, 'checkpoint', None)
                if checkpoint:
                    log_dir = log_dir or Path(checkpoint).parent
                else:
                    log_dir = Path(config.output_dir)
                cmd_campaign(config, logger, checkpoint, args.out)
            else:
                log_dir = log_dir or Path(config.output_dir) / 'report'
                cmd_report([config.output_dir], log_dir, logger)
    except HANDLED_ERRORS as e:
        logger.close_progress()
        logger.log(f"❌ ERRORE: {e}")
        if log_dir is not None and log_dir.exists():
            logger.save_log_file(log_dir)
        return 1

    logger.log(f"✅ Comando {args.command} completato")
    logger.save_log_file(log_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
