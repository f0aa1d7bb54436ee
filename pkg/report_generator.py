"""
Generatore del report dello studio di ablazione
Aggrega le cartelle dei bracci (checkpoint, metriche, record di iniezione)
di uno o più run (uno per seme) in tabelle CSV, un riepilogo JSON e una
pagina HTML.
"""

import json
from pathlib import Path

import pandas as pd

from campaign_runner import records_from_frame
from checkpoint_manager import read_checkpoint, restore_network
from eval_metrics import OutcomeClass, aggregate_avf, regret, weight_stats
from experiment_config import ARMS
from html_templates import create_html_page, create_section, create_table, get_shared_css

RECORD_FILES = (
    ('highlevel', 'highlevel_records.csv'),
    ('bitflip', 'bitflip_records.csv'),
    ('warp', 'warp_records.csv'),
)
REQUIRED_FILES = ('checkpoint.ffrg', 'highlevel_accuracy.csv', 'highlevel_records.csv')
TABLE_FILES = {
    'regret': 'regret.csv',
    'regret_by_arm': 'regret_by_arm.csv',
    'avf': 'avf.csv',
    'avf_by_arm': 'avf_by_arm.csv',
    'weights': 'weights.csv',
    'weight_histograms': 'weight_histograms.csv',
}


class ReportError(ValueError):
    """Cartelle di run incomplete o non leggibili"""


def _to_native(value):
    # scalari numpy provenienti da pandas
    return value.item()


def _arm_rank(name):
    rank = {arm: i for i, arm in enumerate(ARMS)}
    return rank.get(name, len(rank)), name


def run_label(arm_dir):
    """Nome del run (cartella dell'esperimento) a cui appartiene il braccio"""
    return Path(arm_dir).parent.name


def discover_arm_dirs(paths):
    """
    Espande i percorsi in cartelle di braccio

    Un percorso è un braccio se contiene checkpoint.ffrg; altrimenti vengono
    prese le sottocartelle che lo contengono, nell'ordine dei bracci noti e
    poi in ordine alfabetico. Più run (ad esempio uno per seme) possono
    contenere gli stessi bracci; la coppia (run, braccio) deve essere unica.
    """
    arm_dirs = []
    for path in map(Path, paths):
        if not path.is_dir():
            raise ReportError(f"Cartella di run non trovata: {path}")
        if (path / 'checkpoint.ffrg').exists():
            arm_dirs.append(path)
            continue
        children = [child for child in path.iterdir() if (child / 'checkpoint.ffrg').exists()]
        children.sort(key=lambda child: _arm_rank(child.name))
        if not children:
            raise ReportError(f"Nessun braccio (checkpoint.ffrg) in {path}")
        arm_dirs.extend(children)

    keys = [f"{run_label(d)}/{d.name}" for d in arm_dirs]
    duplicates = sorted({key for key in keys if keys.count(key) > 1})
    if duplicates:
        raise ReportError(f"Bracci duplicati: {duplicates} (usare cartelle di run con nomi distinti)")
    for arm_dir in arm_dirs:
        missing = [name for name in REQUIRED_FILES if not (arm_dir / name).exists()]
        if missing:
            raise ReportError(f"{arm_dir}: file mancanti {missing} (eseguire prima train e campaign)")
    return arm_dirs


class ReportGenerator:
    """Costruisce le tabelle del report a partire dalle cartelle dei bracci"""

    def __init__(self, run_dirs, output_dir, log_callback=None, progress_callback=None):
        """
        Inizializza il generatore

        Args:
            run_dirs: Cartelle di braccio o di esperimento (anche una per seme)
            output_dir: Cartella del report
            log_callback: Funzione per logging
            progress_callback: Funzione per progress bar
        """
        self.arm_dirs = discover_arm_dirs(run_dirs)
        self.runs = list(dict.fromkeys(run_label(d) for d in self.arm_dirs))
        self.arms = sorted({d.name for d in self.arm_dirs}, key=_arm_rank)
        self.output_dir = Path(output_dir)
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

    # ===== TABELLE =====

    def _regret_row(self, run, arm, arm_dir):
        accuracy = pd.read_csv(arm_dir / 'highlevel_accuracy.csv')
        clean = float(accuracy['clean_accuracy'].iloc[0])
        noisy = float(accuracy['noisy_accuracy'].mean())
        return {
            'run': run,
            'arm': arm,
            'clean_accuracy': clean,
            'mean_noisy_accuracy': noisy,
            'noisy_accuracy_std': float(accuracy['noisy_accuracy'].std(ddof=0)),
            'repeats': int(len(accuracy)),
            'regret': regret(clean, noisy),
        }

    def _read_records(self, arm_dir):
        """Record per campagna presenti nella cartella del braccio"""
        result = {}
        for campaign, filename in RECORD_FILES:
            path = arm_dir / filename
            if not path.exists():
                continue
            records = records_from_frame(pd.read_csv(path, keep_default_na=False))
            if records:
                result[campaign] = records
        return result

    @staticmethod
    def _avf_row(keys, campaign, records, label):
        row = dict(keys)
        row['campaign'] = campaign
        row.update(aggregate_avf(records, label).to_row())
        del row['configuration']
        return row

    def _weight_rows(self, run, arm, arm_dir):
        network = restore_network(read_checkpoint(arm_dir / 'checkpoint.ffrg'))
        stats = weight_stats(network)
        summary = {
            'run': run,
            'arm': arm,
            'mean': stats.mean,
            'mean_abs': stats.mean_abs,
            'out_of_range': stats.out_of_range,
            'count': stats.count,
        }
        histogram = pd.DataFrame({
            'run': run,
            'arm': arm,
            'bin_left': stats.bin_edges[:-1],
            'bin_right': stats.bin_edges[1:],
            'count': stats.histogram,
        })
        return summary, histogram

    def _final_metrics(self, arm_dir):
        path = arm_dir / 'metrics.csv'
        if not path.exists():
            return {}
        metrics = pd.read_csv(path)
        return {k: (float(v) if k != 'epoch' else int(v)) for k, v in metrics.iloc[-1].items()}

    def _regret_by_arm(self, regret_table):
        """Media e deviazione standard (ddof 0) del regret di ogni braccio sui run"""
        grouped = regret_table.groupby('arm', sort=False)
        frame = pd.DataFrame({
            'runs': grouped['regret'].count(),
            'clean_accuracy': grouped['clean_accuracy'].mean(),
            'clean_accuracy_std': grouped['clean_accuracy'].std(ddof=0),
            'mean_noisy_accuracy': grouped['mean_noisy_accuracy'].mean(),
            'regret': grouped['regret'].mean(),
            'regret_std': grouped['regret'].std(ddof=0),
        })
        return frame.loc[self.arms].rename_axis('arm').reset_index()

    def build_tables(self):
        """
        Calcola le tabelle di regret, AVF e pesi

        Returns:
            dict: DataFrame 'regret', 'regret_by_arm', 'avf', 'avf_by_arm',
            'weights', 'weight_histograms' e dict 'training' (run -> braccio -> metriche)
        """
        regret_rows, avf_rows, weight_rows, histograms, training = [], [], [], [], {}
        pooled, pooled_runs = {}, {}
        for i, arm_dir in enumerate(self.arm_dirs):
            run, arm = run_label(arm_dir), arm_dir.name
            self.log(f"📊 Run {run}, braccio {arm}: {arm_dir}")
            regret_rows.append(self._regret_row(run, arm, arm_dir))
            for campaign, records in self._read_records(arm_dir).items():
                avf_rows.append(self._avf_row({'run': run, 'arm': arm}, campaign, records, f"{run}/{arm}"))
                pooled.setdefault((arm, campaign), []).extend(records)
                pooled_runs[(arm, campaign)] = pooled_runs.get((arm, campaign), 0) + 1
            summary, histogram = self._weight_rows(run, arm, arm_dir)
            weight_rows.append(summary)
            histograms.append(histogram)
            training.setdefault(run, {})[arm] = self._final_metrics(arm_dir)
            self.update_progress(100.0 * (i + 1) / len(self.arm_dirs))

        # record di tutti i run sommati per braccio e campagna
        avf_by_arm = [self._avf_row({'arm': arm, 'runs': pooled_runs[(arm, campaign)]}, campaign,
                                    pooled[(arm, campaign)], arm)
                      for arm in self.arms for campaign, _ in RECORD_FILES if (arm, campaign) in pooled]
        regret_table = pd.DataFrame(regret_rows)
        return {
            'regret': regret_table,
            'regret_by_arm': self._regret_by_arm(regret_table),
            'avf': pd.DataFrame(avf_rows),
            'avf_by_arm': pd.DataFrame(avf_by_arm),
            'weights': pd.DataFrame(weight_rows),
            'weight_histograms': pd.concat(histograms, ignore_index=True),
            'training': training,
        }

    # ===== SCRITTURA =====

    @staticmethod
    def _avf_summary(frame):
        avf = {}
        for row in frame.to_dict('records'):
            avf.setdefault(row['arm'], {})[row['campaign']] = {
                'total': int(row['total']),
                **{o.value: float(row[f'{o.value}_fraction']) for o in OutcomeClass},
                'sdc': float(row['sdc_fraction']),
                'critical_per_corrupted': float(row['critical_per_corrupted']),
            }
        return avf

    def _summary(self, tables):
        by_arm = tables['regret_by_arm'].to_dict('records')
        weights = tables['weights'].groupby('arm', sort=False)[['mean', 'mean_abs']].mean()
        by_run = {}
        for run in self.runs:
            regret_rows = tables['regret'][tables['regret']['run'] == run].to_dict('records')
            weight_rows = tables['weights'][tables['weights']['run'] == run].to_dict('records')
            avf_rows = tables['avf'][tables['avf']['run'] == run] if len(tables['avf']) else tables['avf']
            by_run[run] = {
                'regret': {r['arm']: float(r['regret']) for r in regret_rows},
                'clean_accuracy': {r['arm']: float(r['clean_accuracy']) for r in regret_rows},
                'weights': {r['arm']: {'mean': float(r['mean']), 'mean_abs': float(r['mean_abs'])}
                            for r in weight_rows},
                'avf': self._avf_summary(avf_rows),
                'training': tables['training'][run],
            }
        return {
            'runs': self.runs,
            'arms': self.arms,
            'regret': {r['arm']: float(r['regret']) for r in by_arm},
            'regret_std': {r['arm']: float(r['regret_std']) for r in by_arm},
            'clean_accuracy': {r['arm']: float(r['clean_accuracy']) for r in by_arm},
            'weights': {arm: {'mean': float(weights.loc[arm, 'mean']),
                              'mean_abs': float(weights.loc[arm, 'mean_abs'])} for arm in self.arms},
            'avf': self._avf_summary(tables['avf_by_arm']),
            'by_run': by_run,
        }

    def _html(self, tables):
        sections = [
            create_section("Regret per configurazione", create_table(tables['regret_by_arm'], 'regret'),
                           "Regret = accuratezza pulita - accuratezza media con guasti (punti percentuali), "
                           "media e deviazione standard sui run."),
            create_section("Regret per run", create_table(tables['regret'], 'regret')),
            create_section("AVF", create_table(tables['avf_by_arm'], 'critical_sdc_fraction'),
                           "Critical SDC: la classe predetta cambia rispetto all'esecuzione senza guasti."),
            create_section("Distribuzione dei pesi", create_table(tables['weights'], 'mean_abs')),
        ]
        subtitle = f"{len(self.runs)} run, {len(self.arms)} bracci: {', '.join(self.arms)}"
        return create_html_page("Studio di ablazione", '\n'.join(sections), subtitle)

    def generate(self):
        """
        Scrive le tabelle CSV (per run e per braccio), summary.json,
        index.html e styles.css

        Returns:
            dict: riepilogo (contenuto di summary.json)
        """
        self.log("=" * 60)
        self.log(f"📝 Generazione report in {self.output_dir}")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        tables = self.build_tables()

        for name, filename in TABLE_FILES.items():
            tables[name].to_csv(self.output_dir / filename, index=False)

        summary = self._summary(tables)
        with open(self.output_dir / 'summary.json', 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True, default=_to_native)
        with open(self.output_dir / 'styles.css', 'w', encoding='utf-8') as f:
            f.write(get_shared_css())
        with open(self.output_dir / 'index.html', 'w', encoding='utf-8') as f:
            f.write(self._html(tables))

        for row in tables['regret_by_arm'].to_dict('records'):
            self.log(f"   {row['arm']:<10} regret {row['regret']:.2f} ± {row['regret_std']:.2f}  "
                     f"pulita {row['clean_accuracy']:.2f}%  ({row['runs']} run)")
        self.log("✅ Report completato")
        return summary
