"""
Confusion matrices, per-class precision/recall/F1 and CSV report files.

All real numbers in the CSV outputs use fixed 6-decimal formatting, so a
report read back with ``read_metrics_csv`` equals the original rounded to
6 decimals.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from logzero import logger
from tabulate import tabulate

from .errors import BadId, EmptyMatrix, LengthMismatch
from .utils import ensure_dir


FLOAT_FORMAT = '%.6f'


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = number of samples of true class i predicted as j."""
    counts: np.ndarray
    labels: tuple

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def support(self):
        return self.counts.sum(axis=1)

    @property
    def trace(self):
        return int(np.trace(self.counts))

    def to_frame(self):
        df = pd.DataFrame(self.counts, index=list(self.labels), columns=list(self.labels))
        df.index.name = 'true'
        return df


@dataclass(frozen=True)
class MetricsReport:
    labels: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    precision_undefined: np.ndarray
    recall_undefined: np.ndarray

    def to_frame(self):
        """Per-class rows, then ``macro`` and ``accuracy`` rows."""
        undefined = [';'.join(name for name, flag in (('precision', p), ('recall', r)) if flag)
                     for p, r in zip(self.precision_undefined, self.recall_undefined)]
        df = pd.DataFrame({
            'class': list(self.labels),
            'precision': self.precision,
            'recall': self.recall,
            'f1': self.f1,
            'support': self.support.astype(np.int64),
            'undefined': undefined,
        })
        total = int(self.support.sum())
        summary = pd.DataFrame({
            'class': ['macro', 'accuracy'],
            'precision': [self.macro_precision, np.nan],
            'recall': [self.macro_recall, np.nan],
            'f1': [self.macro_f1, self.accuracy],
            'support': [total, total],
            'undefined': ['', ''],
        })
        return pd.concat([df, summary], ignore_index=True)


def confusion_matrix(preds, targets, n_classes, labels=None):
    """
    Raises
    ------
    LengthMismatch, BadId
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if preds.size != targets.size:
        raise LengthMismatch(f'{preds.size} predictions vs {targets.size} targets')
    for name, ids in (('prediction', preds), ('target', targets)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise BadId(f'{name} ids must lie in 0..{n_classes - 1}')
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (targets, preds), 1)
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, labels)


def _safe_ratio(numerator, denominator):
    numerator = numerator.astype(np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out, denominator == 0


def precision_recall_f1(cm):
    """
    Per-class metrics with 0/0 taken as 0 (and flagged). Macro averages run
    over the classes with nonzero support.

    Raises
    ------
    EmptyMatrix
    """
    if cm.total < 1:
        raise EmptyMatrix('confusion matrix has no samples')
    diagonal = np.diag(cm.counts)
    support = cm.support
    precision, precision_undefined = _safe_ratio(diagonal, cm.counts.sum(axis=0))
    recall, recall_undefined = _safe_ratio(diagonal, support)
    f1, _ = _safe_ratio(2.0 * precision * recall, precision + recall)
    present = support > 0
    return MetricsReport(
        labels=cm.labels,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        accuracy=cm.trace / cm.total,
        precision_undefined=precision_undefined,
        recall_undefined=recall_undefined,
    )


def most_confused_pairs(cm, top=5):
    """Off-diagonal (true label, predicted label, count) triples, largest first."""
    off = cm.counts.copy()
    np.fill_diagonal(off, 0)
    rows, cols = np.nonzero(off)
    order = sorted(zip(rows, cols), key=lambda rc: (-off[rc], rc[0], rc[1]))
    return [(cm.labels[i], cm.labels[j], int(off[i, j])) for i, j in order[:top]]


def log_confusion(cm, title='Confusion matrix'):
    rows = [[label] + list(row) for label, row in zip(cm.labels, cm.counts)]
    logger.info('\n' + title + '\n' + len(title) * '-' + '\n'
                + tabulate(rows, headers=['true\\pred'] + list(cm.labels), tablefmt='orgtbl'))


def write_report(report, cm, log, out_dir, predictions=None):
    """
    Write metrics.csv, confusion.csv and curves.csv (the training log, when
    given) into ``out_dir``. ``predictions`` (records with path, true,
    predicted) additionally yields predictions.csv and misclassified.csv.
    """
    out_dir = ensure_dir(out_dir)
    report.to_frame().to_csv(out_dir / 'metrics.csv', index=False, float_format=FLOAT_FORMAT)
    cm.to_frame().to_csv(out_dir / 'confusion.csv')
    if log is not None:
        log.to_frame().to_csv(out_dir / 'curves.csv', index=False, float_format=FLOAT_FORMAT)
    if predictions is not None:
        df = pd.DataFrame(list(predictions), columns=['path', 'true', 'predicted'])
        df['correct'] = df['true'] == df['predicted']
        df.to_csv(out_dir / 'predictions.csv', index=False)
        df[~df['correct']].to_csv(out_dir / 'misclassified.csv', index=False)
    logger.info(f'Wrote report to {out_dir}: macro_f1={report.macro_f1:.4f} '
                f'accuracy={report.accuracy:.4f}')


def read_metrics_csv(path):
    """Rebuild a ``MetricsReport`` from metrics.csv."""
    df = pd.read_csv(Path(path), keep_default_na=False, na_values=[''],
                     dtype={'class': str, 'undefined': str})
    summary = df.set_index('class').loc[['macro', 'accuracy']]
    per_class = df.iloc[:-2]
    undefined = per_class['undefined'].fillna('')
    return MetricsReport(
        labels=tuple(per_class['class']),
        precision=per_class['precision'].to_numpy(dtype=np.float64),
        recall=per_class['recall'].to_numpy(dtype=np.float64),
        f1=per_class['f1'].to_numpy(dtype=np.float64),
        support=per_class['support'].to_numpy(dtype=np.int64),
        macro_precision=float(summary.loc['macro', 'precision']),
        macro_recall=float(summary.loc['macro', 'recall']),
        macro_f1=float(summary.loc['macro', 'f1']),
        accuracy=float(summary.loc['accuracy', 'f1']),
        precision_undefined=undefined.str.contains('precision').to_numpy(),
        recall_undefined=undefined.str.contains('recall').to_numpy(),
    )
