"""
Evaluation protocols and their reports.

paired        restored vs clean references matched by file name: SSIM, MAE
distribution  restored set vs reference set: FID, KID mean ± std

Each report is written twice: a human-readable table shaped like the usual
results tables, and JSON lines (method, metric, value, std, config).
"""
import json
import os
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from main.exceptions import ParameterError
from main.imaging import to_unit

from .features import extract_features
from .metrics import fit_stats, format_kid, frechet_distance, kid, mae_normed, ssim

PAIRED = 'paired'
DISTRIBUTION = 'distribution'
MODES = (PAIRED, DISTRIBUTION)

COLUMNS = {
    PAIRED: (('ssim', 'SSIM ↑'), ('mae', 'MAE (normed) ↓')),
    DISTRIBUTION: (('fid', 'FID ↓'), ('kid', 'KID ↓')),
}


@dataclass
class MetricRecord:
    method: str
    metric: str
    value: float
    std: Optional[float] = None
    count: int = 0
    config: str = ''


class EvaluationReport:

    def __init__(self, mode, fingerprint=''):
        if mode not in MODES:
            raise ParameterError(f'unknown evaluation mode {mode!r}, expected one of {MODES}')
        self.mode = mode
        self.fingerprint = fingerprint
        self.records = []

    def add(self, method, metric, value, std=None, count=0):
        self.records.append(MetricRecord(method, metric, float(value), None if std is None else float(std),
                                         count, self.fingerprint))

    def value(self, method, metric):
        for record in self.records:
            if record.method == method and record.metric == metric:
                return record.value
        raise KeyError((method, metric))

    def format_cell(self, record):
        if record.metric == 'kid':
            return format_kid(record.value, record.std or 0.0)
        if record.metric == 'fid':
            return f'{record.value:.2f}'
        return f'{record.value:.3f}'

    def table(self):
        columns = COLUMNS[self.mode]
        methods = list(dict.fromkeys(record.method for record in self.records))
        cells = {(record.method, record.metric): self.format_cell(record) for record in self.records}

        header = ['Method'] + [title for _, title in columns]
        rows = [[method] + [cells.get((method, key), '-') for key, _ in columns] for method in methods]
        widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]

        def line(row):
            return ' | '.join(str(cell).ljust(width) for cell, width in zip(row, widths))

        rule = '-+-'.join('-' * width for width in widths)
        return '\n'.join([line(header), rule] + [line(row) for row in rows]) + '\n'

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, 'report.txt'), 'w', encoding='utf-8') as table_file:
            table_file.write(self.table())
        with open(os.path.join(directory, 'report.jsonl'), 'w', encoding='utf-8') as records_file:
            for record in self.records:
                records_file.write(json.dumps(asdict(record), sort_keys=True, ensure_ascii=False) + '\n')
        return directory


def match_pairs(names, grids, reference_names, reference_grids):
    """ align two directory listings by file stem """
    references = dict(zip(reference_names, reference_grids))
    missing = [name for name in names if name not in references]
    if missing:
        raise ParameterError(f'{len(missing)} images have no reference with the same name, e.g. {missing[0]!r}')
    if not names:
        raise ParameterError('no images to evaluate')
    return grids, [references[name] for name in names]


def paired_scores(restored, references, ssim_spec=None):
    """ per-pair (ssim, mae) on [-1, 1] grids """
    ssims, maes = [], []
    for output, reference in zip(restored, references):
        ssims.append(ssim(to_unit(reference), to_unit(output), ssim_spec))
        maes.append(mae_normed(reference, output))
    return np.array(ssims), np.array(maes)


def add_paired(report, method, restored, references, ssim_spec=None):
    ssims, maes = paired_scores(restored, references, ssim_spec)
    report.add(method, 'ssim', ssims.mean(), ssims.std(), len(ssims))
    report.add(method, 'mae', maes.mean(), maes.std(), len(maes))
    return ssims, maes


def add_distribution(report, method, images, reference_features, extractor,
                     kid_subset_size=100, kid_subsets=100, kid_seed=0):
    features = extract_features(images, extractor)
    fid = frechet_distance(fit_stats(features), fit_stats(reference_features))
    subset = min(kid_subset_size, features.shape[0], reference_features.shape[0])
    kid_mean, kid_std = kid(features, reference_features, subset, kid_subsets, kid_seed)
    report.add(method, 'fid', fid, count=len(features))
    report.add(method, 'kid', kid_mean, kid_std, count=len(features))
    return fid, kid_mean, kid_std
