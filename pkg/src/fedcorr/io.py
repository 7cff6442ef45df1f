"""Tabular dataset ingestion and export.

CSV layout: one sample per row, the class label first and then the feature
values. A header row is optional and is detected by its first cell not being
an integer. Floats are written with ``repr`` so export/ingest round-trips
exactly.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .errors import ParameterError


def ingest_csv(path, n_classes: int) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if rows:
        try:
            int(rows[0][0])
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise ParameterError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise ParameterError(f"{path}: need a label and at least one feature per row")
    labels, feats = [], []
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ParameterError(f"{path}: row {lineno} has {len(row)} cells, expected {width}")
        try:
            label = int(row[0])
            values = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise ParameterError(f"{path}: row {lineno}: non-numeric cell ({exc})") from exc
        if not 0 <= label < n_classes:
            raise ParameterError(f"{path}: row {lineno}: label {label} outside [0, {n_classes})")
        labels.append(label)
        feats.append(values)
    labels = np.array(labels, dtype=np.int64)
    return Dataset(np.array(feats, dtype=float), labels, labels.copy(), n_classes)


def export_csv(dataset: Dataset, path, header: bool = True, labels: str = "true") -> None:
    """Write ``dataset`` as label-first CSV (``labels`` selects true or given labels)."""
    lab = dataset.true_labels if labels == "true" else dataset.given_labels
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["label"] + [f"x{j}" for j in range(dataset.dim)])
        for y, x in zip(lab, dataset.features):
            w.writerow([int(y)] + [repr(float(v)) for v in x])
