"""Evaluation quantities: label-noise levels, detection confusion, relabel quality."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


def ground_truth_noise(dataset, partition, labels=None) -> np.ndarray:
    """Per-client fraction of samples whose label differs from the true label.

    ``labels`` defaults to ``dataset.given_labels``; pass a snapshot to score a
    checkpoint.
    """
    labels = dataset.given_labels if labels is None else np.asarray(labels)
    wrong = labels != dataset.true_labels
    return np.array([wrong[ix].mean() if len(ix) else 0.0 for ix in partition.client_indices])


def noise_estimation_error(true_levels, estimated_levels) -> float:
    """Mean absolute error between two per-client noise vectors."""
    a = np.asarray(true_levels, dtype=float)
    b = np.asarray(estimated_levels, dtype=float)
    if a.shape != b.shape:
        raise ParameterError("noise vectors must have equal length")
    if a.size == 0:
        return 0.0
    return float(np.mean(np.abs(a - b)))


@dataclass
class DetectionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        # empty detected set: reported as 1, see precision_undefined
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def precision_undefined(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def detection_counts(client_size: int, truth, detected, universe=None) -> DetectionCounts:
    """Confusion of a detected-noisy set against a truly-noisy set within one client."""
    truth, detected = set(np.asarray(truth).tolist()), set(np.asarray(detected).tolist())
    if universe is not None:
        universe = set(np.asarray(universe).tolist())
        if not truth <= universe or not detected <= universe:
            raise ParameterError("index sets must lie inside the client's samples")
    tp = len(truth & detected)
    fp = len(detected - truth)
    fn = len(truth - detected)
    return DetectionCounts(tp, fp, client_size - tp - fp - fn, fn)


@dataclass
class ClientRelabelStats:
    client: int
    size: int
    noise_by_checkpoint: dict[str, float]
    detection: DetectionCounts
    labels_changed: int
    relabel_precision: float
    relabel_recall: float


@dataclass
class RelabelReport:
    clients: list[ClientRelabelStats] = field(default_factory=list)

    @property
    def pooled(self) -> DetectionCounts:
        total = DetectionCounts(0, 0, 0, 0)
        for c in self.clients:
            total = total + c.detection
        return total

    def rows(self) -> list[dict]:
        out = []
        for c in self.clients:
            row = {"client": c.client, "size": c.size}
            row.update({f"noise_{k}": v for k, v in c.noise_by_checkpoint.items()})
            d = c.detection
            row.update(
                tp=d.tp, fp=d.fp, tn=d.tn, fn=d.fn,
                detect_precision=d.precision, detect_precision_undefined=d.precision_undefined,
                detect_recall=d.recall, labels_changed=c.labels_changed,
                relabel_precision=c.relabel_precision, relabel_recall=c.relabel_recall,
            )
            out.append(row)
        return out


def sample_identification_confusion(client_sizes, flipped_truth, detected_noisy) -> RelabelReport:
    """Per-client and pooled detection statistics (no relabel information)."""
    report = RelabelReport()
    for k, (size, truth, det) in enumerate(zip(client_sizes, flipped_truth, detected_noisy)):
        report.clients.append(ClientRelabelStats(k, int(size), {}, detection_counts(int(size), truth, det), 0, 1.0, 1.0))
    return report


def relabel_report(dataset, partition, checkpoints: dict[str, np.ndarray], truth_sets, detected_sets,
                   before: str, after: str) -> RelabelReport:
    """Full per-client report.

    ``checkpoints`` maps checkpoint name to a label snapshot. Relabel quality
    compares the ``before`` and ``after`` snapshots: precision is the share of
    changed labels that are now correct, recall the share of initially wrong
    labels that are now correct.
    """
    true = dataset.true_labels
    lb, la = checkpoints[before], checkpoints[after]
    report = RelabelReport()
    for k, ix in enumerate(partition.client_indices):
        noise = {name: float((snap[ix] != true[ix]).mean()) for name, snap in checkpoints.items()}
        changed = ix[lb[ix] != la[ix]]
        wrong_before = ix[lb[ix] != true[ix]]
        prec = float((la[changed] == true[changed]).mean()) if len(changed) else 1.0
        rec = float((la[wrong_before] == true[wrong_before]).mean()) if len(wrong_before) else 1.0
        det = detection_counts(len(ix), truth_sets[k], detected_sets[k])
        report.clients.append(ClientRelabelStats(k, len(ix), noise, det, len(changed), prec, rec))
    return report


def confusion_matrix(dataset, indices=None, labels=None) -> np.ndarray:
    """Counts with rows = true class and columns = observed label.

    ``labels`` selects the observed labels (a checkpoint snapshot); it defaults
    to the current given labels.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    observed = dataset.given_labels if labels is None else np.asarray(labels)
    m = dataset.n_classes
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (dataset.true_labels[idx], observed[idx]), 1)
    return cm
