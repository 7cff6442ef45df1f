"""Synthetic datasets, client partitions and the federated label-noise model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .seeding import as_rng


@dataclass
class Dataset:
    """Features plus two label arrays.

    ``true_labels`` never change after construction; ``given_labels`` is what
    training sees and is the array that noise injection and relabeling write to.
    """

    features: np.ndarray
    true_labels: np.ndarray
    given_labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.given_labels = np.array(self.given_labels, dtype=np.int64)
        n = len(self.features)
        if n < 1:
            raise ParameterError("dataset must contain at least one sample")
        if len(self.true_labels) != n or len(self.given_labels) != n:
            raise ParameterError("features and label arrays must have equal length")
        if self.n_classes < 1:
            raise ParameterError("n_classes must be positive")
        for name, arr in (("true_labels", self.true_labels), ("given_labels", self.given_labels)):
            if arr.min() < 0 or arr.max() >= self.n_classes:
                raise ParameterError(f"{name} outside [0, {self.n_classes})")
        self.true_labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "Dataset":
        return Dataset(self.features.copy(), self.true_labels.copy(), self.given_labels.copy(), self.n_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.true_labels[idx], self.given_labels[idx], self.n_classes)


@dataclass
class PartitionAssignment:
    client_indices: list[np.ndarray]

    def __post_init__(self):
        self.client_indices = [np.sort(np.asarray(ix, dtype=np.int64)) for ix in self.client_indices]

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices], dtype=np.int64)

    def validate(self, n_samples: int) -> None:
        seen = np.zeros(n_samples, dtype=bool)
        for k, ix in enumerate(self.client_indices):
            if len(ix) == 0:
                raise ParameterError(f"client {k} holds no samples")
            if ix.min() < 0 or ix.max() >= n_samples:
                raise ParameterError(f"client {k} holds an index outside [0, {n_samples})")
            if seen[ix].any() or len(np.unique(ix)) != len(ix):
                raise ParameterError(f"client {k} shares an index with another client")
            seen[ix] = True


@dataclass
class NoiseAssignment:
    noise_levels: np.ndarray
    flipped: list[np.ndarray] = field(default_factory=list)

    @property
    def noisy_clients(self) -> np.ndarray:
        return np.flatnonzero(self.noise_levels > 0)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_blobs(n_samples, n_classes, dim, cluster_std=1.0, class_center_scale=10.0, seed=0) -> Dataset:
    """Draw ``n_samples`` points from ``n_classes`` isotropic Gaussian blobs.

    Centers are uniform in ``[-scale, scale]^dim``. Class sizes differ by at
    most one; sample order is shuffled.
    """
    if n_classes < 1 or n_samples < n_classes:
        raise ParameterError("need n_samples >= n_classes >= 1")
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    if cluster_std < 0 or class_center_scale <= 0:
        raise ParameterError("cluster_std must be >= 0 and class_center_scale > 0")
    rng = as_rng(seed)
    centers = rng.uniform(-class_center_scale, class_center_scale, size=(n_classes, dim))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    features = centers[labels] + cluster_std * rng.standard_normal((n_samples, dim))
    return Dataset(features, labels, labels.copy(), n_classes)


def train_test_split(dataset: Dataset, n_test: int, seed=0) -> tuple[Dataset, Dataset]:
    if not 0 < n_test < len(dataset):
        raise ParameterError("n_test must lie strictly between 0 and the dataset size")
    perm = as_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def partition_iid(dataset: Dataset, n_clients: int, seed=0) -> PartitionAssignment:
    n = len(dataset)
    if n_clients < 1 or n_clients > n:
        raise ParameterError(f"cannot split {n} samples among {n_clients} clients")
    perm = as_rng(seed).permutation(n)
    return PartitionAssignment(np.array_split(perm, n_clients))


def sample_indicator_matrix(n_clients, n_classes, p, seed=0) -> np.ndarray:
    """Bernoulli(p) client-by-class ownership matrix.

    An all-zero column gets a single 1 at a uniformly chosen client; an
    all-zero row then gets a single 1 at a uniformly chosen class.
    """
    if not 0 < p <= 1:
        raise ParameterError("p must lie in (0, 1]")
    if n_clients < 1 or n_classes < 1:
        raise ParameterError("n_clients and n_classes must be positive")
    rng = as_rng(seed)
    phi = (rng.random((n_clients, n_classes)) < p).astype(np.int64)
    for j in np.flatnonzero(phi.sum(axis=0) == 0):
        phi[rng.integers(n_clients), j] = 1
    for i in np.flatnonzero(phi.sum(axis=1) == 0):
        phi[i, rng.integers(n_classes)] = 1
    return phi


def partition_noniid(dataset: Dataset, n_clients, p, alpha_dir, seed=0, phi=None) -> PartitionAssignment:
    """Class-wise Dirichlet allocation over the owners given by the indicator matrix."""
    if alpha_dir <= 0:
        raise ParameterError("alpha_dir must be positive")
    labels = dataset.true_labels
    counts = np.bincount(labels, minlength=dataset.n_classes)
    if (counts == 0).any():
        raise ParameterError("every class needs at least one sample")
    if len(dataset) < n_clients:
        raise ParameterError(f"cannot split {len(dataset)} samples among {n_clients} clients")
    rng = as_rng(seed)
    if phi is None:
        phi = sample_indicator_matrix(n_clients, dataset.n_classes, p, seed=rng)
    owner_of = np.full(len(dataset), -1, dtype=np.int64)
    for j in range(dataset.n_classes):
        owners = np.flatnonzero(phi[:, j])
        members = np.flatnonzero(labels == j)
        q = rng.dirichlet(np.full(len(owners), float(alpha_dir)))
        q = q / q.sum()
        owner_of[members] = owners[rng.choice(len(owners), size=len(members), p=q)]

    for i in range(n_clients):
        if (owner_of == i).any():
            continue
        # take one sample from the largest holder of a class this client owns
        best = None
        for j in np.flatnonzero(phi[i]):
            members = np.flatnonzero(labels == j)
            holders, held = np.unique(owner_of[members], return_counts=True)
            for h in holders[np.argsort(-held, kind="stable")]:
                if (owner_of == h).sum() >= 2:
                    cand = members[owner_of[members] == h]
                    if best is None or (owner_of == h).sum() > best[0]:
                        best = ((owner_of == h).sum(), cand[0])
                    break
        if best is None:
            raise ParameterError(f"client {i} cannot be given a sample")
        owner_of[best[1]] = i
    return PartitionAssignment([np.flatnonzero(owner_of == i) for i in range(n_clients)])


def apply_noise_model(dataset: Dataset, partition: PartitionAssignment, rho, tau, seed=0) -> NoiseAssignment:
    """Corrupt ``dataset.given_labels`` in place and report what was done.

    Each client is noisy with probability ``rho``; a noisy client draws its
    level from U(tau, 1) and resamples ``round(level * size)`` of its labels
    uniformly over all classes (the true class included).
    """
    if not 0 <= rho <= 1:
        raise ParameterError("rho must lie in [0, 1]")
    if not 0 <= tau < 1:
        raise ParameterError("tau must lie in [0, 1)")
    rng = as_rng(seed)
    levels = np.zeros(partition.n_clients)
    flipped = []
    for k, ix in enumerate(partition.client_indices):
        if rng.random() < rho:
            levels[k] = rng.uniform(tau, 1.0)
            count = min(round_half_up(levels[k] * len(ix)), len(ix))
            chosen = np.sort(rng.choice(ix, size=count, replace=False))
            dataset.given_labels[chosen] = rng.integers(0, dataset.n_classes, size=count)
            flipped.append(chosen)
        else:
            flipped.append(np.empty(0, dtype=np.int64))
    return NoiseAssignment(levels, flipped)
