"""Small classifiers with analytic gradients, mixup, and local SGD training.

Weights are flat ``float64`` arrays; each classifier exposes a ``layout`` of
named blocks so a flat vector can be viewed as matrices without copying.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ParameterError
from .seeding import as_rng


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Classifier:
    """Shared plumbing; subclasses define ``layout``, ``_fan_in`` and the math."""

    input_dim: int
    n_classes: int
    layout: list[tuple[str, tuple[int, ...]]]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def unflatten(self, weights: np.ndarray) -> dict[str, np.ndarray]:
        weights = np.asarray(weights)
        if weights.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} weights, got shape {weights.shape}")
        blocks, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            blocks[name] = weights[offset : offset + size].reshape(shape)
            offset += size
        return blocks

    def init(self, seed=0) -> np.ndarray:
        """Uniform in +-1/sqrt(fan_in) for every block."""
        rng = as_rng(seed)
        parts = []
        for name, shape in self.layout:
            bound = 1.0 / np.sqrt(self._fan_in(name))
            parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        return np.concatenate(parts)

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ParameterError(f"input dimension {x.shape[-1]} != {self.input_dim}")
        return x

    def predict_proba(self, weights, x) -> np.ndarray:
        x = self._check_x(x)
        return softmax(self.logits(weights, x))

    def loss_and_grad(self, weights, x, y_soft) -> tuple[float, np.ndarray]:
        """Mean cross-entropy against soft targets and its gradient."""
        raise NotImplementedError

    def logits(self, weights, x) -> np.ndarray:
        raise NotImplementedError

    def _fan_in(self, block: str) -> int:
        raise NotImplementedError


class SoftmaxRegression(Classifier):
    """Multinomial logistic regression."""

    def __init__(self, input_dim: int, n_classes: int):
        self.input_dim, self.n_classes = int(input_dim), int(n_classes)
        self.layout = [("W", (self.input_dim, self.n_classes)), ("b", (self.n_classes,))]

    def _fan_in(self, block):
        return self.input_dim

    def logits(self, weights, x):
        p = self.unflatten(weights)
        return x @ p["W"] + p["b"]

    def loss_and_grad(self, weights, x, y_soft):
        x = self._check_x(x)
        p = self.unflatten(weights)
        z = x @ p["W"] + p["b"]
        logp = log_softmax(z)
        n = len(x)
        loss = -float((y_soft * logp).sum()) / n
        dz = (np.exp(logp) - y_soft) / n
        grad = np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
        return loss, grad


class MLP(Classifier):
    """One hidden ReLU layer followed by a linear softmax head."""

    def __init__(self, input_dim: int, n_classes: int, hidden: int = 64):
        self.input_dim, self.n_classes, self.hidden = int(input_dim), int(n_classes), int(hidden)
        self.layout = [
            ("W1", (self.input_dim, self.hidden)),
            ("b1", (self.hidden,)),
            ("W2", (self.hidden, self.n_classes)),
            ("b2", (self.n_classes,)),
        ]

    def _fan_in(self, block):
        return self.input_dim if block in ("W1", "b1") else self.hidden

    def logits(self, weights, x):
        p = self.unflatten(weights)
        h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
        return h @ p["W2"] + p["b2"]

    def loss_and_grad(self, weights, x, y_soft):
        x = self._check_x(x)
        p = self.unflatten(weights)
        a = x @ p["W1"] + p["b1"]
        h = np.maximum(a, 0.0)
        z = h @ p["W2"] + p["b2"]
        logp = log_softmax(z)
        n = len(x)
        loss = -float((y_soft * logp).sum()) / n
        dz = (np.exp(logp) - y_soft) / n
        dh = (dz @ p["W2"].T) * (a > 0)
        grad = np.concatenate(
            [(x.T @ dh).ravel(), dh.sum(axis=0), (h.T @ dz).ravel(), dz.sum(axis=0)]
        )
        return loss, grad


def build_model(kind: str, input_dim: int, n_classes: int, hidden: int = 64) -> Classifier:
    if kind == "softmax":
        return SoftmaxRegression(input_dim, n_classes)
    if kind == "mlp":
        return MLP(input_dim, n_classes, hidden)
    raise ParameterError(f"unknown model kind {kind!r}")


def forward(model: Classifier, weights, x) -> np.ndarray:
    """Softmax prediction for one input vector or a batch of them."""
    return model.predict_proba(weights, x)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def per_sample_loss(model: Classifier, weights, dataset, indices) -> np.ndarray:
    """Plain cross-entropy of each sample against its given label, in index order."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise ParameterError("indices must be non-empty")
    logp = log_softmax(model.logits(weights, model._check_x(dataset.features[idx])))
    return -logp[np.arange(len(idx)), dataset.given_labels[idx]]


def evaluate(model: Classifier, weights, dataset, indices=None) -> float:
    """Accuracy against the true labels; argmax ties go to the lowest class."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise ParameterError("indices must be non-empty")
    pred = np.argmax(model.logits(weights, model._check_x(dataset.features[idx])), axis=1)
    return float(np.mean(pred == dataset.true_labels[idx]))


def weight_distance_sq(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"weight layouts differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


@dataclass
class MixedBatch:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    partners: np.ndarray


def mixup_batch(batch_x, batch_y_onehot, alpha: float, seed=0, lam=None) -> MixedBatch:
    """Mix each sample with a partner from a random permutation of the batch.

    One coefficient per pair, drawn from Beta(alpha, alpha). ``lam`` overrides
    the draw (scalar or per-sample array).
    """
    x = np.asarray(batch_x, dtype=float)
    y = np.asarray(batch_y_onehot, dtype=float)
    if len(x) == 0:
        raise ParameterError("batch must be non-empty")
    if alpha <= 0:
        raise ParameterError("mixup alpha must be positive")
    rng = as_rng(seed)
    partners = rng.permutation(len(x))
    if lam is None:
        lam = rng.beta(alpha, alpha, size=len(x))
    else:
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (len(x),)).copy()
    col = lam[:, None]
    return MixedBatch(col * x + (1 - col) * x[partners], col * y + (1 - col) * y[partners], lam, partners)


@dataclass
class LocalTrainConfig:
    epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.03
    momentum: float = 0.5
    mixup_alpha: float = 0.0
    prox_beta: float = 0.0
    prox_mu_hat: float = 0.0
    anchor_weights: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ParameterError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.mixup_alpha < 0 or self.prox_beta < 0 or not 0 <= self.prox_mu_hat <= 1:
            raise ParameterError("mixup_alpha, prox_beta must be >= 0 and prox_mu_hat in [0, 1]")


def local_objective(model: Classifier, weights, x, y_soft, prox_coef: float = 0.0, anchor=None):
    """Cross-entropy plus ``prox_coef * ||w - anchor||^2``; returns (loss, grad)."""
    loss, grad = model.loss_and_grad(weights, x, y_soft)
    if prox_coef and anchor is not None:
        diff = weights - anchor
        loss += prox_coef * float(diff @ diff)
        grad = grad + 2.0 * prox_coef * diff
    return loss, grad


def local_train(model: Classifier, weights, dataset, indices, cfg: LocalTrainConfig) -> np.ndarray:
    """SGD with momentum over shuffled mini-batches of the client's samples."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise ParameterError("indices must be non-empty")
    rng = as_rng(cfg.seed)
    w = np.array(weights, dtype=float)
    anchor = w.copy() if cfg.anchor_weights is None else np.asarray(cfg.anchor_weights, dtype=float)
    prox_coef = cfg.prox_beta * cfg.prox_mu_hat
    velocity = np.zeros_like(w)
    x_all = dataset.features[idx]
    y_all = one_hot(dataset.given_labels[idx], dataset.n_classes)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(idx))
        for b, start in enumerate(range(0, len(idx), cfg.batch_size)):
            sel = order[start : start + cfg.batch_size]
            xb, yb = x_all[sel], y_all[sel]
            if cfg.mixup_alpha > 0:
                mixed = mixup_batch(xb, yb, cfg.mixup_alpha, seed=rng)
                xb, yb = mixed.x, mixed.y
            loss, grad = local_objective(model, w, xb, yb, prox_coef, anchor)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            velocity = cfg.momentum * velocity + grad
            w -= cfg.learning_rate * velocity
    return w
