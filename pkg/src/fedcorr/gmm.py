"""Two-component one-dimensional Gaussian mixture fitted by EM.

Used twice by the protocol: once over clients' cumulative LID scores and once,
on each noisy client, over per-sample losses. In both cases the component with
the larger mean is the "high" (noisy) side.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ITERS = 500
TOL = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    n_iters: int
    ll_history: list[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def high(self) -> int:
        """Index of the component with the larger mean."""
        return int(np.argmax(self.means))

    @classmethod
    def degenerate_fit(cls, values: np.ndarray) -> "GmmFit":
        m = float(values.mean()) if len(values) else 0.0
        return cls(np.array([1.0, 0.0]), np.array([m, m]), np.zeros(2), float("nan"), 0, [], True)


def _log_joint(x, weights, means, variances):
    # (n, 2) matrix of log(w_c) + log N(x | mu_c, var_c)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * (_LOG_2PI + np.log(variances) + (x[:, None] - means) ** 2 / variances)


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def responsibilities(values, fit: GmmFit) -> np.ndarray:
    """Posterior component probabilities, shape (n, 2); rows sum to 1."""
    x = np.asarray(values, dtype=float)
    lj = _log_joint(x, fit.weights, fit.means, fit.variances)
    return np.exp(lj - _logsumexp(lj)[:, None])


def fit_gmm2(values, max_iters: int = MAX_ITERS, tol: float = TOL, init_means=None) -> GmmFit:
    """Fit a two-component mixture to scalar ``values``.

    Initial means sit at the 10th and 90th percentiles (or ``init_means``),
    with equal weights and both variances equal to the sample variance.
    Variances are floored at ``1e-6 * (sample variance + 1e-12)``. Fewer than
    two distinct values yields a fit flagged ``degenerate``.
    """
    x = np.asarray(values, dtype=float).ravel()
    if len(x) < 2 or np.ptp(x) == 0:
        return GmmFit.degenerate_fit(x)
    n = len(x)
    var0 = float(x.var())
    floor = 1e-6 * (var0 + 1e-12)
    if init_means is None:
        means = np.percentile(x, [10.0, 90.0])
    else:
        means = np.asarray(init_means, dtype=float).copy()
    weights = np.array([0.5, 0.5])
    variances = np.full(2, max(var0, floor))

    history = []
    ll = float(_logsumexp(_log_joint(x, weights, means, variances)).sum())
    history.append(ll)
    it = 0
    for it in range(1, max_iters + 1):
        lj = _log_joint(x, weights, means, variances)
        resp = np.exp(lj - _logsumexp(lj)[:, None])
        nk = resp.sum(axis=0)
        if (nk <= 0).any():
            break
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
        new_ll = float(_logsumexp(_log_joint(x, weights, means, variances)).sum())
        history.append(new_ll)
        converged = abs(new_ll - ll) < tol
        ll = new_ll
        if converged:
            break
    weights = weights / weights.sum()
    return GmmFit(weights, means, variances, ll, it, history)


def split_by_gmm(values, fit: GmmFit) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(low_indices, high_indices)``.

    An index goes high only if the larger-mean component's posterior strictly
    exceeds 0.5. Degenerate fits put everything low.
    """
    x = np.asarray(values, dtype=float).ravel()
    idx = np.arange(len(x))
    if fit.degenerate or fit.means[0] == fit.means[1]:
        return idx, idx[:0]
    post_high = responsibilities(x, fit)[:, fit.high]
    is_high = post_high > 0.5
    return idx[~is_high], idx[is_high]
