"""Maximum-likelihood local intrinsic dimensionality over prediction vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ParameterError

DEFAULT_K = 20
CAP_PER_DIM = 10.0


@dataclass(frozen=True)
class NeighborDistances:
    distances: np.ndarray  # ascending, strictly positive
    dim: int = 1

    @property
    def k(self) -> int:
        return len(self.distances)

    @property
    def cap(self) -> float:
        return CAP_PER_DIM * self.dim


def _coordinate_sum(diff: np.ndarray) -> np.ndarray:
    # accumulate squared coordinates left to right so every distance is the
    # plain sequential sum, independent of numpy's vectorised reduction order
    acc = np.zeros(diff.shape[:-1])
    for j in range(diff.shape[-1]):
        acc += diff[..., j] * diff[..., j]
    return acc


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    # broadcast difference rather than the Gram trick so duplicates give exact zeros
    return np.sqrt(_coordinate_sum(points[:, None, :] - points[None, :, :]))


def knn_distances(points, reference_index: int, k: int) -> NeighborDistances:
    """Distances from ``points[reference_index]`` to its k nearest distinct neighbours.

    The reference point and any zero-distance duplicates are skipped; the
    next-nearest points fill their places.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if k < 1:
        raise ParameterError("k must be positive")
    if len(pts) < k + 1:
        raise ParameterError(f"need at least k+1={k + 1} points, got {len(pts)}")
    diff = pts - pts[reference_index]
    d = np.sqrt(_coordinate_sum(diff))
    d = np.delete(d, reference_index)
    d = np.sort(d[d > 0])
    if len(d) < k:
        raise DegenerateGeometryError(
            f"point {reference_index} has only {len(d)} positive-distance neighbours (k={k})"
        )
    return NeighborDistances(d[:k], pts.shape[1])


def lid_mle(nd, cap: float | None = None) -> float:
    """MLE of local intrinsic dimension from ascending neighbour distances.

    ``-1 / mean(log(r_i / r_max))``. When every distance equals ``r_max`` the
    mean is zero and ``cap`` is returned instead.
    """
    if isinstance(nd, NeighborDistances):
        r = nd.distances
        cap = nd.cap if cap is None else cap
    else:
        r = np.asarray(nd, dtype=float)
        cap = CAP_PER_DIM if cap is None else cap
    if len(r) == 0 or (r <= 0).any():
        raise ParameterError("distances must be non-empty and strictly positive")
    mean_log = np.mean(np.log(r / r.max()))
    if mean_log == 0.0:
        return float(cap)
    return float(-1.0 / mean_log)


def lid_per_point(predictions, k: int = DEFAULT_K) -> np.ndarray:
    """LID estimate for every row of ``predictions``; NaN where no neighbour is positive.

    A point with fewer than ``k`` positive-distance neighbours uses as many as
    it has.
    """
    preds = np.asarray(predictions, dtype=float)
    if preds.ndim != 2:
        raise ParameterError("predictions must be a 2-D array")
    n, dim = preds.shape
    if k < 1:
        raise ParameterError("k must be positive")
    if n < k + 1:
        raise ParameterError(f"need at least k+1={k + 1} prediction vectors, got {n}")
    cap = CAP_PER_DIM * dim
    d = pairwise_distances(preds)
    d[d == 0] = np.inf  # also removes the diagonal
    d = np.sort(d, axis=1)[:, :k]
    finite = np.isfinite(d)
    n_avail = finite.sum(axis=1)
    out = np.full(n, np.nan)
    for i in np.flatnonzero(n_avail > 0):
        r = d[i, : n_avail[i]]
        mean_log = np.mean(np.log(r / r[-1]))
        out[i] = cap if mean_log == 0.0 else -1.0 / mean_log
    return out


def lid_score_details(predictions, k: int = DEFAULT_K) -> tuple[float, int]:
    """Return ``(score, n_skipped)``; a fully collapsed set scores the cap."""
    per_point = lid_per_point(predictions, k)
    ok = ~np.isnan(per_point)
    n_skipped = int((~ok).sum())
    if not ok.any():
        return CAP_PER_DIM * np.asarray(predictions).shape[1], n_skipped
    return float(np.mean(per_point[ok])), n_skipped


def lid_score(predictions, k: int = DEFAULT_K) -> float:
    """Mean LID estimate over the prediction vectors of one (dataset, model) pair."""
    return lid_score_details(predictions, k)[0]
