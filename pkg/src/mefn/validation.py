"""Two-sample MMD testing, Q-Q pairs and sample diversity metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist


class ValidationError(ValueError):
    pass


def _points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("samples must be an (n, p) array")
    return x


def median_heuristic_bandwidth(x, y):
    pooled = np.vstack([_points(x), _points(y)])
    if pooled.shape[0] < 2:
        raise ValidationError("need at least two pooled points")
    sigma = float(np.median(pdist(pooled)))
    if sigma == 0.0:
        raise ValidationError("degenerate bandwidth")
    return sigma


def _sq_dists(a, b):
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf_kernel(a, b, sigma):
    return np.exp(-_sq_dists(_points(a), _points(b)) / (2.0 * sigma * sigma))


def mmd2_unbiased(x, y, sigma):
    x, y = _points(x), _points(y)
    nx, ny = x.shape[0], y.shape[0]
    if nx < 2 or ny < 2:
        raise ValidationError("each sample needs at least two points")
    kxx = rbf_kernel(x, x, sigma)
    kyy = rbf_kernel(y, y, sigma)
    kxy = rbf_kernel(x, y, sigma)
    sxx = (kxx.sum() - np.trace(kxx)) / (nx * (nx - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (ny * (ny - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class MMDTestResult:
    statistic: float
    p_value: float
    sigma: float
    null_statistics: np.ndarray


def _mmd_from_labels(K0, labels, nx, ny):
    """Unbiased MMD^2 for each row of a 0/1 label matrix over a zero-diagonal kernel."""
    a = labels
    b = 1.0 - labels
    ka = a @ K0
    sxx = np.einsum("ij,ij->i", ka, a)
    sxy = np.einsum("ij,ij->i", ka, b)
    syy = np.einsum("ij,ij->i", b @ K0, b)
    return sxx / (nx * (nx - 1)) + syy / (ny * (ny - 1)) - 2.0 * sxy / (nx * ny)


def mmd_permutation_test(x, y, n_perm, rng, sigma=None, chunk=250):
    """Permutation p-value (1 + #{perm >= observed}) / (1 + n_perm) with an RBF kernel."""
    if n_perm < 100:
        raise ValidationError("use at least 100 permutations")
    x, y = _points(x), _points(y)
    nx, ny = x.shape[0], y.shape[0]
    if sigma is None:
        sigma = median_heuristic_bandwidth(x, y)
    pooled = np.vstack([x, y])
    N = nx + ny
    K0 = np.exp(-_sq_dists(pooled, pooled) / (2.0 * sigma * sigma))
    np.fill_diagonal(K0, 0.0)
    # the diagonal blocks exclude i == j, so sums over x-x and y-y pairs match the U-statistic
    observed = float(_mmd_from_labels(K0, (np.arange(N) < nx)[None, :].astype(float), nx, ny)[0])
    null = np.empty(n_perm)
    done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        labels = np.zeros((k, N))
        for r in range(k):
            labels[r, rng.permutation(N)[:nx]] = 1.0
        null[done:done + k] = _mmd_from_labels(K0, labels, nx, ny)
        done += k
    p = (1.0 + np.sum(null >= observed)) / (1.0 + n_perm)
    return MMDTestResult(observed, float(p), float(sigma), null)


@dataclass
class DiversityReport:
    d_l2: float
    sst: float
    ssw: float
    ssb: float


def diversity_metrics(samples):
    """Groups are coordinates: SSW pools spread across samples at each coordinate,
    SSB the spread of the per-coordinate means around the grand mean."""
    z = _points(samples)
    n = z.shape[0]
    if n < 2:
        raise ValidationError("need at least two samples")
    grand = z.mean()
    col = z.mean(axis=0)
    sst = float(np.sum((z - grand) ** 2))
    ssw = float(np.sum((z - col) ** 2))
    ssb = float(n * np.sum((col - grand) ** 2))
    # mean over ordered pairs i != j of |z_i - z_j|^2 = 2 n / (n - 1) * sum of per-coordinate variances
    d_l2 = float(2.0 * np.sum(pdist(z, "sqeuclidean")) / (n * (n - 1)))
    return DiversityReport(d_l2, sst, ssw, ssb)


def qq_points(x, y, probs):
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValidationError("probabilities must lie strictly inside (0, 1)")
    qx = np.quantile(np.ravel(x), probs)
    qy = np.quantile(np.ravel(y), probs)
    return np.column_stack([qx, qy])


def qq_slope(pairs):
    """Least-squares slope of y-quantiles on x-quantiles (with intercept)."""
    pairs = np.asarray(pairs, dtype=float)
    return float(np.polyfit(pairs[:, 0], pairs[:, 1], 1)[0])
