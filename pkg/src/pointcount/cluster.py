"""Clustering engines that turn heatmaps into counts and pointers.

Density-peak clustering reads the cluster count and memberships off one
decision rule (no count has to be supplied), which is what lets a heatmap
produce count and pointers simultaneously. The weighted Gaussian mixture
takes the count as input instead and fits that many components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .grids import BBox, Ellipse, Heatmap

GMM_VARIANCE_FLOOR = 1e-4
DENSITY_KERNEL_FRACTION = 0.02
RHO_MIN_FRACTION = 0.1
DELTA_MIN_FRACTION = 0.15


@dataclass
class WeightedPoints:
    """Columnar point set: image coordinates with positive heat weights."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (self.x.shape == self.y.shape == self.w.shape) or self.x.ndim != 1:
            raise DataError("x, y, w must be 1D arrays of equal length")
        if len(self.w) and self.w.min() <= 0:
            raise DataError("point weights must be positive")

    def __len__(self):
        return len(self.x)


def heatmap_to_points(hm: Heatmap, threshold: float = 0.0) -> WeightedPoints:
    """One weighted point per grid cell above threshold, at the cell center."""
    if threshold < 0:
        raise DataError("threshold must be non-negative")
    grid = hm.grid
    rows, cols = np.nonzero(grid > threshold)
    return WeightedPoints(
        (cols + 0.5) * hm.scale_x,
        (rows + 0.5) * hm.scale_y,
        grid[rows, cols].astype(np.float64),
    )


@dataclass
class DensityPeaksResult:
    rho: np.ndarray
    delta: np.ndarray
    nearest_higher: np.ndarray
    centers: np.ndarray
    assignment: np.ndarray

    @property
    def count(self) -> int:
        return len(self.centers)


def density_peaks(points: WeightedPoints, d_c: float, rho_min: float = RHO_MIN_FRACTION,
                  delta_min: float = 0.0) -> DensityPeaksResult:
    """Cluster by local density and separation.

    rho_i = sum_{j != i} w_j * exp(-(d_ij / d_c)^2); delta_i = distance to
    the nearest point of higher density (rho ties broken toward the lower
    index); the densest point takes the maximum pairwise distance. Centers
    are the points with rho > rho_min * max(rho) and delta > delta_min;
    everything else joins its nearest higher-density point's cluster,
    walking down the density ordering.

    rho_min is a fraction of the peak density, which makes the center set
    invariant under uniform rescaling of all weights.
    """
    n = len(points)
    if n == 0:
        raise DataError("density_peaks needs at least one point")
    if d_c <= 0:
        raise DataError("d_c must be positive")
    x, y, w = points.x, points.y, points.w

    rho = np.empty(n, dtype=np.float64)
    for i in range(n):
        d = np.sqrt((x - x[i]) ** 2 + (y - y[i]) ** 2)
        terms = w * np.exp(-((d / d_c) ** 2))
        terms[i] = 0.0
        rho[i] = np.sum(terms)

    # Density ranking; ties resolved by index so "higher" is a strict order.
    order = np.lexsort((np.arange(n), -rho))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    delta = np.empty(n, dtype=np.float64)
    nearest_higher = np.full(n, -1, dtype=np.int64)
    for pos, i in enumerate(order):
        d = np.sqrt((x - x[i]) ** 2 + (y - y[i]) ** 2)
        if pos == 0:
            delta[i] = np.max(d) if n > 1 else 0.0
            continue
        higher = order[:pos]
        dh = d[higher]
        dmin = np.min(dh)
        # smallest original index among equidistant higher-density points
        candidates = higher[dh == dmin]
        nearest_higher[i] = int(np.min(candidates))
        delta[i] = dmin

    rho_cut = rho_min * np.max(rho)
    is_center = (rho > rho_cut) & (delta > delta_min)
    if not is_center.any():
        is_center[order[0]] = True
    centers = np.flatnonzero(is_center)

    cluster_of = {int(c): k for k, c in enumerate(centers)}
    assignment = np.full(n, -1, dtype=np.int64)
    for i in order:
        if int(i) in cluster_of:
            assignment[i] = cluster_of[int(i)]
        else:
            assignment[i] = assignment[nearest_higher[i]]
    return DensityPeaksResult(rho, delta, nearest_higher, centers, assignment)


def cluster_pointers(result: DensityPeaksResult, points: WeightedPoints) -> list[BBox]:
    """Tightest box around each cluster's member points."""
    boxes = []
    for k in range(result.count):
        member = result.assignment == k
        assert member.any(), "empty cluster cannot occur by construction"
        xs, ys = points.x[member], points.y[member]
        boxes.append(BBox(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())))
    return boxes


# -- weighted Gaussian mixture ----------------------------------------------


@dataclass
class GmmModel:
    means: np.ndarray       # (C, 2)
    variances: np.ndarray   # (C, 2) diagonal entries
    priors: np.ndarray      # (C,)
    log_likelihood: float = 0.0
    iterations: int = 0
    ll_trace: list[float] = None  # likelihood entering each EM iteration

    @property
    def components(self) -> int:
        return len(self.priors)


def _weighted_log_likelihood(xy, w, means, variances, priors):
    # log sum_c pi_c N(x | mu_c, diag(var_c)), weighted by heat
    diff = xy[:, None, :] - means[None, :, :]
    log_pdf = -0.5 * np.sum(diff**2 / variances[None], axis=2)
    log_pdf -= 0.5 * np.sum(np.log(2 * np.pi * variances), axis=1)[None, :]
    log_mix = log_pdf + np.log(priors)[None, :]
    m = np.max(log_mix, axis=1, keepdims=True)
    ll_per_point = m[:, 0] + np.log(np.sum(np.exp(log_mix - m), axis=1))
    return float(np.sum(w * ll_per_point)), log_mix


def _farthest_point_seeds(xy, w, c, rng):
    n = len(xy)
    first = int(rng.choice(n, p=w / w.sum()))
    chosen = [first]
    d2 = np.sum((xy - xy[first]) ** 2, axis=1)
    while len(chosen) < c:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((xy - xy[nxt]) ** 2, axis=1))
    return np.array(chosen, dtype=np.int64)


def gmm_fit(points: WeightedPoints, c: int, seed: int = 0, tol: float = 1e-6,
            max_iter: int = 200) -> GmmModel:
    """Weighted EM with diagonal covariances and farthest-point seeding.

    The weighted log-likelihood is non-decreasing across iterations; the
    variance floor keeps components from collapsing onto single pixels.
    """
    if c < 1:
        raise DataError("component count must be >= 1")
    n = len(points)
    if n < c:
        raise DataError(f"need at least {c} points to fit {c} components, got {n}")
    w = points.w
    if w.sum() <= 0:
        raise DataError("all point weights are zero")
    xy = np.stack([points.x, points.y], axis=1)

    rng = np.random.default_rng(seed)
    seeds = _farthest_point_seeds(xy, w, c, rng)
    means = xy[seeds].copy()
    w_total = w.sum()
    global_mean = (w[:, None] * xy).sum(axis=0) / w_total
    global_var = (w[:, None] * (xy - global_mean) ** 2).sum(axis=0) / w_total
    variances = np.maximum(np.tile(global_var / max(c, 1), (c, 1)), GMM_VARIANCE_FLOOR)
    priors = np.full(c, 1.0 / c)

    prev_ll = -np.inf
    iterations = 0
    ll_trace = []
    for iterations in range(1, max_iter + 1):
        ll, log_mix = _weighted_log_likelihood(xy, w, means, variances, priors)
        ll_trace.append(ll)
        # E-step: responsibilities; M-step: weighted refit with floor
        m = np.max(log_mix, axis=1, keepdims=True)
        resp = np.exp(log_mix - m)
        resp /= resp.sum(axis=1, keepdims=True)
        wr = resp * w[:, None]
        mass = wr.sum(axis=0)
        mass = np.maximum(mass, 1e-300)
        means = (wr.T @ xy) / mass[:, None]
        for k in range(c):
            diff = xy - means[k]
            variances[k] = np.maximum((wr[:, k][:, None] * diff**2).sum(axis=0) / mass[k], GMM_VARIANCE_FLOOR)
        priors = mass / w_total
        priors = priors / priors.sum()
        if np.isfinite(prev_ll) and ll - prev_ll < tol:
            break
        prev_ll = ll
    final_ll, _ = _weighted_log_likelihood(xy, w, means, variances, priors)
    if not np.isfinite(final_ll):
        raise NumericError("mixture log-likelihood is not finite")
    return GmmModel(means, variances, priors, final_ll, iterations, ll_trace)


def gmm_pointers(model: GmmModel) -> list[Ellipse]:
    """One ellipse per component: center at the mean, semi-axes sqrt(var)."""
    return [
        Ellipse(float(mx), float(my), float(np.sqrt(vx)), float(np.sqrt(vy)))
        for (mx, my), (vx, vy) in zip(model.means, model.variances)
    ]
