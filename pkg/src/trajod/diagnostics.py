"""Centrality and dependence diagnostics for fitted feature populations.

Halfspace (Tukey) depth is approximated by minimizing one-dimensional
depth over seeded random projection directions; the estimate upper-bounds
the exact depth and is exact in one dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_store import FeatureSet


@dataclass(frozen=True)
class DepthEstimate:
    value: float
    n_directions: int
    seed: int


def sample_directions(n_directions: int, dim: int, *, seed: int) -> np.ndarray:
    """Seeded isotropic Gaussian directions, normalized to unit norm.

    With a fixed seed the first rows of a larger draw coincide with a
    smaller draw, so nested direction sets share a common prefix.
    """
    if n_directions < 1:
        raise ValueError("n_directions must be positive")
    if dim < 1:
        raise ValueError("dim must be positive")
    v = np.random.default_rng(seed).standard_normal((n_directions, dim))
    norms = np.linalg.norm(v, axis=1)
    norms[norms == 0.0] = 1.0
    return v / norms[:, None]


def _depths_for_directions(
    points: np.ndarray, data: np.ndarray, directions: np.ndarray
) -> np.ndarray:
    """Per-point depth estimate, all points sharing one direction set.

    For each direction u the one-dimensional depth of a point is
    min(#below-or-equal, #above-or-equal) / n over projections; the
    estimate is the minimum over directions.  Points on a projection
    boundary count on both sides, so degenerate tied data can exceed 1/2.
    """
    n = data.shape[0]
    # One stacked product so a query row identical to a data row gets the
    # bit-identical projection and keeps its self-tie on the boundary.
    proj = np.vstack([points, data]) @ directions.T
    proj_pts, proj_data = proj[: points.shape[0]], proj[points.shape[0] :]
    best = np.full(points.shape[0], np.inf)
    for j in range(directions.shape[0]):
        col = np.sort(proj_data[:, j])
        le = np.searchsorted(col, proj_pts[:, j], side="right")
        ge = n - np.searchsorted(col, proj_pts[:, j], side="left")
        best = np.minimum(best, np.minimum(le, ge) / n)
    return best


def approx_halfspace_depth(
    x: np.ndarray, data: np.ndarray, n_directions: int = 1000, *, seed: int
) -> DepthEstimate:
    """Random-projection upper bound of the halfspace depth of x in data."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("data must be a nonempty n x d matrix")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != data.shape[1]:
        raise ValueError("x and data dimensions differ")
    dirs = sample_directions(n_directions, data.shape[1], seed=seed)
    value = float(_depths_for_directions(x, data, dirs)[0])
    return DepthEstimate(value=value, n_directions=n_directions, seed=seed)


def approx_halfspace_depths(
    points: np.ndarray, data: np.ndarray, n_directions: int = 1000, *, seed: int
) -> np.ndarray:
    """Depth estimates for several points under one shared direction set.

    Sharing directions removes sampling variance from paired comparisons
    such as prototype depth versus per-sample depth.
    """
    data = np.asarray(data, dtype=np.float64)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("data must be a nonempty n x d matrix")
    if points.shape[1] != data.shape[1]:
        raise ValueError("points and data dimensions differ")
    dirs = sample_directions(n_directions, data.shape[1], seed=seed)
    return _depths_for_directions(points, data, dirs)


def mean_median_gap(fs: FeatureSet, layer: int, class_index: int) -> np.ndarray:
    """Per-coordinate |mean - median| of one class at one layer.

    Medians of even-sized samples use the midpoint of the two central
    order statistics.
    """
    if not 0 <= layer < fs.n_layers:
        raise ValueError(f"layer index {layer} out of range")
    if not 0 <= class_index < fs.n_classes:
        raise ValueError(f"class index {class_index} out of range")
    mask = fs.labels == class_index
    if not np.any(mask):
        raise ValueError(f"class {class_index} has no samples")
    rows = fs.features[layer][mask].astype(np.float64)
    return np.abs(rows.mean(axis=0) - np.median(rows, axis=0))


def layer_score_correlation(trajs: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix of trajectory coordinates."""
    u = np.asarray(trajs, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ValueError("need at least two trajectories")
    spread = u.max(axis=0) - u.min(axis=0)
    flat = np.flatnonzero(spread == 0.0)
    if flat.size:
        raise ValueError(f"zero-variance trajectory coordinate(s): {flat.tolist()}")
    corr = np.corrcoef(u, rowvar=False)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr
