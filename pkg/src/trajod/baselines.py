"""Feature-computable comparison detectors.

Confidence baselines operate on the logits alone; the Mahalanobis and KNN
baselines use the penultimate layer; the trajectory aggregators replace the
reference projection with plain multivariate distances on rescaled
trajectory vectors.  Every score is oriented so that higher means more
in-distribution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .feature_store import FeatureSet, FormatError
from .trajectory import (
    ReferenceModel,
    _regularized_pooled_covariance,
    _spd_inverse,
    fit_prototypes,
    softmax,
    trajectories,
)

BASELINE_KINDS = (
    "msp",
    "max_logit",
    "energy",
    "mahalanobis_penultimate",
    "knn",
    "traj_euclidean",
    "traj_mahalanobis",
)

LOGIT_KINDS = ("msp", "max_logit", "energy")
TRAJECTORY_KINDS = ("traj_euclidean", "traj_mahalanobis")


def msp(logits: np.ndarray) -> np.ndarray | float:
    """Maximum softmax probability (no hyperparameters)."""
    p = softmax(logits)
    out = p.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def max_logit(logits: np.ndarray) -> np.ndarray | float:
    z = np.asarray(logits, dtype=np.float64)
    out = z.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def energy(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray | float:
    """Negative free energy T * log sum exp(logits / T), max-subtracted."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=-1, keepdims=True)
    out = temperature * (
        np.log(np.exp(z - m).sum(axis=-1)) + np.squeeze(m, axis=-1)
    )
    return float(out) if out.ndim == 0 else out


# -- penultimate-layer Mahalanobis ------------------------------------------


@dataclass(frozen=True)
class MahalanobisState:
    """Class means and pooled covariance inverse of the penultimate layer."""

    means: np.ndarray
    cov_inv: np.ndarray

    def to_bytes(self) -> bytes:
        c, d = self.means.shape
        return (
            struct.pack("<II", c, d)
            + np.ascontiguousarray(self.means, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.cov_inv, dtype="<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MahalanobisState":
        if len(blob) < 8:
            raise FormatError("truncated mahalanobis baseline state")
        c, d = struct.unpack_from("<II", blob, 0)
        need = 8 + 8 * c * d + 8 * d * d
        if len(blob) != need:
            raise FormatError("mahalanobis baseline state has wrong size")
        means = np.frombuffer(blob, dtype="<f8", count=c * d, offset=8).reshape(c, d)
        cov_inv = np.frombuffer(blob, dtype="<f8", offset=8 + 8 * c * d).reshape(d, d)
        return cls(means=means.copy(), cov_inv=cov_inv.copy())


def fit_mahalanobis_penultimate(train: FeatureSet) -> MahalanobisState:
    """Fit class means and the shared covariance on the layer before logits."""
    if train.n_layers < 2:
        raise ValueError("need a penultimate layer distinct from the logits")
    bank = fit_prototypes(train)
    means = bank.mu[-2]
    feats = train.features[-2].astype(np.float64)
    cov = _regularized_pooled_covariance(feats, train.labels.astype(np.int64), means)
    return MahalanobisState(means=means, cov_inv=_spd_inverse(cov))


def _min_mahalanobis(z_rows: np.ndarray, means: np.ndarray, cov_inv: np.ndarray) -> np.ndarray:
    q = np.empty((means.shape[0], z_rows.shape[0]))
    for y in range(means.shape[0]):
        d = z_rows - means[y]
        q[y] = np.einsum("nd,nd->n", d @ cov_inv, d)
    return np.sqrt(np.clip(q.min(axis=0), 0.0, None))


def mahalanobis_penultimate_score(z: np.ndarray, state: MahalanobisState):
    """Negative distance from z to the nearest class mean."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    if rows.shape[1] != state.means.shape[1]:
        raise ValueError("dimension mismatch between features and fitted means")
    out = -_min_mahalanobis(rows, state.means, state.cov_inv)
    return float(out[0]) if single else out


# -- KNN on normalized penultimate features ----------------------------------


@dataclass(frozen=True)
class KnnIndex:
    """Exhaustive-search index over unit-normalized penultimate features."""

    rows: np.ndarray
    k: int
    alpha: float
    seed: int

    def to_bytes(self) -> bytes:
        n, d = self.rows.shape
        return (
            struct.pack("<IIQd", self.k, d, n, self.alpha)
            + struct.pack("<q", self.seed)
            + np.ascontiguousarray(self.rows, dtype="<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KnnIndex":
        head = struct.calcsize("<IIQd") + 8
        if len(blob) < head:
            raise FormatError("truncated knn baseline state")
        k, d, n, alpha = struct.unpack_from("<IIQd", blob, 0)
        (seed,) = struct.unpack_from("<q", blob, struct.calcsize("<IIQd"))
        if len(blob) != head + 8 * n * d:
            raise FormatError("knn baseline state has wrong size")
        rows = np.frombuffer(blob, dtype="<f8", offset=head).reshape(n, d)
        return cls(rows=rows.copy(), k=int(k), alpha=float(alpha), seed=int(seed))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalize zero-norm feature vectors")
    return x / norms[:, None]


def fit_knn_index(
    train: FeatureSet, k: int = 10, alpha: float = 0.01, *, seed: int
) -> KnnIndex:
    """Build the index from a seeded alpha-fraction subsample of the
    normalized penultimate training features."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if k < 1:
        raise ValueError("k must be positive")
    feats = train.features[-2].astype(np.float64)
    n = feats.shape[0]
    if alpha >= 1.0:
        idx = np.arange(n)
    else:
        n_sub = max(1, int(round(n * alpha)))
        idx = np.sort(np.random.default_rng(seed).choice(n, size=n_sub, replace=False))
    if k > idx.shape[0]:
        raise ValueError(f"k={k} exceeds index size {idx.shape[0]}")
    return KnnIndex(rows=_unit_rows(feats[idx]), k=k, alpha=alpha, seed=seed)


def knn_score(z: np.ndarray, index: KnnIndex):
    """Negative Euclidean distance to the k-th nearest stored row, with the
    query normalized the same way as the index."""
    if index.k > index.rows.shape[0]:
        raise ValueError(f"k={index.k} exceeds index size {index.rows.shape[0]}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    q = _unit_rows(rows)
    out = np.empty(q.shape[0])
    for i in range(q.shape[0]):
        dists = np.sqrt(((index.rows - q[i]) ** 2).sum(axis=1))
        out[i] = -np.partition(dists, index.k - 1)[index.k - 1]
    return float(out[0]) if single else out


# -- multivariate aggregation over trajectory vectors ------------------------


@dataclass(frozen=True)
class TrajectoryStats:
    """Mean and covariance inverse of rescaled training trajectories."""

    mean: np.ndarray
    cov_inv: np.ndarray

    def to_bytes(self) -> bytes:
        p = self.mean.shape[0]
        return (
            struct.pack("<I", p)
            + np.ascontiguousarray(self.mean, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.cov_inv, dtype="<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrajectoryStats":
        if len(blob) < 4:
            raise FormatError("truncated trajectory baseline state")
        (p,) = struct.unpack_from("<I", blob, 0)
        if len(blob) != 4 + 8 * p + 8 * p * p:
            raise FormatError("trajectory baseline state has wrong size")
        mean = np.frombuffer(blob, dtype="<f8", count=p, offset=4)
        cov_inv = np.frombuffer(blob, dtype="<f8", offset=4 + 8 * p).reshape(p, p)
        return cls(mean=mean.copy(), cov_inv=cov_inv.copy())


def fit_trajectory_stats(train: FeatureSet, model: ReferenceModel) -> TrajectoryStats:
    """Mean and regularized covariance of the rescaled training trajectories,
    using the model's prototypes and per-coordinate scale."""
    u = trajectories(train, model.bank, model.kind, model.cov_invs) / model.scale
    mean = u.mean(axis=0)
    centered = u - mean
    cov = centered.T @ centered / u.shape[0]
    trace = float(np.trace(cov))
    p = cov.shape[0]
    eps = 1e-6 * trace / p if trace > 0.0 else 1e-12
    return TrajectoryStats(mean=mean, cov_inv=_spd_inverse(cov + eps * np.eye(p)))


def traj_euclidean_score(traj: np.ndarray, mean: np.ndarray):
    """Negative Euclidean distance of a rescaled trajectory from the training
    mean trajectory."""
    d = np.asarray(traj, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    if d.ndim == 1:
        return -float(np.sqrt(d @ d))
    return -np.sqrt(np.einsum("np,np->n", d, d))


def traj_mahalanobis_score(traj: np.ndarray, mean: np.ndarray, cov_inv: np.ndarray):
    """Negative Mahalanobis distance of a rescaled trajectory from the
    training mean, under the training trajectory covariance."""
    d = np.asarray(traj, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    if d.ndim == 1:
        return -float(np.sqrt(max(0.0, d @ (cov_inv @ d))))
    return -np.sqrt(np.clip(np.einsum("np,np->n", d @ cov_inv, d), 0.0, None))


def scaled_trajectories(data, model: ReferenceModel, n_threads: int = 1) -> np.ndarray:
    u = trajectories(data, model.bank, model.kind, model.cov_invs, n_threads)
    return u / model.scale
