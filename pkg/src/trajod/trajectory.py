"""Layer-wise trajectory extraction and reference-based scoring.

A sample's features at each layer are reduced to one scalar per layer: the
softmax-weighted scalar projection of the layer's feature vector onto the
class prototypes (or, alternatively, a nearest-prototype Mahalanobis score).
The resulting length-(L+1) vector is the sample's trajectory.  Fitting
computes class prototypes on the full training set, collects trajectories on
a seeded subsample, rescales each coordinate by its training maximum and
averages to obtain a reference trajectory.  The detection score of a test
sample is the projection coefficient of its rescaled trajectory onto the
reference; low scores indicate out-of-distribution inputs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .feature_store import UNLABELED, FeatureSet

KINDS = ("projection", "mahalanobis")

# Prototypes with norm below this contribute zero to the projection score;
# scale coordinates with magnitude below it abort fitting.
DEGENERATE_NORM = 1e-12

# Fixed batch size for row-chunked scoring.  Chunk boundaries depend only on
# the sample count, never on the worker count, so results are byte-identical
# for any thread pool size.
_CHUNK = 1024


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis, in 64-bit.

    Accepts a single logit vector or a batch of rows.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax requires finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class PrototypeBank:
    """Per-layer, per-class mean feature vectors with class counts.

    ``mu[l]`` is a ``(n_classes, layer_dim)`` float64 matrix.
    """

    mu: tuple[np.ndarray, ...]
    counts: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.mu)

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    def validate(self) -> None:
        if np.any(self.counts < 1):
            raise ValueError("every class must have at least one sample")
        for i, m in enumerate(self.mu):
            if m.shape[0] != self.n_classes:
                raise ValueError(f"layer {i} prototype count != n_classes")
            if not np.isfinite(m).all():
                raise ValueError(f"layer {i} prototypes contain non-finite values")


@dataclass(frozen=True)
class ReferenceModel:
    """Fitted detector state: prototypes, per-coordinate scaling, reference
    trajectory, and (for the mahalanobis kind) shared covariance inverses."""

    bank: PrototypeBank
    scale: np.ndarray
    reference: np.ndarray
    kind: str = "projection"
    cov_invs: tuple[np.ndarray, ...] | None = None
    gamma: float | None = None

    @property
    def n_layers(self) -> int:
        return int(self.reference.shape[0])

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer score kind {self.kind!r}")
        if self.scale.shape != self.reference.shape:
            raise ValueError("scale and reference must have equal length")
        if np.any(np.abs(self.scale) < DEGENERATE_NORM):
            raise ValueError("scale entries must be nonzero")
        if float(np.linalg.norm(self.reference)) <= 0.0:
            raise ValueError("reference trajectory must have positive norm")
        if self.kind == "mahalanobis" and self.cov_invs is None:
            raise ValueError("mahalanobis kind requires covariance inverses")


def fit_prototypes(train: FeatureSet) -> PrototypeBank:
    """Class-conditional mean of each layer's features, 64-bit accumulation.

    Every class in [0, n_classes) must appear; unlabeled samples are
    rejected since there is no class to assign them to.
    """
    labels = train.labels
    if np.any(labels == UNLABELED):
        raise ValueError("training set contains unlabeled samples")
    counts = np.bincount(labels.astype(np.int64), minlength=train.n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"empty class(es) in training set: {empty.tolist()}")

    mus = []
    for arr in train.features:
        feats = arr.astype(np.float64)
        mu = np.empty((train.n_classes, feats.shape[1]))
        for y in range(train.n_classes):
            mu[y] = feats[labels == y].mean(axis=0)
        mus.append(mu)
    return PrototypeBank(mu=tuple(mus), counts=counts)


def _projection_weights(protos: np.ndarray) -> np.ndarray:
    """Columns are prototypes divided by their norms; degenerate prototypes
    (norm < DEGENERATE_NORM) get a zero column so they contribute nothing."""
    norms = np.linalg.norm(protos, axis=1)
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    w = (protos / safe[:, None]).T
    w[:, norms < DEGENERATE_NORM] = 0.0
    return w


def layer_score(z: np.ndarray, protos: np.ndarray, probs: np.ndarray) -> float:
    """Probability-weighted scalar projection of z onto the class prototypes.

    Returns sum_y probs[y] * <z, mu_y> / ||mu_y||.
    """
    z = np.asarray(z, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if protos.ndim != 2 or z.shape[0] != protos.shape[1]:
        raise ValueError(
            f"dimension mismatch: z has dim {z.shape[0]}, prototypes have "
            f"dim {protos.shape[1] if protos.ndim == 2 else '?'}"
        )
    return float(probs @ (z @ _projection_weights(protos)))


def _check_symmetric(cov_inv: np.ndarray) -> None:
    scale = max(1.0, float(np.abs(cov_inv).max()))
    if float(np.abs(cov_inv - cov_inv.T).max()) > 1e-8 * scale:
        raise ValueError("covariance inverse is not symmetric within tolerance")


def layer_score_mahalanobis(
    z: np.ndarray, protos: np.ndarray, cov_inv: np.ndarray
) -> float:
    """Negative smallest Mahalanobis distance from z to any prototype.

    Sign matches the projection score: larger means more in-distribution.
    """
    z = np.asarray(z, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    cov_inv = np.asarray(cov_inv, dtype=np.float64)
    if z.shape[0] != protos.shape[1]:
        raise ValueError("dimension mismatch between z and prototypes")
    _check_symmetric(cov_inv)
    diff = protos - z[None, :]
    q = np.einsum("cd,cd->c", diff @ cov_inv, diff)
    tol = 1e-9 * max(1.0, float(np.abs(q).max()))
    if np.any(q < -tol):
        raise ValueError("covariance inverse is not positive definite within tolerance")
    return -math.sqrt(float(np.clip(q, 0.0, None).min()))


def make_trajectory(
    sample_layers: Sequence[np.ndarray],
    bank: PrototypeBank,
    kind: str = "projection",
    cov_invs: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Trajectory of one sample: one layer score per layer, the same softmax
    probabilities (from the final-layer logits) reused at every layer."""
    if len(sample_layers) != bank.n_layers:
        raise ValueError(
            f"sample has {len(sample_layers)} layers, bank has {bank.n_layers}"
        )
    if kind not in KINDS:
        raise ValueError(f"unknown layer score kind {kind!r}")
    probs = softmax(np.asarray(sample_layers[-1], dtype=np.float64))
    coords = np.empty(bank.n_layers)
    for i, z in enumerate(sample_layers):
        if kind == "projection":
            coords[i] = layer_score(z, bank.mu[i], probs)
        else:
            coords[i] = layer_score_mahalanobis(z, bank.mu[i], cov_invs[i])
    return coords


def _layer_arrays(data) -> tuple[np.ndarray, ...]:
    if isinstance(data, FeatureSet):
        return data.features
    return tuple(np.asarray(a) for a in data)


def _trajectory_chunk(
    feats64: Sequence[np.ndarray],
    probs: np.ndarray,
    weights: Sequence[np.ndarray] | None,
    cov_invs: Sequence[np.ndarray] | None,
    mus: Sequence[np.ndarray],
    rows: slice,
) -> np.ndarray:
    n_layers = len(feats64)
    p = probs[rows]
    out = np.empty((p.shape[0], n_layers))
    for li in range(n_layers):
        z = feats64[li][rows]
        if weights is not None:
            out[:, li] = np.einsum("nc,nc->n", p, z @ weights[li])
        else:
            protos = mus[li]
            q = np.empty((protos.shape[0], z.shape[0]))
            for y in range(protos.shape[0]):
                d = z - protos[y]
                q[y] = np.einsum("nd,nd->n", d @ cov_invs[li], d)
            out[:, li] = -np.sqrt(np.clip(q.min(axis=0), 0.0, None))
    return out


def trajectories(
    data,
    bank: PrototypeBank,
    kind: str = "projection",
    cov_invs: Sequence[np.ndarray] | None = None,
    n_threads: int = 1,
) -> np.ndarray:
    """Trajectories for a whole sample set, shape (n_samples, n_layers).

    Work is split into fixed-size row chunks; the chunking is identical for
    every thread count, so the output bytes never depend on parallelism.
    """
    feats = _layer_arrays(data)
    if len(feats) != bank.n_layers:
        raise ValueError("layer count mismatch between data and prototype bank")
    if kind not in KINDS:
        raise ValueError(f"unknown layer score kind {kind!r}")
    if kind == "mahalanobis" and cov_invs is None:
        raise ValueError("mahalanobis kind requires covariance inverses")

    feats64 = [np.asarray(a, dtype=np.float64) for a in feats]
    probs = softmax(feats64[-1])
    weights = None
    if kind == "projection":
        weights = [_projection_weights(m) for m in bank.mu]

    n = feats64[0].shape[0]
    chunks = [slice(i, min(i + _CHUNK, n)) for i in range(0, n, _CHUNK)]
    run = lambda s: _trajectory_chunk(feats64, probs, weights, cov_invs, bank.mu, s)
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(s) for s in chunks]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, bank.n_layers))


def _regularized_pooled_covariance(
    feats64: np.ndarray, labels: np.ndarray, mu: np.ndarray
) -> np.ndarray:
    """Within-class covariance pooled over classes (1/N normalization),
    regularized by eps * I with eps = 1e-6 * trace / dim.  A zero-trace
    scatter (single sample per class) falls back to an absolute 1e-12."""
    n, d = feats64.shape
    scatter = np.zeros((d, d))
    for y in range(mu.shape[0]):
        xc = feats64[labels == y] - mu[y]
        scatter += xc.T @ xc
    cov = scatter / n
    trace = float(np.trace(cov))
    eps = 1e-6 * trace / d if trace > 0.0 else 1e-12
    return cov + eps * np.eye(d)


def _spd_inverse(cov: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(cov)
        inv = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular covariance after regularization") from exc
    return (inv + inv.T) / 2.0


def fit_shared_covariance_inverses(
    train: FeatureSet, bank: PrototypeBank
) -> tuple[np.ndarray, ...]:
    """Per-layer inverses of the pooled within-class covariance."""
    labels = train.labels.astype(np.int64)
    out = []
    for arr, mu in zip(train.features, bank.mu):
        cov = _regularized_pooled_covariance(arr.astype(np.float64), labels, mu)
        out.append(_spd_inverse(cov))
    return tuple(out)


def fit_reference(
    train: FeatureSet,
    kind: str = "projection",
    subsample_fraction: float = 0.01,
    *,
    seed: int,
) -> ReferenceModel:
    """Fit the detector on a labeled training set.

    Prototypes always use the full training set; trajectory collection runs
    on a seeded uniform subsample (the default keeps one sample in a
    hundred).  With subsample_fraction = 1 the result is seed-independent.
    """
    if not 0.0 < subsample_fraction <= 1.0:
        raise ValueError("subsample_fraction must be in (0, 1]")
    if kind not in KINDS:
        raise ValueError(f"unknown layer score kind {kind!r}")
    bank = fit_prototypes(train)
    cov_invs = (
        fit_shared_covariance_inverses(train, bank) if kind == "mahalanobis" else None
    )

    n = train.n_samples
    if subsample_fraction >= 1.0:
        idx = np.arange(n)
    else:
        n_sub = max(1, int(round(n * subsample_fraction)))
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=n_sub, replace=False))
    sub_feats = [arr[idx] for arr in train.features]
    u = trajectories(sub_feats, bank, kind, cov_invs)

    scale = u.max(axis=0)
    degenerate = np.flatnonzero(np.abs(scale) < DEGENERATE_NORM)
    if degenerate.size:
        names = [train.layer_names[i] for i in degenerate]
        raise ValueError(
            f"degenerate trajectory scale (|max| < {DEGENERATE_NORM:g}) at "
            f"layer(s) {names}; cannot rescale"
        )
    reference = (u / scale).mean(axis=0)
    model = ReferenceModel(
        bank=bank, scale=scale, reference=reference, kind=kind, cov_invs=cov_invs
    )
    model.validate()
    return model


def score(sample_layers: Sequence[np.ndarray], model: ReferenceModel) -> float:
    """Detection score of one sample: projection coefficient of its rescaled
    trajectory onto the reference.  Higher means more in-distribution."""
    traj = make_trajectory(sample_layers, model.bank, model.kind, model.cov_invs)
    scaled = traj / model.scale
    ref = model.reference
    return float((scaled @ ref) / (ref @ ref))


def score_set(
    data,
    model: ReferenceModel,
    *,
    normalized: bool = True,
    n_threads: int = 1,
) -> np.ndarray:
    """Scores for a whole sample set.

    ``normalized=False`` drops the 1/||reference||^2 factor, leaving the
    plain inner product; the factor is a positive constant per model, so
    both variants order any score set identically.
    """
    u = trajectories(data, model.bank, model.kind, model.cov_invs, n_threads)
    scaled = u / model.scale
    raw = scaled @ model.reference
    if not normalized:
        return raw
    return raw / float(model.reference @ model.reference)


def decide(s: float, gamma: float) -> bool:
    """True when the score flags the sample as out-of-distribution (s <= gamma)."""
    return s <= gamma


def threshold_at_tpr(in_scores, tpr: float = 0.95) -> float:
    """Largest gamma keeping at least a ``tpr`` fraction of in-distribution
    scores strictly above it.

    When every candidate fails the strict-greater constraint (ties at the
    minimum, or a single score), returns -inf: everything is kept.
    """
    s = np.sort(np.asarray(in_scores, dtype=np.float64))
    n = s.shape[0]
    if n == 0:
        raise ValueError("in_scores must be nonempty")
    if not 0.0 < tpr < 1.0:
        raise ValueError("tpr must be in (0, 1)")
    # Smallest count of kept samples satisfying count/n >= tpr; the small
    # slack absorbs binary representation error in n*tpr.
    count_min = math.ceil(n * tpr - 1e-9)
    cutoff = s[n - count_min]
    pos = int(np.searchsorted(s, cutoff, side="left"))
    if pos == 0:
        return float("-inf")
    return float(s[pos - 1])


def smooth_trajectory(traj: np.ndarray, window: int, degree: int) -> np.ndarray:
    """Polynomial least-squares smoothing with symmetric edge shrinking.

    Each coordinate is replaced by the value, at its own position, of the
    degree-``degree`` least-squares polynomial fitted over a centered window
    of ``window`` points.  Near the edges the window shrinks symmetrically;
    the fit degree is clamped so the local problem stays determined.
    """
    y = np.asarray(traj, dtype=np.float64)
    n = y.shape[0]
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if not 1 <= degree < window:
        raise ValueError("degree must satisfy 1 <= degree < window")
    if window > n:
        raise ValueError("window must not exceed the trajectory length")
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        if h == 0:
            out[i] = y[i]
            continue
        xs = np.arange(-h, h + 1, dtype=np.float64)
        coeffs = np.polynomial.polynomial.polyfit(
            xs, y[i - h : i + h + 1], min(degree, 2 * h)
        )
        out[i] = coeffs[0]
    return out
