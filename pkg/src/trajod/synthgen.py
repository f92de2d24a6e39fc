"""Seeded synthetic feature sets with controllable distribution shift.

Each class gets one Gaussian-drawn mean per hidden layer, rescaled to a
common norm, which makes class directions near-orthogonal in high
dimension.  Logits are generated directly as margin * one_hot(class) plus
noise, keeping the generator independent of the detector it is used to
verify.  Out-of-distribution samples come in three flavors:

    mean_shift  magnitude anomaly: class means (and the logit margin) pulled
                toward the origin by delta, so every layer's projection drops
                by about delta and confidence drops with it.
    scale       dispersion anomaly: hidden-layer noise inflated by kappa.
    shape       shape anomaly: on the selected layers each sample's features
                are drawn around the mean of a *different* class (a seeded
                cyclic class reassignment), while its logits keep claiming
                the original class.  Per-layer marginals stay in range; the
                cross-layer pattern does not.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .feature_store import UNLABELED, FeatureSet, save_feature_set

OOD_MODES = ("mean_shift", "scale", "shape")


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    n_classes: int = 10
    layer_dims: tuple[int, ...] = (32, 64, 128)
    n_train: int = 2000
    n_test_in: int = 1000
    n_test_out: int = 1000
    class_mean_scale: float = 10.0
    sigma_in: float = 1.0
    ood_mode: str = "mean_shift"
    delta: float = 5.0
    kappa: float = 1.0
    permute_layers: tuple[int, ...] | None = None
    logit_margin: float = 10.0
    logit_noise_std: float = 1.0

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if not self.layer_dims or any(d < 1 for d in self.layer_dims):
            raise ValueError("layer_dims must be positive")
        if min(self.n_train, self.n_test_in, self.n_test_out) < 1:
            raise ValueError("sample counts must be positive")
        if self.sigma_in <= 0.0:
            raise ValueError("sigma_in must be positive")
        if self.class_mean_scale <= 0.0:
            raise ValueError("class_mean_scale must be positive")
        if self.ood_mode not in OOD_MODES:
            raise ValueError(f"ood_mode must be one of {OOD_MODES}")
        if self.delta < 0.0:
            raise ValueError("delta must be nonnegative")
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.logit_noise_std < 0.0:
            raise ValueError("logit_noise_std must be nonnegative")
        if self.ood_mode == "shape":
            if self.n_classes < 2:
                raise ValueError("shape mode needs at least two classes")
            for i in self.permute_layers or ():
                if not 0 <= i < len(self.layer_dims):
                    raise ValueError(f"permute_layers index {i} out of range")

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"hidden{i}" for i in range(len(self.layer_dims))) + ("logits",)


def _class_means(cfg: SynthConfig, rng: np.random.Generator) -> list[np.ndarray]:
    means = []
    for d in cfg.layer_dims:
        raw = rng.standard_normal((cfg.n_classes, d))
        raw /= np.linalg.norm(raw, axis=1)[:, None]
        means.append(raw * cfg.class_mean_scale)
    return means


def _assemble(cfg: SynthConfig, hidden, logits, labels) -> FeatureSet:
    return FeatureSet.create(
        layer_names=cfg.layer_names,
        features=list(hidden) + [logits],
        labels=labels,
        n_classes=cfg.n_classes,
    )


def _draw_split(cfg, rng, means, n, classes, sigma, margin, ood_means=None):
    hidden = []
    for li, d in enumerate(cfg.layer_dims):
        mu = means[li] if ood_means is None else ood_means[li]
        hidden.append(mu[classes] + sigma * rng.standard_normal((n, d)))
    logits = margin * np.eye(cfg.n_classes)[classes]
    logits = logits + cfg.logit_noise_std * rng.standard_normal((n, cfg.n_classes))
    return hidden, logits


def generate(cfg: SynthConfig) -> tuple[FeatureSet, FeatureSet, FeatureSet]:
    """Returns (train, test_in, test_out), fully determined by the config.

    Class counts in the labeled splits are balanced to within one sample.
    Out-of-distribution labels carry the unlabeled sentinel.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    means = _class_means(cfg, rng)

    # Draw mode-specific structure up front so the noise stream below is
    # identical for all modes.
    ood_margin = cfg.logit_margin
    if cfg.ood_mode == "mean_shift":
        factor = max(0.0, 1.0 - cfg.delta / cfg.class_mean_scale)
        ood_means = [m * factor for m in means]
        ood_margin = cfg.logit_margin * factor
    elif cfg.ood_mode == "scale":
        ood_means = means
    else:
        permuted = (
            tuple(range(len(cfg.layer_dims)))
            if cfg.permute_layers is None
            else tuple(sorted(set(cfg.permute_layers)))
        )
        shifts = {
            li: int(rng.integers(1, cfg.n_classes)) for li in permuted
        }
        ood_means = [
            m[(np.arange(cfg.n_classes) + shifts[li]) % cfg.n_classes]
            if li in shifts
            else m
            for li, m in enumerate(means)
        ]

    train_labels = (np.arange(cfg.n_train) % cfg.n_classes).astype(np.uint32)
    hidden, logits = _draw_split(
        cfg, rng, means, cfg.n_train, train_labels.astype(np.int64), cfg.sigma_in,
        cfg.logit_margin,
    )
    train = _assemble(cfg, hidden, logits, train_labels)

    in_labels = (np.arange(cfg.n_test_in) % cfg.n_classes).astype(np.uint32)
    hidden, logits = _draw_split(
        cfg, rng, means, cfg.n_test_in, in_labels.astype(np.int64), cfg.sigma_in,
        cfg.logit_margin,
    )
    test_in = _assemble(cfg, hidden, logits, in_labels)

    pseudo = np.arange(cfg.n_test_out) % cfg.n_classes
    sigma_out = cfg.sigma_in * (cfg.kappa if cfg.ood_mode == "scale" else 1.0)
    hidden, logits = _draw_split(
        cfg, rng, means, cfg.n_test_out, pseudo, sigma_out, ood_margin,
        ood_means=ood_means,
    )
    out_labels = np.full(cfg.n_test_out, UNLABELED, dtype=np.uint32)
    test_out = _assemble(cfg, hidden, logits, out_labels)
    return train, test_in, test_out


def generate_to_files(cfg: SynthConfig, prefix: str | os.PathLike) -> tuple[str, str, str]:
    """Write the three splits as {prefix}.train.ftx, .in.ftx, .out.ftx."""
    train, test_in, test_out = generate(cfg)
    prefix = os.fspath(prefix)
    paths = (f"{prefix}.train.ftx", f"{prefix}.in.ftx", f"{prefix}.out.ftx")
    for fs, path in zip((train, test_in, test_out), paths):
        save_feature_set(fs, path)
    return paths
