"""Capture per-layer activations of a vision classifier into an FTX file.

Each requested graph node is reduced to one vector per sample: channel-wise
global max pooling for convolutional B x C x H x W outputs, the leading
(class) token for transformer-style B x T x D outputs, and identity for
already-flat B x D outputs.  The last node must produce the logits; sample
order follows dataset iteration order.  A JSON manifest (model id, nodes,
transform description, checksum) is written next to the FTX file for
auditability.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader
from torchvision import models as tv_models
from torchvision import transforms as tv_transforms
from torchvision.datasets import ImageFolder
from torchvision.models.feature_extraction import create_feature_extractor

from trajod import FeatureSet, global_max_pool, save_feature_set

# Inference transform used when a checkpoint does not publish its own.
DEFAULT_TRANSFORM = tv_transforms.Compose(
    [
        tv_transforms.Resize(256),
        tv_transforms.CenterCrop(224),
        tv_transforms.ToTensor(),
        tv_transforms.Normalize(
            mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
        ),
    ]
)


@dataclass
class ExtractionSpec:
    model: str | torch.nn.Module
    nodes: Sequence[str]
    data: str | torch.utils.data.Dataset
    out: str
    split: str = ""
    weights: str | None = "DEFAULT"
    batch_size: int = 64
    device: str = "cpu"
    raw: bool = False
    limit: int | None = None

    def validate(self) -> None:
        if not self.nodes:
            raise ValueError("node list must be nonempty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.limit is not None and self.limit < 1:
            raise ValueError("limit must be positive")


def resolve_model(spec: ExtractionSpec):
    """Returns (module, transform, model_id, transform_description)."""
    if isinstance(spec.model, torch.nn.Module):
        return spec.model, None, type(spec.model).__name__, "dataset-native"
    name = spec.model
    if spec.weights and spec.weights.lower() != "none":
        weights = tv_models.get_model_weights(name)[spec.weights]
        model = tv_models.get_model(name, weights=weights)
        transform = weights.transforms()
        return model, transform, name, repr(transform)
    model = tv_models.get_model(name, weights=None)
    return model, DEFAULT_TRANSFORM, name, repr(DEFAULT_TRANSFORM)


def resolve_dataset(spec: ExtractionSpec, transform):
    if isinstance(spec.data, torch.utils.data.Dataset):
        return spec.data, "in-memory"
    root = os.path.join(spec.data, spec.split) if spec.split else spec.data
    return ImageFolder(root, transform=transform), root


def reduce_node_output(value: torch.Tensor, raw: bool = False):
    """Reduce one node's batched output to (B, d) rows.

    Returns (rows, spatial_shape); spatial_shape is the per-sample C x H x W
    shape when `raw` keeps an unpooled map, else None.
    """
    if not isinstance(value, torch.Tensor):
        raise ValueError(f"node output is not a tensor: {type(value).__name__}")
    if value.ndim == 4:
        if raw:
            return value.flatten(1), tuple(value.shape[1:])
        return torch.amax(value, dim=(2, 3)), None
    if value.ndim == 3:
        return value[:, 0, :], None
    if value.ndim == 2:
        return value, None
    raise ValueError(
        f"node output of shape {tuple(value.shape)} is not reducible to a vector"
    )


def _checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_json_atomic(path: str, obj) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(obj, f, indent=2)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def extract(spec: ExtractionSpec) -> dict:
    """Run the extraction and return the manifest (also written to disk)."""
    spec.validate()
    model, transform, model_id, transform_desc = resolve_model(spec)
    dataset, data_desc = resolve_dataset(spec, transform)
    device = torch.device(spec.device)
    model = model.to(device).eval()

    nodes = list(spec.nodes)
    try:
        extractor = create_feature_extractor(model, return_nodes=nodes)
    except ValueError as exc:
        raise ValueError(f"unknown node name: {exc}") from exc

    collected: dict[str, list[np.ndarray]] = {n: [] for n in nodes}
    raw_shapes: dict[str, tuple[int, ...]] = {}
    labels: list[np.ndarray] = []
    remaining = spec.limit
    loader = DataLoader(dataset, batch_size=spec.batch_size, shuffle=False)
    with torch.no_grad():
        for batch, targets in loader:
            if remaining is not None:
                batch, targets = batch[:remaining], targets[:remaining]
            outputs = extractor(batch.to(device))
            for i, name in enumerate(nodes):
                keep_raw = spec.raw and i < len(nodes) - 1
                rows, shape = reduce_node_output(outputs[name], raw=keep_raw)
                if shape is not None:
                    raw_shapes[name] = shape
                collected[name].append(rows.cpu().numpy().astype(np.float32))
            labels.append(np.asarray(targets, dtype=np.int64))
            if remaining is not None:
                remaining -= len(targets)
                if remaining <= 0:
                    break

    if not labels:
        raise ValueError("dataset produced no samples")
    label_arr = np.concatenate(labels)
    features = [np.concatenate(collected[n], axis=0) for n in nodes]
    n_classes = features[-1].shape[1]
    if features[-1].ndim != 2:
        raise ValueError("last node must produce flat logits")
    if label_arr.max() >= n_classes:
        raise ValueError(
            f"dataset label {int(label_arr.max())} exceeds the model's "
            f"{n_classes} classes"
        )

    fs = FeatureSet.create(
        layer_names=nodes,
        features=features,
        labels=label_arr.astype(np.uint32),
        n_classes=n_classes,
    )
    save_feature_set(fs, spec.out)

    manifest = {
        "model": model_id,
        "nodes": nodes,
        "layer_dims": [int(f.shape[1]) for f in features],
        "n_samples": int(label_arr.shape[0]),
        "n_classes": int(n_classes),
        "dataset": data_desc,
        "split": spec.split,
        "transform": transform_desc,
        "raw": bool(spec.raw),
        "raw_shapes": {k: list(v) for k, v in raw_shapes.items()},
        "sha256": _checksum(spec.out),
    }
    _write_json_atomic(f"{spec.out}.manifest.json", manifest)
    return manifest


def pool_raw_feature_set(fs: FeatureSet, raw_shapes: dict[str, Sequence[int]]) -> FeatureSet:
    """Reduce the raw (flattened C x H x W) layers of an FTX produced with
    --raw to pooled per-channel vectors, using the manifest's shapes."""
    pooled = []
    for name, arr in zip(fs.layer_names, fs.features):
        if name not in raw_shapes:
            pooled.append(arr)
            continue
        c, h, w = (int(v) for v in raw_shapes[name])
        rows = np.stack(
            [global_max_pool(sample.reshape(c, h, w)) for sample in arr]
        )
        pooled.append(rows)
    return FeatureSet.create(fs.layer_names, pooled, fs.labels, fs.n_classes)
