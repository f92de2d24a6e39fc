"""Binary feature exchange (FTX) files and spatial reduction of feature maps.

FTX v1 layout, all integers little-endian:

    magic "FTRJ" | version u32 = 1 | n_samples u64 | n_layers u32 |
    n_classes u32 | per layer: name_len u32, name utf-8, dim u32 |
    labels: n_samples x u32 (0xFFFFFFFF = unlabeled) |
    per layer, in declared order: n_samples x dim x f32, row-major

The final layer always holds the classifier logits, identified positionally,
so its dim must equal n_classes.  Features are stored as 32-bit floats for
compactness; every downstream statistic is accumulated in 64-bit.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

MAGIC = b"FTRJ"
VERSION = 1
UNLABELED = 0xFFFFFFFF


class FormatError(ValueError):
    """A byte stream or in-memory structure violates the format contract."""


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Per-layer feature matrices for one set of samples.

    ``features[l]`` is an ``(n_samples, layer_dims[l])`` float32 matrix.
    ``labels`` is uint32 with ``UNLABELED`` marking samples without an
    in-distribution class.  Instances are immutable: the constructor marks
    all arrays read-only, so they can be shared across threads freely.
    """

    layer_names: tuple[str, ...]
    layer_dims: tuple[int, ...]
    n_classes: int
    labels: np.ndarray
    features: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.labels.setflags(write=False)
        for arr in self.features:
            arr.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)

    @property
    def logits(self) -> np.ndarray:
        return self.features[-1]

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @classmethod
    def create(cls, layer_names, features, labels, n_classes) -> "FeatureSet":
        """Coerce dtypes, validate invariants and build an immutable set."""
        feats = tuple(np.ascontiguousarray(f, dtype=np.float32) for f in features)
        fs = cls(
            layer_names=tuple(str(n) for n in layer_names),
            layer_dims=tuple(int(f.shape[1]) for f in feats),
            n_classes=int(n_classes),
            labels=np.ascontiguousarray(labels, dtype=np.uint32),
            features=feats,
        )
        validate_feature_set(fs)
        return fs

    def equals(self, other: "FeatureSet") -> bool:
        """Bit-exact field-for-field equality."""
        return (
            self.layer_names == other.layer_names
            and self.layer_dims == other.layer_dims
            and self.n_classes == other.n_classes
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )

    def subset(self, indices: np.ndarray) -> "FeatureSet":
        """New FeatureSet restricted to the given sample indices."""
        return FeatureSet(
            layer_names=self.layer_names,
            layer_dims=self.layer_dims,
            n_classes=self.n_classes,
            labels=self.labels[indices].copy(),
            features=tuple(f[indices].copy() for f in self.features),
        )


def validate_feature_set(fs: FeatureSet) -> None:
    """Raise FormatError on any invariant violation."""
    n_layers = len(fs.layer_names)
    if n_layers == 0:
        raise FormatError("feature set must have at least one layer (the logits)")
    if len(fs.layer_dims) != n_layers or len(fs.features) != n_layers:
        raise FormatError("layer_names, layer_dims and features must have equal length")
    if fs.n_classes <= 0:
        raise FormatError("n_classes must be positive")
    if any(d <= 0 for d in fs.layer_dims):
        raise FormatError("layer dims must be positive")
    if fs.layer_dims[-1] != fs.n_classes:
        raise FormatError(
            f"final layer dim {fs.layer_dims[-1]} != n_classes {fs.n_classes}; "
            "the last layer must hold the logits"
        )
    if fs.labels.ndim != 1 or fs.labels.dtype != np.uint32:
        raise FormatError("labels must be a 1-D uint32 array")
    n = fs.labels.shape[0]
    for name, dim, arr in zip(fs.layer_names, fs.layer_dims, fs.features):
        if arr.dtype != np.float32 or arr.ndim != 2:
            raise FormatError(f"layer {name!r} must be a 2-D float32 matrix")
        if arr.shape != (n, dim):
            raise FormatError(
                f"layer {name!r} has shape {arr.shape}, expected {(n, dim)}"
            )
        if not np.isfinite(arr).all():
            raise FormatError(f"layer {name!r} contains non-finite values")
    labeled = fs.labels != UNLABELED
    if np.any(fs.labels[labeled] >= fs.n_classes):
        raise FormatError("labeled sample has label >= n_classes")


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    # Bounded chunks: an absurd size from a corrupted header fails with a
    # truncation error instead of one huge read/allocation.
    if n <= 0:
        return b""
    chunks = []
    remaining = n
    while remaining > 0:
        piece = stream.read(min(remaining, 1 << 20))
        if not piece:
            raise FormatError(f"truncated payload while reading {what}")
        chunks.append(piece)
        remaining -= len(piece)
    return chunks[0] if len(chunks) == 1 else b"".join(chunks)


def _read_u32(stream: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(stream, 4, what))[0]


def read_feature_set(stream: BinaryIO) -> FeatureSet:
    """Parse an FTX v1 stream; rejects anything violating the invariants."""
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = _read_u32(stream, "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    n_samples = struct.unpack("<Q", _read_exact(stream, 8, "n_samples"))[0]
    n_layers = _read_u32(stream, "n_layers")
    n_classes = _read_u32(stream, "n_classes")
    if n_layers == 0:
        raise FormatError("n_layers must be positive")
    if n_classes == 0:
        raise FormatError("n_classes must be positive")

    names, dims = [], []
    for i in range(n_layers):
        name_len = _read_u32(stream, f"layer {i} name length")
        raw = _read_exact(stream, name_len, f"layer {i} name")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"layer {i} name is not valid UTF-8") from exc
        dim = _read_u32(stream, f"layer {i} dim")
        if dim == 0:
            raise FormatError(f"layer {i} dim must be positive")
        dims.append(dim)

    labels = np.frombuffer(
        _read_exact(stream, 4 * n_samples, "labels"), dtype="<u4"
    ).astype(np.uint32)
    features = []
    for name, dim in zip(names, dims):
        payload = _read_exact(stream, 4 * n_samples * dim, f"layer {name!r} payload")
        mat = np.frombuffer(payload, dtype="<f4").reshape(n_samples, dim)
        features.append(mat.astype(np.float32))
    if stream.read(1):
        raise FormatError("trailing data after final layer payload")

    fs = FeatureSet(
        layer_names=tuple(names),
        layer_dims=tuple(dims),
        n_classes=n_classes,
        labels=labels,
        features=tuple(features),
    )
    validate_feature_set(fs)
    return fs


def write_feature_set(fs: FeatureSet, sink: BinaryIO) -> None:
    """Emit the FTX v1 layout; validates before the first byte is written."""
    validate_feature_set(fs)
    sink.write(MAGIC)
    sink.write(struct.pack("<I", VERSION))
    sink.write(struct.pack("<Q", fs.n_samples))
    sink.write(struct.pack("<I", fs.n_layers))
    sink.write(struct.pack("<I", fs.n_classes))
    for name, dim in zip(fs.layer_names, fs.layer_dims):
        encoded = name.encode("utf-8")
        sink.write(struct.pack("<I", len(encoded)))
        sink.write(encoded)
        sink.write(struct.pack("<I", dim))
    sink.write(fs.labels.astype("<u4").tobytes())
    for arr in fs.features:
        sink.write(arr.astype("<f4").tobytes())


def load_feature_set(path: str | os.PathLike) -> FeatureSet:
    with open(path, "rb") as f:
        return read_feature_set(f)


def save_feature_set(fs: FeatureSet, path: str | os.PathLike) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            write_feature_set(fs, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def global_max_pool(feature_map: np.ndarray) -> np.ndarray:
    """Reduce a channels-first C x H x W map to a length-C vector.

    ``out[c]`` is the maximum over all spatial positions of channel c.
    """
    arr = np.asarray(feature_map)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D C x H x W map, got ndim={arr.ndim}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"empty spatial extent in map of shape {arr.shape}")
    return arr.max(axis=(1, 2))
