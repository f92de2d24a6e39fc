"""Binary persistence of fitted detector state (FTRM v1).

Layout, integers little-endian, floats little-endian f64:

    magic "FTRM" | version u32 = 1 | kind u32 (0 projection, 1 mahalanobis) |
    n_layers u32 | n_classes u32 | layer dims: n_layers x u32 |
    class counts: n_classes x u64 |
    prototypes, per layer: n_classes x dim x f64 |
    scale: n_layers x f64 | reference: n_layers x f64 |
    flags u32 (bit 0: covariance inverses present, bit 1: gamma present) |
    [cov inverses, per layer: dim x dim x f64] | [gamma f64] |
    n_sections u32 | per section: tag_len u32, tag utf-8, len u64, payload

Sections carry optional auxiliary state (fitted baseline detectors) keyed by
tag; unknown tags are preserved verbatim on read/write.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import BinaryIO

import numpy as np

from .feature_store import FormatError, _read_exact, _read_u32
from .trajectory import PrototypeBank, ReferenceModel

MODEL_MAGIC = b"FTRM"
MODEL_VERSION = 1
_KIND_TAGS = {"projection": 0, "mahalanobis": 1}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

_FLAG_COV = 1
_FLAG_GAMMA = 2


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_f64(stream: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = _read_exact(stream, 8 * count, what)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def write_reference_model(
    model: ReferenceModel, stream: BinaryIO, sections: dict[str, bytes] | None = None
) -> None:
    model.validate()
    sections = sections or {}
    dims = [m.shape[1] for m in model.bank.mu]

    stream.write(MODEL_MAGIC)
    stream.write(struct.pack("<I", MODEL_VERSION))
    stream.write(struct.pack("<I", _KIND_TAGS[model.kind]))
    stream.write(struct.pack("<I", model.n_layers))
    stream.write(struct.pack("<I", model.bank.n_classes))
    stream.write(np.asarray(dims, dtype="<u4").tobytes())
    stream.write(np.asarray(model.bank.counts, dtype="<u8").tobytes())
    for m in model.bank.mu:
        stream.write(_f64_bytes(m))
    stream.write(_f64_bytes(model.scale))
    stream.write(_f64_bytes(model.reference))

    flags = 0
    if model.cov_invs is not None:
        flags |= _FLAG_COV
    if model.gamma is not None:
        flags |= _FLAG_GAMMA
    stream.write(struct.pack("<I", flags))
    if model.cov_invs is not None:
        for c in model.cov_invs:
            stream.write(_f64_bytes(c))
    if model.gamma is not None:
        stream.write(struct.pack("<d", model.gamma))

    stream.write(struct.pack("<I", len(sections)))
    for tag, payload in sections.items():
        encoded = tag.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<Q", len(payload)))
        stream.write(payload)


def read_reference_model(stream: BinaryIO) -> tuple[ReferenceModel, dict[str, bytes]]:
    magic = _read_exact(stream, 4, "model magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    version = _read_u32(stream, "model version")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    kind_tag = _read_u32(stream, "kind tag")
    if kind_tag not in _TAG_KINDS:
        raise FormatError(f"unknown layer score kind tag {kind_tag}")
    kind = _TAG_KINDS[kind_tag]
    n_layers = _read_u32(stream, "n_layers")
    n_classes = _read_u32(stream, "n_classes")
    if n_layers == 0 or n_classes == 0:
        raise FormatError("n_layers and n_classes must be positive")
    dims = np.frombuffer(
        _read_exact(stream, 4 * n_layers, "layer dims"), dtype="<u4"
    ).astype(np.int64)
    if np.any(dims == 0):
        raise FormatError("layer dims must be positive")
    counts = np.frombuffer(
        _read_exact(stream, 8 * n_classes, "class counts"), dtype="<u8"
    ).astype(np.int64)

    mus = []
    for i, d in enumerate(dims):
        flat = _read_f64(stream, n_classes * int(d), f"layer {i} prototypes")
        mus.append(flat.reshape(n_classes, int(d)))
    scale = _read_f64(stream, n_layers, "scale")
    reference = _read_f64(stream, n_layers, "reference")

    flags = _read_u32(stream, "flags")
    cov_invs = None
    if flags & _FLAG_COV:
        cov_invs = tuple(
            _read_f64(stream, int(d) * int(d), f"layer {i} covariance inverse").reshape(
                int(d), int(d)
            )
            for i, d in enumerate(dims)
        )
    gamma = None
    if flags & _FLAG_GAMMA:
        gamma = struct.unpack("<d", _read_exact(stream, 8, "gamma"))[0]

    n_sections = _read_u32(stream, "section count")
    sections: dict[str, bytes] = {}
    for i in range(n_sections):
        tag_len = _read_u32(stream, f"section {i} tag length")
        try:
            tag = _read_exact(stream, tag_len, f"section {i} tag").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"section {i} tag is not valid UTF-8") from exc
        size = struct.unpack("<Q", _read_exact(stream, 8, f"section {i} size"))[0]
        sections[tag] = _read_exact(stream, size, f"section {tag!r} payload")
    if stream.read(1):
        raise FormatError("trailing data after final section")

    model = ReferenceModel(
        bank=PrototypeBank(mu=tuple(mus), counts=counts),
        scale=scale,
        reference=reference,
        kind=kind,
        cov_invs=cov_invs,
        gamma=gamma,
    )
    try:
        model.bank.validate()
        model.validate()
    except ValueError as exc:
        raise FormatError(f"model file violates invariants: {exc}") from exc
    return model, sections


def load_reference_model(path: str | os.PathLike) -> tuple[ReferenceModel, dict[str, bytes]]:
    with open(path, "rb") as f:
        return read_reference_model(f)


def save_reference_model(
    model: ReferenceModel,
    path: str | os.PathLike,
    sections: dict[str, bytes] | None = None,
) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            write_reference_model(model, f, sections)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
