"""Export per-layer features of pretrained vision classifiers to FTX files."""

from .extraction import (
    DEFAULT_TRANSFORM,
    ExtractionSpec,
    extract,
    pool_raw_feature_set,
    reduce_node_output,
)

__version__ = "0.1.0"
