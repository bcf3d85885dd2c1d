"""Single-view depth prediction adapter.

Reads a sequence manifest, runs a pluggable monocular depth model over
every RGB frame, and writes one float depth map per frame plus a sidecar
CSV naming the mapping.  Output depth is metric (meters), strictly
positive and finite, so downstream consumers can treat every pixel as a
valid prediction.
"""

from .adapter import (
    AdapterConfig,
    ModelLoadError,
    MODELS,
    load_model,
    predict_batch,
)

__all__ = [
    "AdapterConfig",
    "ModelLoadError",
    "MODELS",
    "load_model",
    "predict_batch",
]
