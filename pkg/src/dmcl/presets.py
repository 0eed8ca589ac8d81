"""Named architecture/training presets.

``desk`` is the miniature X-NIST setup used by the acceptance experiment.
``xnist`` and ``officehome`` follow the published schedules and are
long-running (hours on a GPU, days on a CPU).
"""

from __future__ import annotations

from .model import ArchitectureConfig, Backbone
from .trainer import TrainConfig

PRESETS = {
    "desk": dict(
        arch=dict(input_shape=(28, 28, 3), head_class_counts=(10, 10)),
        train=dict(batch_k=64, total_iterations=1500),
    ),
    "xnist": dict(
        arch=dict(input_shape=(28, 28, 3), head_class_counts=(10, 10)),
        train=dict(batch_k=64, total_iterations=7000),
    ),
    "officehome": dict(
        arch=dict(input_shape=(224, 224, 3), head_class_counts=(10, 55), backbone=Backbone.PRETRAINED_RESNET50_SPLIT),
        train=dict(batch_k=32, total_iterations=15000),
    ),
}


def preset(name: str, **train_overrides) -> tuple[ArchitectureConfig, TrainConfig]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return ArchitectureConfig(**p["arch"]), TrainConfig(**(p["train"] | train_overrides))
