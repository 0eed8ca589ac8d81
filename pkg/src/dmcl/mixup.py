"""Convex mixing of samples, with category and domain labels carried along.

``mix`` works on numpy arrays and torch tensors alike; ``lam`` may be a
scalar or one value per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledImage, Task, TripletBatch
from .errors import ConfigError


def mix(x_i, x_j, lam):
    """``lam * x_i + (1 - lam) * x_j`` with per-row ``lam`` broadcast over trailing dims."""
    if np.ndim(lam) == 1:
        lam = lam.reshape((-1,) + (1,) * (x_i.ndim - 1))
    return lam * x_i + (1 - lam) * x_j


@dataclass(frozen=True)
class MixedSample:
    pixels: np.ndarray
    lam: float
    left_label: tuple[int, Task]
    right_label: tuple[int, Task]
    mixed_domain: float


def dual_mix(xi: LabeledImage, xj: LabeledImage, lam: float) -> MixedSample:
    if np.shape(xi.pixels) != np.shape(xj.pixels):
        raise ValueError(f"cannot mix shapes {np.shape(xi.pixels)} and {np.shape(xj.pixels)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    return MixedSample(
        pixels=mix(np.asarray(xi.pixels), np.asarray(xj.pixels), lam),
        lam=float(lam),
        left_label=(xi.class_index, xi.task),
        right_label=(xj.class_index, xj.task),
        mixed_domain=lam * xi.domain_label + (1.0 - lam) * xj.domain_label,
    )


@dataclass(frozen=True)
class ContrastiveTriplet:
    """Index-aligned mixes built with one shared lambda.

    a = mix(source ToI, source IrT)  -- shares category content with b
    b = mix(source ToI, target IrT)
    c = mix(source IrT, target IrT)  -- shares domain content with b
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: float


def build_contrastive_triplet(tb: TripletBatch, lam: float) -> ContrastiveTriplet:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    s_r, s_ir, t_ir = tb.xs_r.pixels, tb.xs_ir.pixels, tb.xt_ir.pixels
    return ContrastiveTriplet(mix(s_r, s_ir, lam), mix(s_r, t_ir, lam), mix(s_ir, t_ir, lam), float(lam))


class BetaSampler:
    """Draws mixing coefficients from Beta(alpha, alpha)."""

    def __init__(self, alpha: float = 1.0, rng: np.random.Generator | int | None = None):
        if not alpha > 0:
            raise ConfigError(f"Beta alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def sample(self, size=None):
        return self.rng.beta(self.alpha, self.alpha, size=size)


def sample_lambda(s: BetaSampler) -> float:
    return float(s.sample())
