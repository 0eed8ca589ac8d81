"""Adversarial-step objectives and the NT-Xent contrastive loss.

Domain terms are log-likelihoods of the domain head (source label 0,
target label 1), so they are <= 0. The domain branch maximizes them and
the shared extractor minimizes them through gradient reversal; the
trainer therefore descends on ``-(l_d + l_md) + l_f + l_mf``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, NumericError

EPS = 1e-7


class SaturationCounter:
    """Counts probabilities that had to be clamped away from 0 or 1."""

    def __init__(self):
        self.count = 0

    def __call__(self, p: Tensor, eps: float = EPS) -> Tensor:
        with torch.no_grad():
            self.count += int(((p < eps) | (p > 1 - eps)).sum())
        return p.clamp(eps, 1 - eps)


def _clamp(p: Tensor, counter: SaturationCounter | None) -> Tensor:
    return counter(p) if counter is not None else p.clamp(EPS, 1 - EPS)


def domain_loss(domain_probs_source: Tensor, domain_probs_target: Tensor,
                counter: SaturationCounter | None = None) -> Tensor:
    p_s = _clamp(domain_probs_source, counter)
    p_t = _clamp(domain_probs_target, counter)
    return torch.log1p(-p_s).mean() + torch.log(p_t).mean()


def mixed_domain_loss(mixed_probs: Tensor, lams: Tensor, counter: SaturationCounter | None = None) -> Tensor:
    """Mean of ``lam * log(1 - p) + (1 - lam) * log(p)``; lam weights the source side."""
    p = _clamp(mixed_probs, counter)
    lams = torch.as_tensor(lams, dtype=p.dtype, device=p.device)
    return (lams * torch.log1p(-p) + (1 - lams) * torch.log(p)).mean()


def _check_targets(logits: Tensor, targets: Tensor, what: str):
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError(f"{what}: target index outside [0, {logits.shape[-1]})")


def task_loss(toi_logits: Tensor, toi_targets: Tensor, irt_logits: Tensor, irt_targets: Tensor) -> Tensor:
    _check_targets(toi_logits, toi_targets, "ToI head")
    _check_targets(irt_logits, irt_targets, "IrT head")
    return F.cross_entropy(toi_logits, toi_targets) + F.cross_entropy(irt_logits, irt_targets)


def mixed_task_loss(mixed_toi_logits: Tensor, mixed_irt_logits: Tensor, left_targets: Tensor,
                    right_targets: Tensor, lams: Tensor) -> Tensor:
    """Mean of ``lam * CE(ToI head, left) + (1 - lam) * CE(IrT head, right)``."""
    _check_targets(mixed_toi_logits, left_targets, "ToI head (left operand)")
    _check_targets(mixed_irt_logits, right_targets, "IrT head (right operand)")
    lams = torch.as_tensor(lams, dtype=mixed_toi_logits.dtype, device=mixed_toi_logits.device)
    ce_left = F.cross_entropy(mixed_toi_logits, left_targets, reduction="none")
    ce_right = F.cross_entropy(mixed_irt_logits, right_targets, reduction="none")
    return (lams * ce_left + (1 - lams) * ce_right).mean()


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    batch_k: int = 64
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.batch_k < 2:
            raise ConfigError(f"contrastive batches need K >= 2, got {self.batch_k}")


def nt_xent(anchors: Tensor, positives: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """NT-Xent with anchor ``i``, positive ``positives[i]`` and in-batch negatives.

    Negatives for anchor i are ``anchors[j]`` and ``positives[j]`` for all
    j != i (2(K-1) terms). The positive joins the denominator only when
    ``cfg.include_positive_in_denominator`` is set.
    """
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise ValueError(f"anchors {tuple(anchors.shape)} and positives {tuple(positives.shape)} must be equal K x m")
    k = anchors.shape[0]
    if k < 2:
        raise ValueError("nt_xent needs K >= 2")
    for name, z in (("anchors", anchors), ("positives", positives)):
        norms = z.detach().norm(dim=1)
        bad = torch.nonzero(norms <= 1e-12)
        if bad.numel():
            raise NumericError(f"zero-norm embedding in {name} at sample index {int(bad[0])}")
    a = F.normalize(anchors, dim=1)
    p = F.normalize(positives, dim=1)
    logits = a @ torch.cat([a, p]).T / cfg.temperature  # K x 2K
    eye = torch.eye(k, dtype=torch.bool, device=a.device)
    pos = logits[:, k:][eye]
    drop = torch.cat([eye, eye if not cfg.include_positive_in_denominator else torch.zeros_like(eye)], dim=1)
    denom = torch.logsumexp(logits.masked_fill(drop, float("-inf")), dim=1)
    return (denom - pos).mean()


def contrastive_losses(zf_a: Tensor, zf_b: Tensor, zd_b: Tensor, zd_c: Tensor,
                       cfg: ContrastiveConfig) -> tuple[Tensor, Tensor]:
    """Returns ``(l_con_f, l_con_d)``: task pairs (A_i, B_i), domain pairs (B_i, C_i)."""
    if not len(zf_a) == len(zf_b) == len(zd_b) == len(zd_c):
        raise ValueError("all four embedding collections must have the same length K")
    return nt_xent(zf_a, zf_b, cfg), nt_xent(zd_b, zd_c, cfg)


METRIC_FIELDS = ("l_d", "l_md", "l_f", "l_mf", "l_con_d", "l_con_f")


@dataclass
class LossReport:
    l_d: float = 0.0
    l_md: float = 0.0
    l_f: float = 0.0
    l_mf: float = 0.0
    l_con_d: float = 0.0
    l_con_f: float = 0.0

    @property
    def l_adv(self) -> float:
        return self.l_d + self.l_md + self.l_f + self.l_mf

    def as_dict(self) -> dict[str, float]:
        return asdict(self) | {"l_adv": self.l_adv}

    def to_row(self, iteration: int) -> str:
        return "\t".join([str(iteration)] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS])

    @classmethod
    def from_row(cls, line: str) -> tuple[int, "LossReport"]:
        it, *vals = line.rstrip("\n").split("\t")
        return int(it), cls(*map(float, vals))

