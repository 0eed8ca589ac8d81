"""Alternating optimization: one adversarial step, then one contrastive step.

One iteration = one (adversarial, contrastive) pair on a freshly sampled
triplet batch. A single Adam instance covers every parameter; the min/max
over the domain branch is realized by the gradient reversal coupling.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import Split, TrainingView, TripletBatch, ZsdaDataset, sample_triplet_batch
from .errors import ConfigError, DataError, NumericError
from .losses import (ContrastiveConfig, LossReport, SaturationCounter, domain_loss, mixed_domain_loss,
                     mixed_task_loss, nt_xent, task_loss)
from .mixup import BetaSampler, build_contrastive_triplet, mix
from .model import ArchitectureConfig, GrlCoupling, ModelBundle, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingAborted(NumericError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class AblationFlags:
    disable_dual_mixup: bool = False
    disable_contrastive: bool = False


@dataclass
class TrainConfig:
    batch_k: int = 64
    total_iterations: int = 7000
    learning_rate: float = 2e-4
    lr_decay_factor: float = 0.1
    lr_decay_at_fraction: float = 0.5
    alpha: float = 1.0
    grl_coefficient: float = 1.0
    grl_schedule: str = "constant"  # or "linear": ramp 0 -> coefficient over grl_ramp_fraction of the run
    grl_ramp_fraction: float = 0.5
    temperature: float = 0.5
    include_positive_in_denominator: bool = False
    freeze_g_in_contrastive: bool = False
    seed: int = 0
    ablation_flags: AblationFlags = field(default_factory=AblationFlags)
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if isinstance(self.ablation_flags, dict):
            self.ablation_flags = AblationFlags(**self.ablation_flags)
        if self.batch_k < 2:
            raise ConfigError(f"batch_k must be >= 2, got {self.batch_k}")
        if self.total_iterations < 1:
            raise ConfigError(f"total_iterations must be >= 1, got {self.total_iterations}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.lr_decay_at_fraction <= 1:
            raise ConfigError(f"lr_decay_at_fraction must be in (0, 1], got {self.lr_decay_at_fraction}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.grl_coefficient < 0:
            raise ConfigError(f"grl_coefficient must be >= 0, got {self.grl_coefficient}")
        if self.grl_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown grl_schedule {self.grl_schedule!r}")
        ContrastiveConfig(self.temperature, self.batch_k, self.include_positive_in_denominator)

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.batch_k, self.include_positive_in_denominator)

    @property
    def decay_iteration(self) -> int:
        return math.floor(self.lr_decay_at_fraction * self.total_iterations)

    def learning_rate_at(self, iteration: int) -> float:
        if iteration >= self.decay_iteration:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate

    def grl_coefficient_at(self, iteration: int) -> float:
        if self.grl_schedule == "constant":
            return self.grl_coefficient
        ramp = max(1, round(self.grl_ramp_fraction * self.total_iterations))
        return self.grl_coefficient * min(1.0, iteration / ramp)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    model: ModelBundle
    optimizer: torch.optim.Optimizer
    data_rng: np.random.Generator
    mix_rng: np.random.Generator
    grl: GrlCoupling
    iteration: int = 0
    metrics_log: list[tuple[int, LossReport]] = field(default_factory=list)
    consumed_ids: set[str] = field(default_factory=set)
    saturation: SaturationCounter = field(default_factory=SaturationCounter)
    checkpoint_path: Path | None = None

    def sampler(self, alpha: float) -> BetaSampler:
        return BetaSampler(alpha, self.mix_rng)


def init_state(arch: ArchitectureConfig, cfg: TrainConfig) -> TrainState:
    model = build_model(arch, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    return TrainState(model=model, optimizer=optimizer, data_rng=np.random.default_rng(seeds[0]),
                      mix_rng=np.random.default_rng(seeds[1]), grl=GrlCoupling(cfg.grl_coefficient))


def _tensor(x: np.ndarray, like: torch.nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def _labels(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.int64)


def _finite_or_abort(state: TrainState, step: str, terms: dict[str, torch.Tensor]):
    bad = {k: float(v) for k, v in terms.items() if not torch.isfinite(v)}
    if bad:
        snapshot = {"iteration": state.iteration, "step": step,
                    "terms": {k: float(v) for k, v in terms.items()},
                    "learning_rate": state.optimizer.param_groups[0]["lr"],
                    "saturation_events": state.saturation.count,
                    "checkpoint": str(state.checkpoint_path) if state.checkpoint_path else None}
        raise TrainingAborted(f"non-finite loss in {step} step at iteration {state.iteration}: {bad}", snapshot)


def adversarial_step(state: TrainState, triplet: TripletBatch, cfg: TrainConfig) -> LossReport:
    """One descent step on ``-(l_d + l_md) + l_f + l_mf`` (reversal handles the max side)."""
    model, rng = state.model, state.mix_rng
    k = triplet.k
    s_r, s_ir, t_ir = triplet.xs_r, triplet.xs_ir, triplet.xt_ir
    blocks = [s_r.pixels, s_ir.pixels, t_ir.pixels]
    use_mixup = not cfg.ablation_flags.disable_dual_mixup
    if use_mixup:
        sampler = state.sampler(cfg.alpha)
        # domain mixes: left from D_s = D_s^r u D_s^ir, right from D_t^ir
        src_pool = np.concatenate([s_r.pixels, s_ir.pixels])
        md_left = rng.choice(2 * k, size=k, replace=False)
        md_right = rng.permutation(k)
        lam_md = sampler.sample(k).astype(np.float32)
        x_md = mix(src_pool[md_left], t_ir.pixels[md_right], lam_md)
        # task mixes: left from D_s^r, right from D^ir = D_s^ir u D_t^ir
        irt_pool = np.concatenate([s_ir.pixels, t_ir.pixels])
        irt_pool_labels = np.concatenate([s_ir.labels, t_ir.labels])
        mf_left = rng.permutation(k)
        mf_right = rng.choice(2 * k, size=k, replace=False)
        lam_mf = sampler.sample(k).astype(np.float32)
        x_mf = mix(s_r.pixels[mf_left], irt_pool[mf_right], lam_mf)
        blocks += [x_md, x_mf]

    model.train()
    state.grl.coefficient = cfg.grl_coefficient_at(state.iteration)
    toi_logits, irt_logits, p = model.forward_all(_tensor(np.concatenate(blocks), model), state.grl)

    l_d = domain_loss(p[: 2 * k], p[2 * k: 3 * k], state.saturation)
    l_f = task_loss(toi_logits[:k], _labels(s_r.labels), irt_logits[k: 3 * k],
                    _labels(np.concatenate([s_ir.labels, t_ir.labels])))
    terms = {"l_d": l_d, "l_f": l_f}
    if use_mixup:
        terms["l_md"] = mixed_domain_loss(p[3 * k: 4 * k], torch.as_tensor(lam_md), state.saturation)
        terms["l_mf"] = mixed_task_loss(toi_logits[4 * k:], irt_logits[4 * k:], _labels(s_r.labels[mf_left]),
                                        _labels(irt_pool_labels[mf_right]), torch.as_tensor(lam_mf))
    _finite_or_abort(state, "adversarial", terms)
    objective = terms["l_f"] - terms["l_d"]
    if use_mixup:
        objective = objective + terms["l_mf"] - terms["l_md"]

    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    state.optimizer.step()
    state.consumed_ids |= triplet.sample_ids()
    return LossReport(**{name: v.item() for name, v in terms.items()})


def contrastive_step(state: TrainState, triplet: TripletBatch, cfg: TrainConfig) -> LossReport:
    """One descent step on ``l_con_f + l_con_d`` over a shared-lambda A/B/C triplet."""
    if cfg.ablation_flags.disable_contrastive:
        return LossReport()
    model = state.model
    k = triplet.k
    lam = float(state.sampler(cfg.alpha).sample())
    tri = build_contrastive_triplet(triplet, lam)
    x = _tensor(np.concatenate([tri.a, tri.b, tri.c]), model)

    model.train()
    if cfg.freeze_g_in_contrastive:
        with torch.no_grad():
            h = model.shared(x)
    else:
        h = model.shared(x)
    zf = model.g_f(h[: 2 * k])  # A, B
    zd = model.g_d(h[k:])  # B, C
    ccfg = cfg.contrastive
    terms = {"l_con_f": nt_xent(zf[:k], zf[k:], ccfg), "l_con_d": nt_xent(zd[:k], zd[k:], ccfg)}
    _finite_or_abort(state, "contrastive", terms)

    state.optimizer.zero_grad(set_to_none=True)
    (terms["l_con_f"] + terms["l_con_d"]).backward()
    state.optimizer.step()
    state.consumed_ids |= triplet.sample_ids()
    return LossReport(**{name: v.item() for name, v in terms.items()})


# --- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(state: TrainState, arch: ArchitectureConfig, cfg: TrainConfig) -> bytes:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "arch": arch.to_dict(),
        "train_config": cfg.to_dict(),
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "mix_rng": state.mix_rng.bit_generator.state,
        "metrics": [report.to_row(it) for it, report in state.metrics_log],
        "consumed_ids": sorted(state.consumed_ids),
        "saturation_events": state.saturation.count,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_checkpoint(state: TrainState, arch: ArchitectureConfig, cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, arch, cfg))
    tmp.replace(path)
    state.checkpoint_path = path
    return path


def load_checkpoint(path) -> tuple[TrainState, ArchitectureConfig, TrainConfig]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format_version')!r}")
    arch = ArchitectureConfig.from_dict(payload["arch"])
    cfg = TrainConfig.from_dict(payload["train_config"])
    state = init_state(arch, cfg)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.mix_rng.bit_generator.state = payload["mix_rng"]
    state.iteration = payload["iteration"]
    state.metrics_log = [LossReport.from_row(row) for row in payload["metrics"]]
    state.consumed_ids = set(payload["consumed_ids"])
    state.saturation.count = payload["saturation_events"]
    state.checkpoint_path = Path(path)
    return state, arch, cfg


def write_metrics(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "iteration\tl_d\tl_md\tl_f\tl_mf\tl_con_d\tl_con_f"
    path.write_text("\n".join([header] + [r.to_row(it) for it, r in state.metrics_log]) + "\n")
    return path


def read_metrics(path) -> list[tuple[int, LossReport]]:
    lines = Path(path).read_text().splitlines()
    return [LossReport.from_row(line) for line in lines[1:] if line.strip()]


# --- the loop ----------------------------------------------------------------------

def _as_training_view(data: ZsdaDataset | TrainingView) -> TrainingView:
    return data.training_view() if isinstance(data, ZsdaDataset) else data


def train(dataset: ZsdaDataset | TrainingView, arch: ArchitectureConfig, cfg: TrainConfig,
          checkpoint_dir=None, metrics_path=None, resume_from=None, stop_at: int | None = None,
          log_every: int = 100) -> TrainState:
    """Run ``cfg.total_iterations`` alternation pairs (or up to ``stop_at``).

    Only the three training splits are ever handed to the sampler; the
    evaluation split is dropped here, before the loop starts.
    """
    view = _as_training_view(dataset)
    del dataset
    if view.image_shape != arch.input_shape:
        raise DataError(f"dataset images are {view.image_shape} but the architecture expects {arch.input_shape}")
    n_r, n_ir = len(view.label_spaces.toi_classes), len(view.label_spaces.irt_classes)
    if (n_r, n_ir) != arch.head_class_counts:
        raise DataError(f"label spaces have ({n_r}, {n_ir}) classes but heads expect {arch.head_class_counts}")

    if resume_from is not None:
        state, arch_ck, cfg_ck = load_checkpoint(resume_from)
        if arch_ck.to_dict() != arch.to_dict() or cfg_ck.to_dict() != cfg.to_dict():
            raise ConfigError(f"checkpoint {resume_from} was written with a different configuration")
    else:
        state = init_state(arch, cfg)
    end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
    ckpt = Path(checkpoint_dir) / "checkpoint.pt" if checkpoint_dir is not None else None

    while state.iteration < end:
        lr = cfg.learning_rate_at(state.iteration)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        triplet = sample_triplet_batch(view, cfg.batch_k, state.data_rng)
        report = adversarial_step(state, triplet, cfg)
        con = contrastive_step(state, triplet, cfg)
        report.l_con_d, report.l_con_f = con.l_con_d, con.l_con_f
        state.metrics_log.append((state.iteration, report))
        state.iteration += 1
        if log_every and state.iteration % log_every == 0:
            log.info("iter %d lr %.2g %s saturation=%d", state.iteration, lr,
                     " ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()), state.saturation.count)
        if ckpt is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, arch, cfg, ckpt)
            if metrics_path is not None:
                write_metrics(state, metrics_path)

    if ckpt is not None:
        save_checkpoint(state, arch, cfg, ckpt)
    if metrics_path is not None:
        write_metrics(state, metrics_path)
    return state


def eval_isolation_report(state: TrainState, eval_split: Split) -> dict:
    """How many evaluation samples reached a gradient step (must be zero)."""
    touched = state.consumed_ids & set(eval_split.ids)
    return {"consumed_samples": len(state.consumed_ids), "eval_samples_touched": len(touched),
            "examples": sorted(touched)[:5]}
