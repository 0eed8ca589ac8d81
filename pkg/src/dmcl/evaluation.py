"""Target-ToI evaluation, the ablation matrix, and branch-embedding export."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .datasets import SPLIT_LAYOUT, Split, Task, ZsdaDataset
from .errors import DataError
from .model import ArchitectureConfig, ModelBundle
from .trainer import AblationFlags, TrainConfig, eval_isolation_report, train

log = logging.getLogger(__name__)


def config_digest(*configs) -> str:
    blob = json.dumps([c.to_dict() if hasattr(c, "to_dict") else c for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalResult:
    target_toi_accuracy: float
    per_class_accuracy: dict[int, float]
    per_class_counts: dict[int, int]
    n_samples: int
    n_correct: int
    run_metadata: dict = field(default_factory=dict)


@torch.no_grad()
def predict_toi(model: ModelBundle, pixels: np.ndarray, batch_size: int = 500) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for start in range(0, len(pixels), batch_size):
        x = torch.as_tensor(np.ascontiguousarray(pixels[start:start + batch_size]), dtype=dtype)
        toi_logits, _, _ = model.forward_all(x)
        preds.append(toi_logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def evaluate(model: ModelBundle, eval_split: Split, run_metadata: dict | None = None) -> EvalResult:
    """Top-1 accuracy of the ToI head on target-domain ToI samples."""
    if len(eval_split) == 0:
        raise DataError("evaluation split is empty")
    if eval_split.task is not Task.TOI or eval_split.domain_label != 1:
        raise DataError("evaluation expects target-domain ToI samples")
    correct = predict_toi(model, eval_split.pixels) == eval_split.labels
    per_class, counts = {}, {}
    for c in np.unique(eval_split.labels):
        mask = eval_split.labels == c
        counts[int(c)] = int(mask.sum())
        per_class[int(c)] = float(correct[mask].mean())
    n_correct = int(correct.sum())
    return EvalResult(n_correct / len(eval_split), per_class, counts, len(eval_split), n_correct,
                      dict(run_metadata or {}))


# --- ablations ---------------------------------------------------------------------

VARIANTS = ("full", "w/o dual mixup", "w/o dual contrastive", "source-only")


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    """``source-only`` is not a row of the published ablation table; it is the natural floor."""
    if variant == "full":
        flags, mu = AblationFlags(False, False), base.grl_coefficient
    elif variant == "w/o dual mixup":
        flags, mu = AblationFlags(True, False), base.grl_coefficient
    elif variant == "w/o dual contrastive":
        flags, mu = AblationFlags(False, True), base.grl_coefficient
    elif variant == "source-only":
        flags, mu = AblationFlags(True, True), 0.0
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(base, seed=seed, ablation_flags=flags, grl_coefficient=mu)


@dataclass
class AblationRow:
    variant: str
    seed: int
    result: EvalResult
    isolation: dict


def run_ablation_matrix(dataset: ZsdaDataset, arch: ArchitectureConfig, base_cfg: TrainConfig, n_seeds: int,
                        variants=VARIANTS, seeds=None, on_trained=None) -> list[AblationRow]:
    """Train and evaluate every variant under every seed.

    ``on_trained(variant, seed, state)`` is called after each run, e.g. to
    export features before the model is discarded.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)[:n_seeds]
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = variant_config(base_cfg, variant, seed)
            try:
                state = train(dataset.training_view(), arch, cfg)
            except Exception as exc:
                raise RuntimeError(f"variant {variant!r} seed {seed} failed: {exc}") from exc
            meta = {"variant": variant, "seed": seed, "config_digest": config_digest(arch, cfg),
                    "iterations": state.iteration}
            result = evaluate(state.model, dataset.target_toi_eval, meta)
            rows.append(AblationRow(variant, seed, result, eval_isolation_report(state, dataset.target_toi_eval)))
            log.info("%s seed %d: accuracy %.4f", variant, seed, result.target_toi_accuracy)
            if on_trained is not None:
                on_trained(variant, seed, state)
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    lines = ["variant\tseed\taccuracy"]
    lines += [f"{r.variant}\t{r.seed}\t{r.result.target_toi_accuracy:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def ablation_summary(rows: list[AblationRow]) -> dict[str, float]:
    means = {}
    for r in rows:
        means.setdefault(r.variant, []).append(r.result.target_toi_accuracy)
    return {v: float(np.mean(a)) for v, a in means.items()}


def render_summary(rows: list[AblationRow]) -> str:
    summary = ablation_summary(rows)
    width = max(len(v) for v in summary)
    counts = {v: sum(r.variant == v for r in rows) for v in summary}
    out = [f"{'variant':<{width}}  mean acc  runs"]
    out += [f"{v:<{width}}  {100 * m:7.2f}%  {counts[v]}" for v, m in summary.items()]
    return "\n".join(out) + "\n"


# --- feature export ---------------------------------------------------------------

class EmbeddingSource(str, enum.Enum):
    G_F = "G_F"
    G_D = "G_D"


@dataclass
class FeatureDump:
    embeddings: np.ndarray  # rows x m
    task: np.ndarray  # "TOI" / "IRT"
    domain: np.ndarray  # 0 / 1
    class_index: np.ndarray
    split: np.ndarray
    embedding_source: EmbeddingSource

    def __len__(self):
        return len(self.embeddings)


@torch.no_grad()
def embed(model: ModelBundle, pixels: np.ndarray, source: EmbeddingSource, batch_size: int = 500) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(pixels), batch_size):
        x = torch.as_tensor(np.ascontiguousarray(pixels[start:start + batch_size]), dtype=dtype)
        z_f, z_d = model.embeddings(x)
        out.append((z_f if source is EmbeddingSource.G_F else z_d).double().numpy())
    return np.concatenate(out)


def export_features(model: ModelBundle, dataset: ZsdaDataset, source: EmbeddingSource | str = "G_F",
                    samples_per_split: int = 200, seed: int = 0) -> FeatureDump:
    source = EmbeddingSource(source)
    rng = np.random.default_rng(seed)
    parts = {k: [] for k in ("embeddings", "task", "domain", "class_index", "split")}
    for name, split in dataset.splits().items():
        if len(split) < samples_per_split:
            raise DataError(f"split {name} has {len(split)} samples, fewer than {samples_per_split}")
        idx = np.sort(rng.choice(len(split), size=samples_per_split, replace=False))
        parts["embeddings"].append(embed(model, split.pixels[idx], source))
        parts["task"].append(np.full(samples_per_split, split.task.value))
        parts["domain"].append(np.full(samples_per_split, split.domain_label))
        parts["class_index"].append(split.labels[idx])
        parts["split"].append(np.full(samples_per_split, name))
    return FeatureDump(**{k: np.concatenate(v) for k, v in parts.items()}, embedding_source=source)


def write_feature_dump(dump: FeatureDump, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = dump.embeddings.shape[1]
    header = ",".join([f"dim_{i}" for i in range(m)] + ["task", "domain", "class", "split"])
    lines = [f"# embedding_source={dump.embedding_source.value}", header]
    for row, t, d, c, s in zip(dump.embeddings, dump.task, dump.domain, dump.class_index, dump.split):
        lines.append(",".join([f"{v:.9g}" for v in row] + [str(t), str(int(d)), str(int(c)), str(s)]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_feature_dump(path) -> FeatureDump:
    lines = Path(path).read_text().splitlines()
    source = EmbeddingSource(lines[0].split("=", 1)[1]) if lines[0].startswith("#") else EmbeddingSource.G_F
    body = [l.split(",") for l in lines[(2 if lines[0].startswith("#") else 1):] if l.strip()]
    emb = np.array([[float(v) for v in r[:-4]] for r in body])
    return FeatureDump(emb, np.array([r[-4] for r in body]), np.array([int(r[-3]) for r in body]),
                       np.array([int(r[-2]) for r in body]), np.array([r[-1] for r in body]), source)


# --- disentanglement proxies ---------------------------------------------------------

SCORE_DEFINITIONS = (
    "domain_alignment = 1 - mean over tasks of the cosine distance between the source and target embedding "
    "centroids of that task, after subtracting the mean embedding of the whole dump (1 = each task's source "
    "and target centroids point the same way relative to the cloud centre)",
    "task_separation = (b - w) / max(b, w), b = mean Euclidean distance between ToI and IrT embeddings, "
    "w = mean Euclidean distance between embeddings of the same task (1 = tasks collapsed to distinct points)",
    "domain_alignment_uncentered = the same centroid cosine without subtracting the mean; post-ReLU features "
    "are non-negative, so this is close to 1 even for an untrained network and is reported only for reference",
)


@dataclass
class DisentanglementScore:
    domain_alignment: float
    task_separation: float
    degenerate: bool = False
    domain_alignment_uncentered: float = float("nan")
    definitions: tuple[str, ...] = SCORE_DEFINITIONS


def _mean_pairwise(a: np.ndarray, b: np.ndarray | None = None) -> float:
    if b is None:
        n = len(a)
        return float(cdist(a, a).sum() / (n * (n - 1))) if n > 1 else 0.0
    return float(cdist(a, b).mean())


def _centroid_alignment(z: np.ndarray, dump: FeatureDump, tasks) -> float:
    cos_dists = []
    for t in tasks:
        c_s = z[(dump.task == t) & (dump.domain == 0)].mean(axis=0)
        c_t = z[(dump.task == t) & (dump.domain == 1)].mean(axis=0)
        ns, nt = np.linalg.norm(c_s), np.linalg.norm(c_t)
        if ns <= 1e-12 and nt <= 1e-12:
            cos_dists.append(0.0)  # both centroids at the origin: coincident
        elif ns <= 1e-12 or nt <= 1e-12:
            cos_dists.append(1.0)
        else:
            cos_dists.append(1.0 - float(c_s @ c_t / (ns * nt)))
    return 1.0 - float(np.mean(cos_dists))


def disentanglement_score(dump: FeatureDump) -> DisentanglementScore:
    tasks = sorted(set(dump.task.tolist()))
    domains = sorted(set(dump.domain.tolist()))
    if len(tasks) < 2 or len(domains) < 2:
        raise DataError(f"degenerate dump: tasks {tasks}, domains {domains}")
    z = np.asarray(dump.embeddings, dtype=np.float64)
    alignment = _centroid_alignment(z - z.mean(axis=0), dump, tasks)
    uncentered = _centroid_alignment(z, dump, tasks)

    groups = [z[dump.task == t] for t in tasks]
    within = float(np.mean([_mean_pairwise(g) for g in groups]))
    between = _mean_pairwise(groups[0], groups[1])
    scale = max(between, within)
    if scale <= 1e-12:
        return DisentanglementScore(alignment, 0.0, True, uncentered)
    return DisentanglementScore(alignment, (between - within) / scale, False, uncentered)
