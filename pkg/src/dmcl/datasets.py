"""ZSDA splits, label spaces, manifests and triplet mini-batch sampling.

A dataset has four splits. Three feed training (source ToI, source IrT,
target IrT); the fourth (target ToI) is reachable only through
``ZsdaDataset.target_toi_eval`` and is never part of a ``TrainingView``.

Class indices are local to each task's label space.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .domain_synth import from_bytes
from .errors import ConfigError, DataError

SPLIT_NAMES = ("source_toi", "source_irt", "target_irt", "target_toi_eval")
LABEL_SPACES_FILE = "label_spaces.json"


class Task(str, enum.Enum):
    TOI = "TOI"
    IRT = "IRT"


# split name -> (task, domain label)
SPLIT_LAYOUT = {
    "source_toi": (Task.TOI, 0),
    "source_irt": (Task.IRT, 0),
    "target_irt": (Task.IRT, 1),
    "target_toi_eval": (Task.TOI, 1),
}


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    class_index: int
    task: Task
    domain_label: float
    sample_id: str = ""


@dataclass(frozen=True)
class LabelSpaces:
    toi_classes: tuple[str, ...]
    irt_classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "toi_classes", tuple(self.toi_classes))
        object.__setattr__(self, "irt_classes", tuple(self.irt_classes))
        if not self.toi_classes or not self.irt_classes:
            raise DataError("both label spaces must be nonempty")
        overlap = set(self.toi_classes) & set(self.irt_classes)
        if overlap:
            raise DataError(f"ToI and IrT label spaces overlap: {sorted(overlap)}")

    def size(self, task: Task) -> int:
        return len(self.toi_classes) if Task(task) is Task.TOI else len(self.irt_classes)

    def to_json(self) -> dict:
        return {"toi_classes": list(self.toi_classes), "irt_classes": list(self.irt_classes)}


@dataclass(frozen=True)
class Split:
    """A homogeneous block of samples: one task, one domain.

    Pixels are stored stacked (N x H x W x 3, float32) for speed; indexing
    and iteration yield ``LabeledImage`` records.
    """

    name: str
    pixels: np.ndarray
    labels: np.ndarray
    task: Task
    domain_label: int
    ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=object))
        n = len(self.labels)
        if self.pixels.shape[0] != n or len(self.ids) != n:
            raise DataError(f"split {self.name}: pixels/labels/ids length mismatch")
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise DataError(f"split {self.name}: pixels must be N x H x W x 3, got {self.pixels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]), self.task, float(self.domain_label), str(self.ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def domain_labels(self) -> np.ndarray:
        return np.full(len(self), float(self.domain_label), dtype=np.float32)

    def take(self, index) -> "Split":
        index = np.asarray(index, dtype=np.int64)
        return Split(self.name, self.pixels[index], self.labels[index], self.task, self.domain_label, self.ids[index])


@dataclass(frozen=True)
class TrainingView:
    """Everything training may touch. Deliberately has no evaluation split."""

    source_toi: Split
    source_irt: Split
    target_irt: Split
    label_spaces: LabelSpaces

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.source_toi.pixels.shape[1:])


@dataclass(frozen=True)
class ZsdaDataset:
    source_toi: Split
    source_irt: Split
    target_irt: Split
    target_toi_eval: Split
    label_spaces: LabelSpaces

    def __post_init__(self):
        self.validate()

    def splits(self) -> dict[str, Split]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def validate(self) -> list[str]:
        """Check every structural invariant; raise DataError on the first failure.

        Returns the list of checks that passed, for reporting.
        """
        passed = []
        shapes = set()
        for name, split in self.splits().items():
            task, domain = SPLIT_LAYOUT[name]
            if len(split) == 0:
                raise DataError(f"split {name} is empty")
            if split.task is not task:
                raise DataError(f"split {name} has task {split.task.value}, expected {task.value}")
            if split.domain_label != domain:
                raise DataError(f"split {name} has domain {split.domain_label}, expected {domain}")
            n_classes = self.label_spaces.size(task)
            bad = np.flatnonzero((split.labels < 0) | (split.labels >= n_classes))
            if bad.size:
                raise DataError(f"split {name}: sample {split.ids[bad[0]]} has class {split.labels[bad[0]]} "
                                f"outside the {task.value} label space of size {n_classes}")
            shapes.add(split.pixels.shape[1:])
            passed.append(f"{name}: n={len(split)} task={task.value} domain={domain} classes<{n_classes}")
        if len(shapes) != 1:
            raise DataError(f"splits disagree on image shape: {sorted(shapes)}")
        passed.append("label spaces disjoint and nonempty")
        return passed

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_toi, self.source_irt, self.target_irt, self.label_spaces)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.source_toi.pixels.shape[1:])


@dataclass(frozen=True)
class TripletBatch:
    xs_r: Split
    xs_ir: Split
    xt_ir: Split

    def __post_init__(self):
        k = len(self.xs_r)
        if k < 2 or len(self.xs_ir) != k or len(self.xt_ir) != k:
            raise DataError(f"triplet batch needs three equal lists of K >= 2, got "
                            f"{len(self.xs_r)}, {len(self.xs_ir)}, {len(self.xt_ir)}")

    @property
    def k(self) -> int:
        return len(self.xs_r)

    def sample_ids(self) -> set[str]:
        return set(self.xs_r.ids) | set(self.xs_ir.ids) | set(self.xt_ir.ids)


def partition_label_space(all_classes, toi_count: int, seed: int = 0) -> LabelSpaces:
    all_classes = list(all_classes)
    if not 1 <= toi_count < len(all_classes):
        raise ConfigError(f"toi_count must be in [1, {len(all_classes) - 1}], got {toi_count}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(all_classes), size=toi_count, replace=False).tolist())
    toi = [c for i, c in enumerate(all_classes) if i in chosen]
    irt = [c for i, c in enumerate(all_classes) if i not in chosen]
    return LabelSpaces(tuple(toi), tuple(irt))


def sample_triplet_batch(ds: TrainingView | ZsdaDataset, k: int, rng: np.random.Generator) -> TripletBatch:
    """Draw K distinct samples from each training split (with replacement across calls)."""
    picks = []
    for split in (ds.source_toi, ds.source_irt, ds.target_irt):
        if len(split) < k:
            raise DataError(f"split {split.name} has {len(split)} samples, fewer than k={k}")
        picks.append(split.take(rng.choice(len(split), size=k, replace=False)))
    return TripletBatch(*picks)


# --- on-disk manifests -------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_bytes(np.asarray(im.convert("RGB")))


def load_manifest(root) -> ZsdaDataset:
    """Load ``<root>/<split>.tsv`` for all four splits plus ``label_spaces.json``.

    Manifest lines are ``relative_path<TAB>class_index<TAB>TOI|IRT<TAB>0|1``;
    paths are relative to ``root``.
    """
    root = Path(root)
    ls_path = root / LABEL_SPACES_FILE
    if not ls_path.is_file():
        raise DataError(f"missing {ls_path}")
    spaces = json.loads(ls_path.read_text())
    label_spaces = LabelSpaces(tuple(spaces["toi_classes"]), tuple(spaces["irt_classes"]))
    splits = {}
    for name in SPLIT_NAMES:
        path = root / f"{name}.tsv"
        if not path.is_file():
            raise DataError(f"missing split manifest {path}")
        task, domain = SPLIT_LAYOUT[name]
        n_classes = label_spaces.size(task)
        pixels, labels, ids = [], [], []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{where}: expected 4 tab-separated fields, got {len(parts)}")
            rel, cls, line_task, line_domain = parts
            try:
                cls = int(cls)
                line_domain = int(line_domain)
                line_task = Task(line_task)
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            if line_task is not task:
                raise DataError(f"{where}: task {line_task.value} in split {name} (expected {task.value})")
            if line_domain != domain:
                raise DataError(f"{where}: domain {line_domain} in split {name} (expected {domain})")
            if not 0 <= cls < n_classes:
                raise DataError(f"{where}: class index {cls} outside the {task.value} label space "
                                f"(size {n_classes})")
            img_path = root / rel
            if not img_path.is_file():
                raise DataError(f"{where}: image {rel} not found")
            pixels.append(read_image(img_path))
            labels.append(cls)
            ids.append(rel)
        if not labels:
            raise DataError(f"split {name} is empty ({path})")
        splits[name] = Split(name, np.stack(pixels), np.array(labels), task, domain, np.array(ids, dtype=object))
    return ZsdaDataset(label_spaces=label_spaces, **splits)


def write_manifest(ds: ZsdaDataset, root, image_dirs: dict[str, str] | None = None) -> Path:
    """Write a dataset as PNG files plus the four manifests and label spaces."""
    from .domain_synth import to_bytes

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / LABEL_SPACES_FILE).write_text(json.dumps(ds.label_spaces.to_json(), indent=2) + "\n")
    for name, split in ds.splits().items():
        sub = (image_dirs or {}).get(name, name)
        (root / sub).mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(len(split)):
            rel = f"{sub}/{i:06d}.png"
            Image.fromarray(to_bytes(split.pixels[i])).save(root / rel)
            lines.append(f"{rel}\t{split.labels[i]}\t{split.task.value}\t{split.domain_label}")
        (root / f"{name}.tsv").write_text("\n".join(lines) + "\n")
    return root
