"""X-NIST base corpora and the desk-scale ZSDA task builder.

The base corpus is one ``.npz`` holding gray-scale uint8 images per task
(``<task>_images``, ``<task>_labels``, ``<task>_classes``). It can be built
from raw MNIST-style IDX files or from the JSON layout shipped by the npm
``mnist`` / ``fashion-mnist`` packages (see ``scripts/fetch_xnist.py``).
"""

from __future__ import annotations

import gzip
import json
from pathlib import Path

import numpy as np

from .datasets import LabelSpaces, Split, Task, ZsdaDataset
from .domain_synth import DomainTag, RawImage, TexturePatchSource, from_bytes, synthesize_domain
from .errors import ConfigError, DataError

DIGIT_CLASSES = tuple(str(i) for i in range(10))
FASHION_CLASSES = ("T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
                   "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot")
DEFAULT_BASE_PATH = Path(__file__).resolve().parents[2] / "data" / "xnist_base.npz"


def read_idx(path) -> np.ndarray:
    """Read an IDX (ubyte) file, gzipped or not."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise DataError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def read_npm_json_dir(directory, per_class: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read ``<dir>/0.json .. 9.json`` (npm mnist / fashion-mnist layouts).

    The digit package stores one flat list of floats in [0, 1]; the fashion
    package stores a list of 784-byte images. Both become uint8 N x 28 x 28.
    """
    images, labels = [], []
    for cls in range(10):
        data = json.loads((Path(directory) / f"{cls}.json").read_text())["data"]
        if data and isinstance(data[0], list):
            # a few fashion records are truncated; keep complete 28 x 28 images only
            arr = np.asarray([row for row in data if len(row) == 784], dtype=np.float64)
        else:
            arr = np.round(np.asarray(data, dtype=np.float64) * 255.0)
        arr = arr.reshape(-1, 28, 28)
        if per_class is not None:
            arr = arr[:per_class]
        images.append(np.clip(arr, 0, 255).astype(np.uint8))
        labels.append(np.full(len(arr), cls, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def save_base_corpus(path, tasks: dict[str, tuple[np.ndarray, np.ndarray, tuple[str, ...]]]) -> Path:
    arrays = {}
    for name, (images, labels, classes) in tasks.items():
        arrays[f"{name}_images"] = np.asarray(images, dtype=np.uint8)
        arrays[f"{name}_labels"] = np.asarray(labels, dtype=np.int64)
        arrays[f"{name}_classes"] = np.asarray(classes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)
    return path


def load_base_corpus(path=DEFAULT_BASE_PATH) -> dict[str, tuple[np.ndarray, np.ndarray, tuple[str, ...]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"base corpus {path} not found; run scripts/fetch_xnist.py first")
    with np.load(path, allow_pickle=False) as z:
        names = sorted({k.rsplit("_", 1)[0] for k in z.files})
        return {n: (z[f"{n}_images"], z[f"{n}_labels"], tuple(str(c) for c in z[f"{n}_classes"])) for n in names}


def _balanced_pick(labels: np.ndarray, n: int, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    """Choose ``n`` indices with classes as balanced as the pool allows."""
    pool = np.setdiff1d(np.arange(len(labels)), exclude if exclude is not None else [])
    if len(pool) < n:
        raise DataError(f"need {n} images but only {len(pool)} are available")
    classes = np.unique(labels[pool])
    per_class = [rng.permutation(pool[labels[pool] == c]) for c in classes]
    picked, rank = [], 0
    while len(picked) < n:
        for group in per_class:
            if rank < len(group) and len(picked) < n:
                picked.append(group[rank])
        rank += 1
    return np.sort(np.array(picked, dtype=np.int64))


def _make_split(name: str, images: np.ndarray, labels: np.ndarray, index: np.ndarray, tag: DomainTag,
                task: Task, domain: int, prefix: str, seed: int, **synth_kwargs) -> Split:
    corpus = [RawImage(from_bytes(images[i]).astype(np.float64), f"{prefix}/{i}") for i in index]
    transformed = synthesize_domain(corpus, tag, seed=seed, **synth_kwargs)
    pixels = np.stack([t.pixels for t in transformed]).astype(np.float32)
    ids = np.array([f"{prefix}/{i}/{tag.value}" for i in index], dtype=object)
    return Split(name, pixels, labels[index], task, domain, ids)


def build_desk_dataset(base: dict | None = None, toi: str = "digits", irt: str = "fashion",
                       source_domain: DomainTag | str = DomainTag.GRAY,
                       target_domain: DomainTag | str = DomainTag.NEGATIVE,
                       n_train: int = 2000, n_eval: int = 2000, seed: int = 0,
                       patches: TexturePatchSource | None = None, low_threshold: float = 0.1,
                       high_threshold: float = 0.3) -> ZsdaDataset:
    """Assemble the four ZSDA splits from a base corpus.

    No base image appears in both a source and a target split: indices are
    partitioned per task before any domain transform.
    """
    base = load_base_corpus() if base is None else base
    if toi == irt:
        raise ConfigError("ToI and IrT must be different base tasks")
    for name in (toi, irt):
        if name not in base:
            raise ConfigError(f"base corpus has no task {name!r}; available: {sorted(base)}")
    src, tgt = DomainTag.parse(source_domain), DomainTag.parse(target_domain)
    rng = np.random.default_rng(seed)
    kw = dict(patches=patches, low_threshold=low_threshold, high_threshold=high_threshold)

    toi_img, toi_lab, toi_classes = base[toi]
    irt_img, irt_lab, irt_classes = base[irt]
    toi_src = _balanced_pick(toi_lab, n_train, rng)
    toi_eval = _balanced_pick(toi_lab, n_eval, rng, exclude=toi_src)
    irt_src = _balanced_pick(irt_lab, n_train, rng)
    irt_tgt = _balanced_pick(irt_lab, n_train, rng, exclude=irt_src)

    # domain-specific seeds keep COLOR patches from repeating across splits
    splits = dict(
        source_toi=_make_split("source_toi", toi_img, toi_lab, toi_src, src, Task.TOI, 0, toi, seed * 4 + 0, **kw),
        source_irt=_make_split("source_irt", irt_img, irt_lab, irt_src, src, Task.IRT, 0, irt, seed * 4 + 1, **kw),
        target_irt=_make_split("target_irt", irt_img, irt_lab, irt_tgt, tgt, Task.IRT, 1, irt, seed * 4 + 2, **kw),
        target_toi_eval=_make_split("target_toi_eval", toi_img, toi_lab, toi_eval, tgt, Task.TOI, 1, toi,
                                    seed * 4 + 3, **kw),
    )
    spaces = LabelSpaces(tuple(f"{toi}:{c}" for c in toi_classes), tuple(f"{irt}:{c}" for c in irt_classes))
    return ZsdaDataset(label_spaces=spaces, **splits)
