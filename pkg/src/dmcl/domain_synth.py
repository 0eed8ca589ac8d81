"""Synthetic domain shifts for gray-scale corpora: gray, color, edge, negative.

All images are unit-interval float arrays. Byte conversion happens only at
file boundaries (see ``to_bytes`` / ``from_bytes``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.feature import canny
from skimage.transform import resize

from .errors import ConfigError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"}


class DomainTag(str, enum.Enum):
    GRAY = "GRAY"
    COLOR = "COLOR"
    EDGE = "EDGE"
    NEGATIVE = "NEGATIVE"

    @classmethod
    def parse(cls, value: "str | DomainTag") -> "DomainTag":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(f"unknown domain tag {value!r}; expected one of {[t.value for t in cls]}") from None


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2:
            raise ValueError(f"RawImage expects a 2-D array, got shape {p.shape}")
        if p.shape[0] < 8 or p.shape[1] < 8:
            raise ValueError(f"RawImage must be at least 8x8, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("RawImage pixels must lie in [0, 1]")


@dataclass(frozen=True)
class DomainImage:
    pixels: np.ndarray  # H x W x 3
    tag: DomainTag
    source_id: str = ""


class PatchMode(str, enum.Enum):
    PROCEDURAL = "PROCEDURAL"
    EXTERNAL_DIRECTORY = "EXTERNAL_DIRECTORY"


@dataclass
class TexturePatchSource:
    """Yields H x W x 3 color patches for the color transform.

    PROCEDURAL patches are bilinearly upsampled ``grid x grid`` random RGB
    grids. EXTERNAL_DIRECTORY patches are random crops from image files.
    """

    mode: PatchMode = PatchMode.PROCEDURAL
    directory: str | None = None
    seed: int = 0
    grid: int = 4
    _files: list[Path] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self.mode = PatchMode(self.mode)
        if self.mode is PatchMode.EXTERNAL_DIRECTORY:
            if self.directory is None:
                raise ConfigError("EXTERNAL_DIRECTORY patch mode needs a directory")
            root = Path(self.directory)
            if not root.is_dir():
                raise ConfigError(f"patch directory {root} does not exist")
            self._files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
            if not self._files:
                raise ConfigError(f"patch directory {root} contains no readable images")

    def rng_for(self, index: int) -> np.random.Generator:
        # one derived stream per image index, so workers can split the corpus freely
        return np.random.default_rng([self.seed, index])

    def sample(self, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
        if self.mode is PatchMode.PROCEDURAL:
            grid = rng.random((self.grid, self.grid, 3))
            patch = resize(grid, (height, width, 3), order=1, mode="edge", anti_aliasing=False)
            return np.clip(patch, 0.0, 1.0)
        path = self._files[rng.integers(len(self._files))]
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        h, w = arr.shape[:2]
        if h < height or w < width:
            scale = max(height / h, width / w)
            arr = resize(arr, (int(np.ceil(h * scale)), int(np.ceil(w * scale)), 3), order=1, anti_aliasing=True)
            h, w = arr.shape[:2]
        top = rng.integers(h - height + 1)
        left = rng.integers(w - width + 1)
        return np.clip(arr[top : top + height, left : left + width], 0.0, 1.0)


def to_negative(img: RawImage) -> RawImage:
    return RawImage(1.0 - np.asarray(img.pixels), img.source_id)


def to_edge(img: RawImage, low_threshold: float = 0.1, high_threshold: float = 0.3, sigma: float = 1.0) -> RawImage:
    """Binary Canny edge map; thresholds are fractions of the max intensity."""
    if not 0.0 < low_threshold < high_threshold < 1.0:
        raise ConfigError(f"need 0 < low < high < 1, got low={low_threshold}, high={high_threshold}")
    edges = canny(np.asarray(img.pixels, dtype=np.float64), sigma=sigma,
                  low_threshold=low_threshold, high_threshold=high_threshold)
    return RawImage(edges.astype(np.float64), img.source_id)


def to_color(img: RawImage, patches: TexturePatchSource, rng: np.random.Generator | None = None,
             patch: np.ndarray | None = None, blend: str = "absdiff", blend_weight: float = 0.5) -> np.ndarray:
    """Blend a gray image with a color patch.

    ``absdiff`` gives ``|img - patch|`` per channel; ``convex`` gives
    ``w * img + (1 - w) * patch``.
    """
    gray = np.asarray(img.pixels, dtype=np.float64)
    h, w = gray.shape
    if patch is None:
        patch = patches.sample(h, w, rng if rng is not None else patches.rng_for(0))
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (h, w, 3):
        raise ValueError(f"patch shape {patch.shape} does not match image {(h, w, 3)}")
    if blend == "absdiff":
        out = np.abs(gray[..., None] - patch)
    elif blend == "convex":
        out = blend_weight * gray[..., None] + (1.0 - blend_weight) * patch
    else:
        raise ConfigError(f"unknown blend {blend!r}")
    return np.clip(out, 0.0, 1.0)


def _replicate(p: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(p, dtype=np.float64)[..., None], 3, axis=-1)


def synthesize_domain(corpus: list[RawImage], tag: DomainTag | str, seed: int = 0,
                      patches: TexturePatchSource | None = None, low_threshold: float = 0.1,
                      high_threshold: float = 0.3, blend: str = "absdiff") -> list[DomainImage]:
    tag = DomainTag.parse(tag)
    if not corpus:
        raise ValueError("corpus is empty")
    if tag is DomainTag.COLOR:
        if patches is None:
            patches = TexturePatchSource(seed=seed)
        elif patches.seed != seed:
            patches = TexturePatchSource(patches.mode, patches.directory, seed, patches.grid)
    out = []
    for i, img in enumerate(corpus):
        if tag is DomainTag.GRAY:
            px = _replicate(img.pixels)
        elif tag is DomainTag.NEGATIVE:
            px = _replicate(to_negative(img).pixels)
        elif tag is DomainTag.EDGE:
            px = _replicate(to_edge(img, low_threshold, high_threshold).pixels)
        else:
            px = to_color(img, patches, patches.rng_for(i), blend=blend)
        out.append(DomainImage(px, tag, img.source_id))
    return out


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float32) / 255.0
