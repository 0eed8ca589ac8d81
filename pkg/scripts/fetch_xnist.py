"""Build data/xnist_base.npz (MNIST digits + Fashion-MNIST items).

Two sources are supported:

  * the npm packages ``mnist`` and ``fashion-mnist`` (default; fetched with
    ``npm pack``, which only needs access to an npm registry), or
  * local IDX files: ``--digits-idx IMAGES LABELS --fashion-idx IMAGES LABELS``.

Usage:
    python scripts/fetch_xnist.py [--per-class 600] [--out data/xnist_base.npz]
"""

import argparse
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from dmcl.xnist import DEFAULT_BASE_PATH, DIGIT_CLASSES, FASHION_CLASSES, read_idx, read_npm_json_dir, save_base_corpus


def npm_fetch(package: str, workdir: Path) -> Path:
    subprocess.run(["npm", "pack", package, "--silent"], cwd=workdir, check=True, stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob(f"{package}-*.tgz"))
    dest = workdir / package
    with tarfile.open(tgz) as tf:
        tf.extractall(dest)
    return dest / "package" / "src"


def cap_per_class(images, labels, per_class):
    keep = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in np.unique(labels)])
    return images[keep], labels[keep]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(DEFAULT_BASE_PATH))
    ap.add_argument("--per-class", type=int, default=600)
    ap.add_argument("--digits-idx", nargs=2, metavar=("IMAGES", "LABELS"))
    ap.add_argument("--fashion-idx", nargs=2, metavar=("IMAGES", "LABELS"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        if args.digits_idx:
            digits = read_idx(args.digits_idx[0]), read_idx(args.digits_idx[1]).astype(np.int64)
        else:
            digits = read_npm_json_dir(npm_fetch("mnist", tmp) / "digits")
        if args.fashion_idx:
            fashion = read_idx(args.fashion_idx[0]), read_idx(args.fashion_idx[1]).astype(np.int64)
        else:
            fashion = read_npm_json_dir(npm_fetch("fashion-mnist", tmp) / "clothes", per_class=args.per_class)

    digits = cap_per_class(*digits, args.per_class)
    fashion = cap_per_class(*fashion, args.per_class)
    out = save_base_corpus(args.out, {"digits": (*digits, DIGIT_CLASSES), "fashion": (*fashion, FASHION_CLASSES)})
    print(f"wrote {out}: digits {digits[0].shape}, fashion {fashion[0].shape}")


if __name__ == "__main__":
    main()
