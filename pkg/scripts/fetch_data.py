"""Put MNIST and Fashion-MNIST IDX files under a data directory.

Tries the canonical mirrors first. When those are unreachable, falls back to
the npm registry:

* ``mnist-data`` ships the four original (uncompressed) MNIST IDX files.
* ``fashion-mnist`` ships per-class JSON arrays of 7000 byte images. Each
  class file holds the 1000 test images followed by the 6000 training
  images (class 0 marks the boundary with an empty entry), so the split is
  rebuilt from that layout and each split is shuffled with a fixed seed.

Usage: python scripts/fetch_data.py --data-dir ~/data [--offline-npm]
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from uapjr import data

log = logging.getLogger("fetch_data")

FASHION_TEST_PER_CLASS = 1000
FASHION_TRAIN_PER_CLASS = 6000
FASHION_SHUFFLE_SEED = 20170825


def npm_pack(package: str, workdir: Path) -> Path:
    out = subprocess.run(["npm", "pack", package, "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    return workdir / out


def mnist_from_npm(folder: Path, workdir: Path):
    tgz = npm_pack("mnist-data", workdir)
    with tarfile.open(tgz) as tf:
        for split in ("train", "test"):
            for stem in data.SPLIT_FILES[split]:
                member = tf.extractfile(f"package/data/{stem}")
                (folder / stem).write_bytes(member.read())


def fashion_from_npm(folder: Path, workdir: Path):
    tgz = npm_pack("fashion-mnist", workdir)
    splits = {"train": ([], []), "test": ([], [])}
    with tarfile.open(tgz) as tf:
        for c in range(10):
            rows = json.load(tf.extractfile(f"package/src/clothes/{c}.json"))["data"]
            rows = [r for r in rows if len(r) == 784]
            if len(rows) != FASHION_TEST_PER_CLASS + FASHION_TRAIN_PER_CLASS:
                raise ValueError(f"class {c}: {len(rows)} images, expected 7000")
            arr = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
            for split, part in (("test", arr[:FASHION_TEST_PER_CLASS]),
                                ("train", arr[FASHION_TEST_PER_CLASS:])):
                splits[split][0].append(part)
                splits[split][1].append(np.full(len(part), c, dtype=np.uint8))
    rng = np.random.Generator(np.random.Philox(FASHION_SHUFFLE_SEED))
    for split, (imgs, lbls) in splits.items():
        imgs, lbls = np.concatenate(imgs), np.concatenate(lbls)
        order = rng.permutation(len(lbls))
        img_stem, lbl_stem = data.SPLIT_FILES[split]
        data.write_idx(folder / img_stem, imgs[order])
        data.write_idx(folder / lbl_stem, lbls[order])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default=None, help="defaults to $UAP_DATA_DIR")
    ap.add_argument("--offline-npm", action="store_true", help="skip the canonical mirrors")
    ap.add_argument("--datasets", nargs="+", default=list(data.DATASETS), choices=data.DATASETS)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    root = data.resolve_data_dir(args.data_dir)
    builders = {"mnist": mnist_from_npm, "fashion-mnist": fashion_from_npm}
    for name in args.datasets:
        if not args.offline_npm:
            try:
                data.fetch(name, root)
                continue
            except OSError as e:
                log.warning("canonical download failed for %s (%s); using npm", name, e)
        if shutil.which("npm") is None:
            sys.exit("npm not available and canonical mirrors unreachable")
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory() as tmp:
            builders[name](folder, Path(tmp))
        for split in ("train", "test"):
            ds = data.load_dataset(name, split, root)
            counts = np.bincount(ds.labels.numpy(), minlength=10).tolist()
            log.info("%s/%s: %d images, per-class %s", name, split, len(ds), counts)


if __name__ == "__main__":
    main()
