"""MNIST / Fashion-MNIST loading from IDX files, subsets and batching."""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .errors import IDXFormatError
from .linalg import RngStream

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATASETS = ("mnist", "fashion-mnist")
SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# canonical gzip files and the md5 digests published with them
MIRRORS = {
    "mnist": ["https://ossci-datasets.s3.amazonaws.com/mnist/", "http://yann.lecun.com/exdb/mnist/"],
    "fashion-mnist": ["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
}
MD5 = {
    "mnist": {
        "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
        "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
        "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
        "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
    },
    "fashion-mnist": {
        "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
        "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
        "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
        "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
    },
}


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor  # (N, 1, 28, 28) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64 in 0..9
    name: str = "mnist"
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split)


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Raw unsigned-byte IDX array (gzip is detected from the file header)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IDXFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != n:
        raise IDXFormatError(f"{path}: expected {n} data bytes for dims {dims}, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None):
    arr = np.ascontiguousarray(array)
    if arr.dtype != np.uint8:
        raise TypeError("IDX writer only supports unsigned bytes")
    payload = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        # mtime=0 and an empty name field keep the gzip bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def load_idx_images(path) -> np.ndarray:
    raw = read_idx(path, IMAGES_MAGIC)
    if raw.ndim != 3:
        raise IDXFormatError(f"{path}: image file must have 3 dims, got {raw.shape}")
    return raw.astype(np.float32) / np.float32(255.0)


def load_idx_labels(path) -> np.ndarray:
    raw = read_idx(path, LABELS_MAGIC)
    if raw.ndim != 1:
        raise IDXFormatError(f"{path}: label file must have 1 dim, got {raw.shape}")
    if raw.size and raw.max() > 9:
        raise ValueError(f"{path}: label {raw.max()} outside 0..9")
    return raw.astype(np.int64)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get("UAP_DATA_DIR")
    if data_dir is None:
        raise FileNotFoundError("no dataset directory: pass --data-dir or set UAP_DATA_DIR")
    return Path(data_dir)


def _find(folder: Path, stem: str) -> Path:
    for cand in (folder / stem, folder / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {folder}")


def load_dataset(name: str, split: str, data_dir=None) -> Dataset:
    """Load ``<data_dir>/<name>/{train,t10k}-*-idx?-ubyte[.gz]``."""
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    folder = resolve_data_dir(data_dir) / name
    img_stem, lbl_stem = SPLIT_FILES[split]
    images = load_idx_images(_find(folder, img_stem))
    labels = load_idx_labels(_find(folder, lbl_stem))
    if len(images) != len(labels):
        raise IDXFormatError(f"{folder}: {len(images)} images vs {len(labels)} labels")
    return Dataset(torch.from_numpy(images).unsqueeze(1), torch.from_numpy(labels), name, split)


def save_dataset(dataset: Dataset, folder, compress: bool = False):
    """Write a dataset back as IDX (pixels are re-quantised to bytes)."""
    img_stem, lbl_stem = SPLIT_FILES[dataset.split]
    suffix = ".gz" if compress else ""
    pixels = np.rint(dataset.images.squeeze(1).numpy().astype(np.float64) * 255.0).astype(np.uint8)
    write_idx(Path(folder) / (img_stem + suffix), pixels)
    write_idx(Path(folder) / (lbl_stem + suffix), dataset.labels.numpy().astype(np.uint8))


def balanced_subset(dataset: Dataset, per_class: int, rng: RngStream, num_classes: int = 10) -> Dataset:
    labels = dataset.labels.numpy()
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} members, need {per_class}")
        chosen.append(members[rng.permutation(len(members))[:per_class]])
    idx = np.concatenate(chosen)
    return dataset.subset(idx[rng.permutation(len(idx))])


def batch_iterator(dataset: Dataset, batch_size: int, shuffle_seed: RngStream | int | None = None
                   ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """One epoch of (images, labels) batches; ``shuffle_seed=None`` keeps file order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = shuffle_seed if isinstance(shuffle_seed, RngStream) else RngStream(shuffle_seed)
        order = rng.permutation(n)
    order = torch.from_numpy(order)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def fetch(name: str, data_dir=None, timeout: float = 60.0) -> Path:
    """Download the four gzip IDX files for ``name`` and verify their digests."""
    folder = resolve_data_dir(data_dir) / name
    folder.mkdir(parents=True, exist_ok=True)
    for fname, digest in MD5[name].items():
        target = folder / fname
        if target.exists() and hashlib.md5(target.read_bytes()).hexdigest() == digest:
            continue
        errors = []
        for mirror in MIRRORS[name]:
            try:
                with urllib.request.urlopen(mirror + fname, timeout=timeout) as resp:
                    blob = resp.read()
            except OSError as e:
                errors.append(f"{mirror}: {e}")
                continue
            got = hashlib.md5(blob).hexdigest()
            if got != digest:
                errors.append(f"{mirror}: checksum {got} != {digest}")
                continue
            target.write_bytes(blob)
            log.info("fetched %s", target)
            break
        else:
            raise OSError(f"could not fetch {fname}: " + "; ".join(errors))
    return folder
