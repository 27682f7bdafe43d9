import os
from pathlib import Path

import numpy as np
import pytest
import torch

from uapjr.data import Dataset, save_dataset
from uapjr.linalg import RngStream
from uapjr.net import Conv2d, Dense, MaxPool, Network, ReLU, build_lenet

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / "runs"
DATA_DIR = Path(os.environ.get("UAP_DATA_DIR", "/root/data"))


def random_network(layers, input_shape, num_classes=10, seed=0, scale=0.5, dtype=torch.float64):
    """Network with Gaussian weights and nonzero biases (so ReLU kinks sit off the grid)."""
    rng = RngStream(seed)
    net = Network(layers, input_shape, num_classes, dtype=dtype)
    params = []
    for i, p in enumerate(net.params):
        params.append({k: torch.from_numpy(scale * rng.child(i, k).normal(tuple(t.shape))) for k, t in p.items()})
    return Network(layers, input_shape, num_classes, params, dtype=dtype)


def tiny_layers():
    return [Conv2d(3, 3, padding=1), ReLU(), MaxPool(2), Dense(12), ReLU(), Dense(10)]


@pytest.fixture
def tiny_net():
    return random_network(tiny_layers(), (1, 8, 8))


@pytest.fixture
def lenet64():
    return build_lenet(rng=RngStream(7), dtype=torch.float64)


def synthetic_dataset(n, seed=0, shape=(1, 28, 28), name="mnist", split="train"):
    """Class-dependent blobs: class c brightens a 4-pixel-wide column band."""
    rng = RngStream(seed)
    labels = np.arange(n) % 10
    labels = labels[rng.permutation(n)]
    images = 0.3 * rng.uniform(size=(n, *shape))
    width = shape[-1]
    for i, c in enumerate(labels):
        lo = int(c * (width - 4) / 9)
        images[i, :, :, lo:lo + 4] += 0.6
    # quantise like IDX pixels so a save/load round trip is exact
    images = np.rint(np.clip(images, 0, 1) * 255) / 255
    return Dataset(torch.from_numpy(images.astype(np.float32)), torch.from_numpy(labels.astype(np.int64)),
                   name, split)


@pytest.fixture
def tiny_data():
    return synthetic_dataset(60, shape=(1, 8, 8))


@pytest.fixture(scope="session")
def idx_data_dir(tmp_path_factory):
    """A miniature ``<root>/mnist`` IDX tree (gzip) for CLI and loader tests."""
    root = tmp_path_factory.mktemp("idx")
    save_dataset(synthetic_dataset(300, seed=1, split="train"), root / "mnist", compress=True)
    save_dataset(synthetic_dataset(100, seed=2, split="test"), root / "mnist", compress=True)
    return root


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
