"""Universal adversarial perturbations under an l-inf budget, and their metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .config import config_hash
from .data import Dataset, batch_iterator
from .errors import DegenerateInputError
from .jacobian import dominant_singular_direction, stacked_jacobian
from .linalg import RngStream
from .net import Network

ATTACK_KINDS = ("untargeted", "targeted", "svd")


@dataclass
class AttackConfig:
    epsilon: float
    iterations: int = 100
    batch_size: int = 200
    step_size: float | None = None  # defaults to epsilon / 10
    target_class: int | None = None
    seed: int = 0
    craft_split: str = "train"
    clamp_inputs: bool = True
    random_init: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.target_class is not None and not 0 <= self.target_class <= 9:
            raise ValueError("target_class must be in 0..9")

    @property
    def step(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def hash(self) -> str:
        return config_hash(asdict(self))


@dataclass
class Perturbation:
    delta: np.ndarray  # float64, shape of one input
    epsilon: float
    norm_type: str = "linf"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if np.abs(self.delta).max(initial=0.0) > self.epsilon + 1e-9:
            raise ValueError("perturbation exceeds its l-inf budget")

    def save(self, path) -> Path:
        """Raw little-endian float64 array plus a ``.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.delta.astype("<f8").tobytes())
        side = {"shape": list(self.delta.shape), "dtype": "<f8", "epsilon": self.epsilon,
                "norm": self.norm_type, **self.provenance}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Perturbation":
        path = Path(path)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        delta = np.frombuffer(path.read_bytes(), dtype=side.pop("dtype")).reshape(side.pop("shape"))
        return cls(delta.astype(np.float64), side.pop("epsilon"), side.pop("norm"), side)

    def to_image(self, path):
        """28x28 greyscale PNG with the perturbation rescaled to [0, 255]."""
        from PIL import Image

        img = self.delta.reshape(self.delta.shape[-2:])
        lo, hi = img.min(), img.max()
        scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
        Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(path)


def _perturb(x: torch.Tensor, delta: torch.Tensor, clamp: bool, dtype) -> torch.Tensor:
    xa = x.to(torch.float64) + delta
    if clamp:
        xa = xa.clamp(0.0, 1.0)
    return xa.to(dtype)


def perturbed_predictions(net: Network, images: torch.Tensor, delta, clamp_inputs: bool = True,
                          batch_size: int = 1000) -> torch.Tensor:
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64))
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            xa = _perturb(images[i:i + batch_size], d, clamp_inputs, net.dtype)
            out.append(net(xa).argmax(dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def evaluate_uer(net: Network, test_set: Dataset, delta, clamp_inputs: bool = True) -> float:
    """Fraction of inputs whose prediction under ``delta`` differs from the true label."""
    pred = perturbed_predictions(net, test_set.images, delta, clamp_inputs)
    return float((pred != test_set.labels).double().mean())


def evaluate_tsr(net: Network, test_set: Dataset, delta, target: int, clamp_inputs: bool = True) -> float:
    """Fraction of all inputs (class ``target`` included) classified as ``target``."""
    pred = perturbed_predictions(net, test_set.images, delta, clamp_inputs)
    return float((pred == target).double().mean())


def _batches(data: Dataset, batch_size: int, rng: RngStream):
    epoch = 0
    while True:
        yield from batch_iterator(data, batch_size, rng.child("epoch", epoch))
        epoch += 1


def sgd_uap(net: Network, data: Dataset, config: AttackConfig,
            on_step: Callable[[int, np.ndarray], None] | None = None) -> Perturbation:
    """Mini-batch sign-gradient UAP with exact l-inf projection after every step.

    Untargeted: ascend the summed cross-entropy w.r.t. the true labels.
    Targeted (``config.target_class`` set): descend the cross-entropy w.r.t.
    the target label for every input in the batch.
    """
    eps = float(config.epsilon)
    rng = RngStream(config.seed)
    shape = tuple(data.images.shape[1:])
    if config.random_init:
        delta = torch.from_numpy(rng.child("init").uniform(-eps, eps, shape))
    else:
        delta = torch.zeros(shape, dtype=torch.float64)
    target = config.target_class
    sign = 1.0 if target is None else -1.0
    batches = _batches(data, config.batch_size, rng.child("batches"))
    for it in range(config.iterations):
        x, y = next(batches)
        if target is not None:
            y = torch.full_like(y, target)
        d = delta.clone().requires_grad_(True)
        loss = F.cross_entropy(net(_perturb(x, d, config.clamp_inputs, net.dtype)), y, reduction="sum")
        (g,) = torch.autograd.grad(loss, d)
        delta = (delta + sign * config.step * torch.sign(g)).clamp(-eps, eps)
        if on_step is not None:
            on_step(it, delta.numpy())
    kind = "untargeted" if target is None else "targeted"
    return Perturbation(delta.numpy().copy(), eps, provenance={
        "attack": f"sgd-{kind}", "attack_config_hash": config.hash, "target_class": target,
        "source_parameter_hash": net.parameter_hash()})


def sgd_uap_untargeted(net: Network, data: Dataset, config: AttackConfig, on_step=None) -> Perturbation:
    if config.target_class is not None:
        raise ValueError("untargeted attack given a target class")
    return sgd_uap(net, data, config, on_step)


def sgd_uap_targeted(net: Network, data: Dataset, config: AttackConfig, on_step=None) -> Perturbation:
    if config.target_class is None:
        raise ValueError("targeted attack needs target_class")
    return sgd_uap(net, data, config, on_step)


def svd_uap(net: Network, samples: Dataset, epsilon: float, p=np.inf, clamp_inputs: bool = True,
            rng: RngStream | None = None) -> Perturbation:
    """UAP from the dominant (p, 2) singular direction of the stacked Jacobian.

    The direction is scaled onto the l-inf ball boundary (for p=inf this is a
    sign pattern times epsilon); of +delta and -delta the one with the higher
    evasion rate on ``samples`` is returned.
    """
    rng = rng if rng is not None else RngStream(0)
    jbar = stacked_jacobian(net.to(torch.float64), samples.images)
    try:
        v, value = dominant_singular_direction(jbar, p, rng)
    except DegenerateInputError:
        raise DegenerateInputError("all sample Jacobians are zero; cannot build an SVD UAP") from None
    v = np.asarray(v, dtype=np.float64)
    v = v / np.abs(v).max()
    delta = (epsilon * v).reshape(samples.images.shape[1:])
    delta = np.clip(delta, -epsilon, epsilon)
    best = max((delta, -delta), key=lambda d: evaluate_uer(net, samples, d, clamp_inputs))
    return Perturbation(best, float(epsilon), provenance={
        "attack": "svd", "p": "inf" if p == np.inf else p, "n_samples": len(samples),
        "singular_value": value, "source_parameter_hash": net.parameter_hash()})


def random_sign_uap(shape, epsilon: float, rng: RngStream) -> Perturbation:
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return Perturbation(epsilon * signs, float(epsilon), provenance={"attack": "random-sign"})


def targeted_tsrs(net: Network, craft: Dataset, test_set: Dataset, config: AttackConfig,
                  classes=range(10)) -> list[float]:
    """TSR of one targeted UAP per class."""
    out = []
    for c in classes:
        pert = sgd_uap_targeted(net, craft, replace(config, target_class=c))
        out.append(evaluate_tsr(net, test_set, pert.delta, c, config.clamp_inputs))
    return out


def epsilon_sweep(net: Network, craft: Dataset, test_set: Dataset, eps_list, attack_kind: str = "untargeted",
                  base: AttackConfig | None = None, n_samples: int = 128) -> list[dict]:
    """One row per epsilon: UER (untargeted/svd) or mean and sd of per-class TSR (targeted)."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty epsilon list")
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon list must be ascending")
    if attack_kind not in ATTACK_KINDS:
        raise ValueError(f"attack_kind must be one of {ATTACK_KINDS}")
    base = base if base is not None else AttackConfig(epsilon=0.0)
    rows = []
    for eps in eps_list:
        cfg = replace(base, epsilon=eps, target_class=None)
        if attack_kind == "untargeted":
            pert = sgd_uap_untargeted(net, craft, cfg)
            rows.append({"epsilon": eps, "metric": "uer",
                         "value": evaluate_uer(net, test_set, pert.delta, cfg.clamp_inputs), "sd": 0.0})
        elif attack_kind == "svd":
            rng = RngStream(cfg.seed)
            idx = rng.child("samples").permutation(len(craft))[:n_samples]
            pert = svd_uap(net, craft.subset(idx), eps, clamp_inputs=cfg.clamp_inputs, rng=rng.child("power"))
            rows.append({"epsilon": eps, "metric": "uer",
                         "value": evaluate_uer(net, test_set, pert.delta, cfg.clamp_inputs), "sd": 0.0})
        else:
            tsrs = targeted_tsrs(net, craft, test_set, cfg)
            rows.append({"epsilon": eps, "metric": "tsr", "value": float(np.mean(tsrs)),
                         "sd": float(np.std(tsrs)), "per_class": tsrs})
    return rows
