"""Standard, Jacobian-regularised and universal-adversarial training."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from . import linalg
from .config import config_hash
from .data import Dataset, batch_iterator
from .errors import DivergenceError
from .linalg import RngStream
from .net import Network, build_lenet

log = logging.getLogger(__name__)

JR_MODES = ("exact", "proj")


@dataclass
class UATConfig:
    epsilon: float
    attack_step: float | None = None  # defaults to epsilon / 4
    inner_iters: int = 1

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.attack_step is None else self.attack_step


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    lambda_jr: float = 0.0
    jr_mode: str = "proj"
    n_proj: int = 1
    seed: int = 0
    uat: UATConfig | None = None
    clamp_inputs: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.uat, dict):
            self.uat = UATConfig(**self.uat)
        if self.lambda_jr < 0:
            raise ValueError("lambda_jr must be >= 0")
        if self.jr_mode not in JR_MODES:
            raise ValueError(f"jr_mode must be one of {JR_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.epochs < 0 or self.batch_size < 1 or self.n_proj < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and n_proj >= 1 required")
        if self.uat is not None and self.uat.epsilon < 0:
            raise ValueError("uat epsilon must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class TrainedModel:
    network: Network
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    clean_accuracy: float | None = None


class JointLoss(NamedTuple):
    loss: torch.Tensor
    ce: float
    jr: float
    grads: list[torch.Tensor]


def jr_penalty(net: Network, x: torch.Tensor, logits: torch.Tensor, mode: str, n_proj: int,
               rng: RngStream | None) -> torch.Tensor:
    """Differentiable batch mean of ||J(x_i)||_F^2 (exact or projected estimate)."""
    b, d = logits.shape
    if mode == "exact":
        total = logits.new_zeros(())
        for k in range(d):
            (g,) = torch.autograd.grad(logits[:, k].sum(), x, create_graph=True)
            total = total + (g * g).sum()
        return total / b
    v = linalg.sample_unit_sphere(d, rng, size=b * n_proj).reshape(n_proj, b, d)
    total = logits.new_zeros(())
    for j in range(n_proj):
        up = torch.from_numpy(v[j]).to(logits.dtype)
        (g,) = torch.autograd.grad(logits, x, up, create_graph=True)
        total = total + (g * g).sum()
    return d * total / (n_proj * b)


def joint_loss(net: Network, batch: torch.Tensor, labels: torch.Tensor, lambda_jr: float,
               jr_mode: str = "proj", rng: RngStream | None = None, n_proj: int = 1) -> JointLoss:
    """Mean cross-entropy + (lambda/2) * mean squared Frobenius norm of the input Jacobian."""
    if lambda_jr < 0:
        raise ValueError("lambda_jr must be >= 0")
    if len(batch) == 0:
        raise ValueError("empty batch")
    params = net.parameters()
    x = batch.to(net.dtype)
    if lambda_jr > 0:
        x = x.detach().clone().requires_grad_(True)
    logits = net(x)
    ce = F.cross_entropy(logits, labels)
    if lambda_jr > 0:
        if jr_mode == "proj" and rng is None:
            raise ValueError("projection mode needs an rng")
        jr = jr_penalty(net, x, logits, jr_mode, n_proj, rng)
        loss = ce + (lambda_jr / 2) * jr
        jr_value = float(jr.detach())
    else:
        loss = ce
        jr_value = 0.0
    grads = list(torch.autograd.grad(loss, params))
    return JointLoss(loss.detach(), float(ce.detach()), jr_value, grads)


def make_optimizer(net: Network, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=config.lr)
    return torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)


def evaluate_clean(net: Network, test_set: Dataset) -> float:
    pred = net.predict(test_set.images)
    return float((pred == test_set.labels).double().mean()) if len(test_set) else float("nan")


def _uap_ascent_step(net: Network, x, y, delta: torch.Tensor, step: float, eps: float, clamp: bool):
    d = delta.detach().clone().requires_grad_(True)
    xa = x + d
    if clamp:
        xa = xa.clamp(0.0, 1.0)
    loss = F.cross_entropy(net(xa), y, reduction="sum")
    (g,) = torch.autograd.grad(loss, d)
    return (delta + step * torch.sign(g)).clamp(-eps, eps).detach()


def train(config: TrainConfig, dataset: Dataset, test_set: Dataset | None = None,
          on_epoch: Callable[[dict], None] | None = None, net: Network | None = None) -> TrainedModel:
    """Train LeNet on ``dataset``; runs universal adversarial training when ``config.uat`` is set.

    Deterministic given ``config.seed``: the initial weights, shuffle order,
    projection vectors and UAP re-initialisations each come from their own
    child stream of the seed.
    """
    dtype = getattr(torch, config.dtype)
    root = RngStream(config.seed)
    if net is None:
        net = build_lenet(tuple(dataset.images.shape[1:]), 10, root.child("init"), dtype=dtype)
    opt = make_optimizer(net, config)
    uat = config.uat
    delta = None
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.time()
        jr_rng = root.child("jr", epoch)
        if uat is not None:
            eps = float(uat.epsilon)
            init = root.child("uat", epoch).uniform(-eps, eps, tuple(dataset.images.shape[1:]))
            delta = torch.from_numpy(init).to(dtype)
        sums = np.zeros(3)
        seen = 0
        for bi, (x, y) in enumerate(batch_iterator(dataset, config.batch_size, root.child("shuffle", epoch))):
            x = x.to(dtype)
            if uat is not None:
                for _ in range(uat.inner_iters):
                    delta = _uap_ascent_step(net, x, y, delta, uat.step, uat.epsilon, config.clamp_inputs)
                x = x + delta
                if config.clamp_inputs:
                    x = x.clamp(0.0, 1.0)
            res = joint_loss(net, x, y, config.lambda_jr, config.jr_mode, jr_rng, config.n_proj)
            if not math.isfinite(float(res.loss)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi} "
                                      f"(ce={res.ce}, jr={res.jr}); try a smaller lr or lambda_jr")
            opt.zero_grad(set_to_none=True)
            for p, g in zip(net.parameters(), res.grads):
                p.grad = g
            opt.step()
            sums += np.array([float(res.loss), res.ce, res.jr]) * len(y)
            seen += len(y)
        row = {
            "epoch": epoch,
            "train_loss": sums[0] / seen,
            "ce_loss": sums[1] / seen,
            "jr_term": sums[2] / seen,
            "clean_acc": evaluate_clean(net, test_set) if test_set is not None else float("nan"),
            "seconds": time.time() - t0,
        }
        history.append(row)
        log.info("epoch %d loss %.4f ce %.4f jr %.4f acc %.4f (%.0fs)", epoch, row["train_loss"],
                 row["ce_loss"], row["jr_term"], row["clean_acc"], row["seconds"])
        if on_epoch is not None:
            on_epoch(row)
    final = history[-1]["clean_acc"] if history else (evaluate_clean(net, test_set) if test_set else None)
    return TrainedModel(net, config, history, final)


def uat_train(config: TrainConfig, dataset: Dataset, test_set: Dataset | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> TrainedModel:
    if config.uat is None:
        raise ValueError("uat_train needs config.uat")
    return train(config, dataset, test_set, on_epoch)
