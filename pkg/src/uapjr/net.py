"""Layer-stack classifier with reverse-mode gradients w.r.t. parameters and inputs.

Gradients come from torch autograd. The network is a plain ordered list of
layer specs plus parameter tensors, so the same object serves float32
training and float64 verification (``net.to(torch.float64)``).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, StaleTraceError
from .linalg import RngStream

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class MaxPool:
    window: int
    kind: str = field(default="max_pool", init=False)


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


Layer = Union[Conv2d, MaxPool, Dense, ReLU]
_KINDS = {"conv2d": Conv2d, "max_pool": MaxPool, "dense": Dense, "relu": ReLU}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    cls = _KINDS[d.pop("kind")]
    return cls(**d)


def _out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv2d):
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects (C,H,W) input, got {shape}")
        c, h, w = shape
        k, s, pad = layer.kernel, layer.stride, layer.padding
        oh, ow = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {k} too large for input {shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"max_pool expects (C,H,W) input, got {shape}")
        c, h, w = shape
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, Dense):
        return (layer.out_features,)
    return shape


def _param_shapes(layer: Layer, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if isinstance(layer, Conv2d):
        return {
            "weight": (layer.out_channels, in_shape[0], layer.kernel, layer.kernel),
            "bias": (layer.out_channels,),
        }
    if isinstance(layer, Dense):
        return {"weight": (layer.out_features, math.prod(in_shape)), "bias": (layer.out_features,)}
    return {}


class Network:
    """Ordered layer stack producing ``num_classes`` logits (no softmax)."""

    def __init__(self, layers, input_shape, num_classes, params=None, dtype=torch.float32):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_out_shape(layer, shapes[-1]))
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network ends in shape {shapes[-1]}, expected ({self.num_classes},)")
        self.shapes = shapes
        expected = [_param_shapes(l, s) for l, s in zip(self.layers, shapes)]
        if params is None:
            params = [{k: torch.zeros(v, dtype=dtype) for k, v in e.items()} for e in expected]
        if len(params) != len(expected):
            raise ShapeError("parameter list does not match layer list")
        for i, (got, want) in enumerate(zip(params, expected)):
            if set(got) != set(want) or any(tuple(got[k].shape) != want[k] for k in want):
                raise ShapeError(f"layer {i}: parameter shapes {_shapes(got)} != {want}")
        self.params: list[dict[str, torch.Tensor]] = [
            {k: torch.as_tensor(t, dtype=dtype).detach().clone().requires_grad_(True) for k, t in p.items()}
            for p in params
        ]

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32

    def parameters(self) -> list[torch.Tensor]:
        return [t for p in self.params for _, t in sorted(p.items())]

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        return [(f"{i}.{k}", t) for i, p in enumerate(self.params) for k, t in sorted(p.items())]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def versions(self) -> tuple[int, ...]:
        return tuple(t._version for t in self.parameters())

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        for layer, p in zip(self.layers, self.params):
            if isinstance(layer, Conv2d):
                x = F.conv2d(x, p["weight"], p["bias"], stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, MaxPool):
                x = F.max_pool2d(x, layer.window)
            elif isinstance(layer, Dense):
                x = F.linear(x.reshape(x.shape[0], -1), p["weight"], p["bias"])
            else:
                x = F.relu(x)
        return x

    def predict(self, x: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
        """argmax of the logits; ties go to the lowest class index."""
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(x[i:i + batch_size].to(self.dtype)).argmax(dim=1))
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)

    def to(self, dtype: torch.dtype) -> "Network":
        return Network(self.layers, self.input_shape, self.num_classes,
                       [{k: t.detach() for k, t in p.items()} for p in self.params], dtype=dtype)

    def copy(self) -> "Network":
        return self.to(self.dtype)

    def architecture(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _shapes(p):
    return {k: tuple(v.shape) for k, v in p.items()}


@dataclass
class ForwardTrace:
    """Autograd graph of one forward pass, tied to a parameter snapshot."""

    net: Network
    inputs: torch.Tensor
    logits: torch.Tensor
    param_versions: tuple[int, ...]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    def check_fresh(self):
        if self.net.versions() != self.param_versions:
            raise StaleTraceError("parameters changed since this forward pass; run forward again")


def _check_batch(net: Network, batch: torch.Tensor):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeError(f"expected batch of shape (B, {', '.join(map(str, net.input_shape))}), "
                         f"got {tuple(batch.shape)}")


def forward(net: Network, batch) -> tuple[torch.Tensor, ForwardTrace]:
    batch = torch.as_tensor(batch)
    _check_batch(net, batch)
    x = batch.detach().to(net.dtype).clone().requires_grad_(True)
    with torch.enable_grad():
        logits = net(x)
    return logits.detach(), ForwardTrace(net, x, logits, net.versions())


def _upstream(trace: ForwardTrace, upstream) -> torch.Tensor:
    trace.check_fresh()
    up = torch.as_tensor(upstream, dtype=trace.logits.dtype)
    if up.shape != trace.logits.shape:
        raise ShapeError(f"upstream shape {tuple(up.shape)} != logits shape {tuple(trace.logits.shape)}")
    return up


def backward_params(trace: ForwardTrace, upstream) -> list[dict[str, torch.Tensor]]:
    """Gradient of <upstream, logits> w.r.t. every parameter, per layer."""
    up = _upstream(trace, upstream)
    names = trace.net.named_parameters()
    grads = torch.autograd.grad(trace.logits, [t for _, t in names], up,
                                retain_graph=True, allow_unused=True)
    out: list[dict[str, torch.Tensor]] = [{} for _ in trace.net.params]
    for (name, t), g in zip(names, grads):
        i, k = name.split(".")
        out[int(i)][k] = torch.zeros_like(t) if g is None else g
    return out


def backward_input(trace: ForwardTrace, upstream) -> torch.Tensor:
    """Gradient of <upstream, logits> w.r.t. the input batch."""
    up = _upstream(trace, upstream)
    (g,) = torch.autograd.grad(trace.logits, trace.inputs, up, retain_graph=True)
    return g


def lenet_layers(num_classes: int = 10) -> list[Layer]:
    return [
        Conv2d(6, 5, padding=2), ReLU(), MaxPool(2),
        Conv2d(16, 5), ReLU(), MaxPool(2),
        Dense(120), ReLU(),
        Dense(84), ReLU(),
        Dense(num_classes),
    ]


def build_lenet(input_shape=(1, 28, 28), num_classes: int = 10, rng: RngStream | None = None,
                dtype=torch.float32) -> Network:
    """LeNet-5 variant with Kaiming-uniform weights and zero biases."""
    rng = rng if rng is not None else RngStream(0)
    net = Network(lenet_layers(num_classes), input_shape, num_classes, dtype=dtype)
    params = []
    for p in net.params:
        init = {}
        for k, t in p.items():
            if k == "weight":
                fan_in = math.prod(t.shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                init[k] = torch.from_numpy(rng.uniform(-bound, bound, tuple(t.shape)))
            else:
                init[k] = torch.zeros(t.shape, dtype=torch.float64)
        params.append(init)
    return Network(net.layers, input_shape, num_classes, params, dtype=dtype)


def save_checkpoint(path, net: Network, config_hash: str = "", extra: dict | None = None) -> str:
    """Write an .npz holding the architecture, raw parameter arrays and metadata.

    Returns the sha256 of the file bytes.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "architecture": net.architecture(),
        "dtype": str(net.dtype).replace("torch.", ""),
        "config_hash": config_hash,
        "parameter_hash": net.parameter_hash(),
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in net.named_parameters()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    data = _npz_bytes(arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    # np.savez stamps the current time into the zip; fixed timestamps keep reruns byte-identical
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        arch = meta["architecture"]
        layers = [layer_from_dict(d) for d in arch["layers"]]
        dtype = getattr(torch, meta["dtype"])
        params: list[dict[str, torch.Tensor]] = [{} for _ in layers]
        for name in z.files:
            if name == "__meta__":
                continue
            i, k = name.split(".")
            params[int(i)][k] = torch.from_numpy(z[name].copy())
    net = Network(layers, arch["input_shape"], arch["num_classes"], params, dtype=dtype)
    if net.parameter_hash() != meta["parameter_hash"]:
        raise ValueError(f"{path}: parameter hash mismatch, file is corrupt")
    meta["file_sha256"] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return net, meta
