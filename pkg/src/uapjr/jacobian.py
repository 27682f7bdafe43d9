"""Input-output Jacobians of the logits and the quantities built from them.

All Jacobians are taken at the logits and returned as float64 numpy
arrays of shape (d, n), n being the flattened input size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import linalg
from .errors import DegenerateInputError, ShapeError
from .linalg import RngStream
from .net import Network, backward_input, forward


@dataclass
class Jacobian:
    matrix: np.ndarray
    input_id: object = None
    at_logits: bool = field(default=True, init=False)

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class StackedJacobian:
    matrix: np.ndarray
    input_ids: list
    block_rows: int

    def block(self, i: int) -> np.ndarray:
        return self.matrix[i * self.block_rows:(i + 1) * self.block_rows]

    def __len__(self):
        return len(self.input_ids)


def _as_batch(net: Network, xs) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(xs) if not isinstance(xs, torch.Tensor) else xs)
    if x.ndim == len(net.input_shape):
        x = x.unsqueeze(0)
    return x.to(net.dtype)


def jacobians(net: Network, xs, chunk: int = 64) -> np.ndarray:
    """Stack of exact Jacobians, shape (N, d, n).

    Row k of each Jacobian is the input gradient for a one-hot upstream on
    logit k; inputs are replicated d times so one backward pass covers a chunk.
    """
    x = _as_batch(net, xs)
    d = net.num_classes
    eye = torch.eye(d, dtype=net.dtype)
    out = []
    for i in range(0, len(x), chunk):
        part = x[i:i + chunk]
        rep = part.repeat_interleave(d, dim=0)
        _, trace = forward(net, rep)
        g = backward_input(trace, eye.repeat(len(part), 1))
        out.append(g.reshape(len(part), d, -1).detach().cpu().numpy().astype(np.float64))
    if not out:
        return np.zeros((0, d, int(np.prod(net.input_shape))))
    return np.concatenate(out)


def jacobian_exact(net: Network, x, input_id=None) -> Jacobian:
    return Jacobian(jacobians(net, x)[0], input_id)


def frobenius_sq_exact(j) -> float:
    m = j.matrix if isinstance(j, Jacobian) else j
    return linalg.frobenius_norm(m) ** 2


def frobenius_sq_estimate(net: Network, x, n_proj: int, rng: RngStream, vectors=None,
                          chunk: int = 500) -> float:
    """Random-projection estimate (d / n_proj) * sum_v ||v^T J||^2, v uniform on S^{d-1}.

    ``vectors`` overrides the random draws (rows are the projection vectors).
    """
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    d = net.num_classes
    if vectors is None:
        vectors = linalg.sample_unit_sphere(d, rng, size=n_proj)
    vectors = np.asarray(vectors, dtype=np.float64).reshape(n_proj, d)
    x = _as_batch(net, x)[:1]
    total = 0.0
    for i in range(0, n_proj, chunk):
        v = torch.from_numpy(vectors[i:i + chunk]).to(net.dtype)
        _, trace = forward(net, x.expand(len(v), *x.shape[1:]))
        g = backward_input(trace, v).reshape(len(v), -1).to(torch.float64)
        total += float((g * g).sum())
    return d * total / n_proj


def stacked_jacobian(net: Network, xs, input_ids: Sequence | None = None) -> StackedJacobian:
    js = jacobians(net, xs)
    if len(js) == 0:
        raise ValueError("stacked_jacobian needs at least one input")
    ids = list(range(len(js))) if input_ids is None else list(input_ids)
    return StackedJacobian(js.reshape(-1, js.shape[-1]), ids, js.shape[1])


def dominant_singular_direction(jbar, p=2, rng: RngStream | None = None) -> tuple[np.ndarray, float]:
    """Unit p-norm direction maximising ||jbar @ delta||_2, with that value."""
    m = jbar.matrix if isinstance(jbar, StackedJacobian) else np.asarray(jbar, dtype=np.float64)
    if not np.any(m):
        raise DegenerateInputError("stacked Jacobian is identically zero")
    value, v = linalg.power_iteration(m, p=p, q=2, rng=rng)
    return v, value


class BoundCheck(NamedTuple):
    lhs: float
    rhs: float
    ratio: float


def prop1_bound_check(a, b) -> BoundCheck:
    """Frobenius inner product against the product of Frobenius norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    lhs = linalg.frobenius_inner_product(a, b)
    rhs = linalg.frobenius_norm(a) * linalg.frobenius_norm(b)
    ratio = lhs / rhs if rhs > 0 else 0.0
    return BoundCheck(lhs, rhs, ratio)


def stacked_bound(js: np.ndarray) -> tuple[float, float]:
    """(||J_bar||_F, sqrt(sum_ij ||J_i||_F ||J_j||_F)) for a (N, d, n) stack."""
    lhs = linalg.frobenius_norm(js)
    norms = np.sqrt(np.einsum("ijk,ijk->i", js, js))
    rhs = float(np.sqrt(norms.sum() ** 2))
    return lhs, rhs


def stacked_bound_check(net: Network, xs, rtol: float = 1e-10) -> tuple[float, float]:
    js = jacobians(net, xs)
    if len(js) == 0:
        raise ValueError("need at least one input")
    lhs, rhs = stacked_bound(js)
    if lhs > rhs * (1 + rtol):
        raise AssertionError(f"stacked Frobenius bound violated: {lhs} > {rhs}")
    return lhs, rhs


class Similarity(NamedTuple):
    value: float
    degenerate: bool


def cosine_similarity(ji, jj) -> Similarity:
    a = ji.matrix if isinstance(ji, Jacobian) else ji
    b = jj.matrix if isinstance(jj, Jacobian) else jj
    check = prop1_bound_check(a, b)
    if check.rhs == 0:
        return Similarity(0.0, True)
    return Similarity(float(np.clip(check.ratio, -1.0, 1.0)), False)


PAIR_MODES = ("ordered", "all", "unique")


@dataclass
class SimilarityHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    median: float
    mean: float
    count: int
    degenerate_count: int
    mode: str

    def rows(self):
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            yield float(lo), float(hi), int(c)

    def summary(self) -> dict:
        return {"median": self.median, "mean": self.mean, "count": self.count,
                "degenerate_count": self.degenerate_count, "mode": self.mode}


def pairwise_similarity(net: Network | None, xs=None, mode: str = "ordered", bin_width: float = 0.02,
                        jacobian_stack: np.ndarray | None = None, tile: int = 256) -> SimilarityHistogram:
    """Histogram and exact median of Jacobian cosine similarity over input pairs.

    mode: ``ordered`` = all (i, j) with i != j, ``all`` = every (i, j) including
    self-pairs, ``unique`` = i < j. Inputs with a zero Jacobian are counted as
    degenerate and left out of every pair.
    """
    if mode not in PAIR_MODES:
        raise ValueError(f"mode must be one of {PAIR_MODES}")
    js = jacobian_stack if jacobian_stack is not None else jacobians(net, xs)
    flat = js.reshape(len(js), -1)
    norms = np.linalg.norm(flat, axis=1)
    ok = norms > 0
    unit = flat[ok] / norms[ok, None]
    n = len(unit)
    nbins = int(round(2.0 / bin_width))
    edges = np.linspace(-1.0, 1.0, nbins + 1)
    counts = np.zeros(nbins, dtype=np.int64)
    values = []
    for i0 in range(0, n, tile):
        block = np.clip(unit[i0:i0 + tile] @ unit.T, -1.0, 1.0)
        rows = np.arange(i0, min(i0 + tile, n))[:, None]
        cols = np.arange(n)[None, :]
        if mode == "ordered":
            keep = rows != cols
        elif mode == "unique":
            keep = rows < cols
        else:
            keep = np.ones_like(block, dtype=bool)
        vals = block[keep]
        counts += np.histogram(vals, bins=edges)[0]
        values.append(vals)
    allv = np.concatenate(values) if values else np.zeros(0)
    return SimilarityHistogram(
        bin_edges=edges,
        counts=counts,
        median=float(np.median(allv)) if allv.size else float("nan"),
        mean=float(allv.mean()) if allv.size else float("nan"),
        count=int(allv.size),
        degenerate_count=int((~ok).sum()),
        mode=mode,
    )
