"""Small dense linear-algebra substrate.

Everything here works on float64 numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi method with a round-robin pair ordering so that every
rotation sweep is a handful of vectorised numpy calls.
"""
from __future__ import annotations

import zlib
from functools import lru_cache

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError


class RngStream:
    """Counter-based (Philox) random stream with deterministic child streams.

    Children are derived from the parent's seed and a key path, never from
    the parent's consumed state, so ``child("shuffle")`` is the same stream
    no matter how much the parent has been used.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *names: int | str) -> "RngStream":
        key = tuple(n if isinstance(n, int) else zlib.crc32(n.encode()) for n in names)
        return RngStream(self.seed, self.key + key)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def as_rng(rng: RngStream | int | None, default_seed: int = 0) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(default_seed if rng is None else int(rng))


def _matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = _matrix(a, "A"), _matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def frobenius_inner_product(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(a, a)))


def sample_unit_sphere(dim: int, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Uniform direction(s) on the unit sphere in R^dim (normalised Gaussian)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    shape = (dim,) if size is None else (size, dim)
    g = rng.normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    # a Gaussian draw of exactly zero norm has probability zero; redraw anyway
    while np.any(norms == 0):
        g = np.where(norms == 0, rng.normal(shape), g)
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norms


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: n-1 rounds of n/2 disjoint column pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _complete_orthonormal(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if good[j]]
    out = u.copy()
    e = 0
    for j in range(k):
        if good[j]:
            continue
        while True:
            w = np.zeros(m)
            w[e % m] = 1.0
            e += 1
            for b in basis:
                w -= np.dot(b, w) * b
            for b in basis:  # second pass for stability
                w -= np.dot(b, w) * b
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                break
        w /= nw
        basis.append(w)
        out[:, j] = w
    return out


def svd(m, tol: float = 1e-15, max_sweeps: int = 80) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(s) @ V.T`` with ``s`` descending.

    Returns U (rows x k), s (k,), V (cols x k), k = min(rows, cols).
    """
    a = _matrix(m)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    a = a.copy()
    rows, cols = a.shape
    if cols == 0:
        raise ShapeError("svd of an empty matrix")
    ncols = cols + (cols % 2)
    if ncols != cols:
        a = np.hstack([a, np.zeros((rows, 1))])
    v = np.eye(ncols)

    converged = cols == 1
    off = 0.0
    for _ in range(max_sweeps):
        if converged:
            break
        off = 0.0
        for p, q in _round_robin(ncols):
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            rot = rel > tol
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        converged = off <= tol
    if not converged:
        raise NumericalError("one-sided Jacobi did not converge", residual=off)

    a, v = a[:, :cols], v[:cols, :cols]
    sig = np.linalg.norm(a, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, a, v = sig[order], a[:, order], v[:, order]
    smax = sig[0] if sig.size else 0.0
    good = sig > max(smax, 1e-300) * rows * np.finfo(float).eps
    u = np.zeros_like(a)
    u[:, good] = a[:, good] / sig[good]
    if not good.all():
        u = _complete_orthonormal(u, good)
        sig = np.where(good, sig, 0.0)
    if transposed:
        u, v = v, u
    return u, sig, v


def _sgn(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0)


def power_iteration(
    m,
    p: float = 2,
    q: float = 2,
    iters: int = 5000,
    tol: float = 1e-13,
    rng: RngStream | None = None,
    restarts: int = 8,
) -> tuple[float, np.ndarray]:
    """Approximate the (p, q) singular pair: max ||m v||_q subject to ||v||_p = 1.

    ``p=2`` runs plain power iteration on m^T m. ``p=inf`` runs the
    generalised power method, whose dual-map update is ``v <- sign(m^T m v)``;
    it only finds local maxima, so it is started from the sign pattern of the
    2-norm solution plus ``restarts`` random corners and the best is kept.
    When the top singular values are (nearly) tied the returned direction is
    not unique; only the value is meaningful.
    """
    a = _matrix(m)
    if q != 2:
        raise NotImplementedError("only q = 2 is supported")
    if p not in (2, np.inf):
        raise NotImplementedError("p must be 2 or inf")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(a):
        raise DegenerateInputError("power iteration on a zero matrix")
    rng = rng if rng is not None else RngStream(0)
    n = a.shape[1]

    v = rng.normal(n)
    v /= np.linalg.norm(v)
    sigma = np.linalg.norm(a @ v)
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            # start landed in the null space; re-draw
            v = rng.normal(n)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        new = np.linalg.norm(a @ v)
        done = abs(new - sigma) <= tol * new
        sigma = new
        if done:
            break
    if p == 2:
        return float(sigma), v

    gram = a.T @ a
    starts = [_sgn(v)] + [_sgn(rng.normal(n)) for _ in range(restarts)]
    best_val, best_v = -1.0, None
    for x in starts:
        for _ in range(iters):
            nxt = _sgn(gram @ x)
            if np.array_equal(nxt, x):
                break
            x = nxt
        val = float(np.linalg.norm(a @ x))
        if val > best_val:
            best_val, best_v = val, x
    return best_val, best_v
