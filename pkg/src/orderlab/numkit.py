"""Deterministic numeric kernel.

Dense matrices are plain float64 numpy arrays throughout the package;
probability distributions are 1-D arrays summing to one. Every stochastic
routine in the toolkit draws from a SeededRng so that a single root seed
reproduces a whole experiment.
"""
from __future__ import annotations

import zlib
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateVector, InvalidArgument, NumericalFailure

LN2 = float(np.log(2.0))

_DIRECTIONAL_FD_DIM = 2000  # above this, fd_gradient_check probes random directions


class SeededRng:
    """Deterministic RNG with labelled child streams.

    Children are derived by mixing a stable 32-bit hash of the label into
    the seed-sequence spawn path, so parallel or staged consumers can get
    independent streams that only depend on (root seed, label path).
    A SeededRng instance is single-owner: never share one across
    concurrently running tasks, spawn children instead.
    """

    def __init__(self, seed: int, _seq: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, label) -> "SeededRng":
        key = zlib.crc32(str(label).encode("utf-8"))
        seq = np.random.SeedSequence(
            entropy=self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (key,)
        )
        return SeededRng(self.seed, _seq=seq)

    def __repr__(self):  # pragma: no cover
        return f"SeededRng(seed={self.seed}, path={tuple(self._seq.spawn_key)})"


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def validate_dist(p, name: str = "dist") -> np.ndarray:
    """Check the ProbDist invariants: finite, non-negative, sums to 1 within 1e-9."""
    arr = _as_vector(p, name)
    if arr.size == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    if np.any(arr < -1e-12):
        raise InvalidArgument(f"{name} contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > 1e-9:
        raise InvalidArgument(f"{name} sums to {total!r}, not 1")
    return np.clip(arr, 0.0, None)


def stable_softmax(logits) -> np.ndarray:
    """Max-subtracted softmax of a 1-D logit vector."""
    x = _as_vector(logits, "logits")
    if x.size == 0:
        raise InvalidArgument("softmax of empty logits")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("softmax logits must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def _entropy(p: np.ndarray) -> float:
    # natural-log entropy with 0*log(0) = 0
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def jensen_shannon(p, q) -> float:
    """JSD(p, q) = H(m) - (H(p) + H(q))/2 with m = (p+q)/2, natural log.

    Symmetric, zero iff p == q, bounded by ln 2.
    """
    pa = validate_dist(p, "p")
    qa = validate_dist(q, "q")
    if pa.size != qa.size:
        raise InvalidArgument(f"length mismatch: {pa.size} vs {qa.size}")
    m = 0.5 * (pa + qa)
    jsd = _entropy(m) - 0.5 * (_entropy(pa) + _entropy(qa))
    return max(jsd, 0.0)


def cosine_similarity(a, b) -> float:
    """dot(a,b)/(|a||b|), clipped to [-1, 1]."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.size != vb.size:
        raise InvalidArgument(f"length mismatch: {va.size} vs {vb.size}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine of a zero-norm vector")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


def _complement_direction(components: list[np.ndarray], dim: int) -> np.ndarray:
    # deterministic unit vector orthogonal to all found components
    for j in range(dim):
        v = np.zeros(dim)
        v[j] = 1.0
        for c in components:
            v -= (v @ c) * c
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n
    raise NumericalFailure("no orthogonal complement direction found")


def pca_fit(data, r: int, tol: float = 1e-9, max_iter: int = 1000):
    """Top-r principal components of the sample covariance by power iteration.

    Returns (components, explained_variance); components has shape (d, r),
    one orthonormal column per component, variances non-increasing. The
    largest-magnitude entry of each component is made positive.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgument(f"data must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InvalidArgument("pca_fit needs at least 2 rows")
    if not (1 <= r <= min(n - 1, d)):
        raise InvalidArgument(f"r={r} out of range [1, {min(n - 1, d)}]")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / (n - 1)
    scale = max(float(np.trace(cov)), np.finfo(np.float64).tiny)

    # fixed start-vector stream so the fit is deterministic for a given input
    start = np.random.Generator(np.random.PCG64(0x5EEDED))
    deflated = cov.copy()
    comps: list[np.ndarray] = []
    variances: list[float] = []
    for _ in range(r):
        v = start.standard_normal(d)
        v /= np.linalg.norm(v)
        converged = False
        for _ in range(max_iter):
            w = deflated @ v
            nw = float(np.linalg.norm(w))
            if nw <= scale * 1e-14:
                # remaining variance is numerically zero: any orthogonal
                # direction completes the basis with eigenvalue 0
                v = _complement_direction(comps, d)
                converged = True
                break
            w /= nw
            if float(w @ v) < 0.0:
                w = -w
            delta = float(np.max(np.abs(w - v)))
            v = w
            if delta < tol:
                converged = True
                break
        if not converged:
            raise NumericalFailure(
                f"power iteration did not converge within {max_iter} iterations "
                f"(component {len(comps) + 1} of {r})"
            )
        # re-orthogonalize against earlier components to stop rounding drift
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        lam = max(float(v @ cov @ v), 0.0)
        k = int(np.argmax(np.abs(v)))
        if v[k] < 0.0:
            v = -v
        comps.append(v)
        variances.append(lam)
        deflated -= lam * np.outer(v, v)

    order = np.argsort(-np.asarray(variances), kind="stable")
    components = np.stack([comps[i] for i in order], axis=1)
    explained = np.asarray([variances[i] for i in order])
    return components, explained


def pca_project(data, components) -> np.ndarray:
    """Center data by its column mean and project onto the given components."""
    x = np.asarray(data, dtype=np.float64)
    c = np.asarray(components, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2:
        raise InvalidArgument("pca_project expects 2-D data and components")
    if x.shape[1] != c.shape[0]:
        raise InvalidArgument(
            f"column mismatch: data has {x.shape[1]} columns, components expect {c.shape[0]}"
        )
    return (x - x.mean(axis=0)) @ c


def fd_gradient_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    x,
    eps: float,
    directions: Optional[int] = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    Per-coordinate probes by default; when the dimension exceeds 2000 (or
    `directions` is given) the check uses that many random unit directions
    instead. Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if xv.size != g.size:
        raise InvalidArgument(f"gradient size {g.size} != point size {xv.size}")
    if not eps > 0.0:
        raise InvalidArgument("eps must be positive")
    if directions is None and xv.size > _DIRECTIONAL_FD_DIM:
        directions = 200

    def probe(direction: np.ndarray) -> float:
        fp = float(f(xv + eps * direction))
        fm = float(f(xv - eps * direction))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure("objective returned a non-finite value")
        return (fp - fm) / (2.0 * eps)

    worst = 0.0
    if directions is None:
        for i in range(xv.size):
            e = np.zeros(xv.size)
            e[i] = 1.0
            num = probe(e)
            denom = max(abs(num), abs(g[i]), 1e-8)
            worst = max(worst, abs(num - g[i]) / denom)
    else:
        rng = np.random.Generator(np.random.PCG64(0xD1FF))
        for _ in range(int(directions)):
            v = rng.standard_normal(xv.size)
            v /= np.linalg.norm(v)
            num = probe(v)
            ana = float(g @ v)
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
