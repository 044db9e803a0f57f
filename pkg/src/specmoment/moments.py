"""Observable statistics, moment residuals and the block-diagonal GMM weight.

Moment vectors are kept as ``(n, n, n)`` arrays indexed ``[x, i, j]``; the
row-major ravel of that array is the canonical length-``n**3`` ordering,
and ``arr[x].ravel()`` is block ``x`` of the weighting matrix.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from ._parallel import pmap

__all__ = [
    "ObservableStats",
    "WeightMatrix",
    "SingularWeightError",
    "estimate_stats",
    "model_term",
    "moment_residual",
    "per_sample_moment",
    "per_sample_moments",
    "gram_blocks",
    "estimate_weight",
]

DEFAULT_RIDGE = 1e-8
_NORM_TOL = 1e-10


class SingularWeightError(np.linalg.LinAlgError):
    """A ridge-regularized Gram block could not be factorized."""


@dataclass(frozen=True)
class ObservableStats:
    """Probability tables over one, two and three consecutive observations.

    Attributes
    ----------
    p1 : ndarray, shape (n,)
        ``p1[i] = Pr(x1 = i)``.
    p21 : ndarray, shape (n, n)
        ``p21[i, j] = Pr(x2 = i, x1 = j)``.
    p3 : ndarray, shape (n, n, n)
        ``p3[x, i, j] = Pr(x3 = i, x2 = x, x1 = j)``.
    sample_count : int
        Number of triplets behind the estimate; 0 marks population values.
    """

    p1: np.ndarray
    p21: np.ndarray
    p3: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        p1 = np.array(self.p1, dtype=float)
        p21 = np.array(self.p21, dtype=float)
        p3 = np.array(self.p3, dtype=float)
        n = p1.shape[0]
        if p1.ndim != 1 or p21.shape != (n, n) or p3.shape != (n, n, n):
            raise ValueError(
                f"inconsistent statistic shapes {p1.shape}, {p21.shape}, {p3.shape}")
        for name, arr in (("p1", p1), ("p21", p21), ("p3", p3)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            if arr.min() < -_NORM_TOL or arr.max() > 1 + _NORM_TOL:
                raise ValueError(f"{name} has entries outside [0, 1]")
            if abs(arr.sum() - 1.0) > _NORM_TOL:
                raise ValueError(f"{name} sums to {arr.sum()!r}, not 1")
            arr.setflags(write=False)
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p21", p21)
        object.__setattr__(self, "p3", p3)
        object.__setattr__(self, "sample_count", int(self.sample_count))

    @property
    def n_obs(self):
        return self.p1.shape[0]

    @property
    def is_population(self):
        return self.sample_count == 0


def estimate_stats(data):
    """Empirical frequencies of x1, (x2, x1) and (x3, x2, x1) over the triplets."""
    trip = data.triplets
    n, N = data.n_obs, len(data)
    if N < 1:
        raise ValueError("cannot estimate statistics from an empty dataset")
    x1, x2, x3 = trip[:, 0], trip[:, 1], trip[:, 2]
    p1 = np.bincount(x1, minlength=n) / N
    p21 = np.bincount(x2 * n + x1, minlength=n * n).reshape(n, n) / N
    p3 = np.bincount((x2 * n + x3) * n + x1, minlength=n ** 3).reshape(n, n, n) / N
    return ObservableStats(p1, p21, p3, sample_count=N)


def _check_dims(stats, factors):
    if factors.n_obs != stats.n_obs:
        raise ValueError(
            f"factors are for n_obs={factors.n_obs} but statistics have n_obs={stats.n_obs}")


def model_term(stats, factors):
    """``R_x S_x^T P21`` for every symbol, shape (n, n, n)."""
    _check_dims(stats, factors)
    return np.einsum("xik,xvk,vj->xij", factors.r, factors.s, stats.p21)


def moment_residual(stats, factors):
    """``P3[x] - R_x S_x^T P21`` for every symbol, shape (n, n, n)."""
    return stats.p3 - model_term(stats, factors)


def per_sample_moment(triplet, factors, stats):
    """Moment vector of one triplet: its (x, i, j) indicator minus the model term.

    The model term does not depend on the sample, so averaging over the
    dataset reproduces :func:`moment_residual` exactly.
    """
    x1, x2, x3 = (int(v) for v in triplet)
    n = stats.n_obs
    if not all(0 <= v < n for v in (x1, x2, x3)):
        raise ValueError("triplet symbol out of range")
    m = -model_term(stats, factors)
    m[x2, x3, x1] += 1.0
    return m


def per_sample_moments(data, factors, stats):
    """All per-sample moment vectors, shape (N, n, n, n).  Test-sized data only."""
    base = -model_term(stats, factors)
    out = np.broadcast_to(base, (len(data),) + base.shape).copy()
    t = data.triplets
    out[np.arange(len(data)), t[:, 1], t[:, 2], t[:, 0]] += 1.0
    return out


@dataclass(frozen=True)
class WeightMatrix:
    """Block-diagonal weighting; ``blocks[x]`` acts on ``residual[x].ravel()``."""

    blocks: np.ndarray
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError("weight blocks must have shape (n, n**2, n**2)")
        n = blocks.shape[0]
        if blocks.shape[1] != n * n:
            raise ValueError(f"expected blocks of size {n * n}, got {blocks.shape[1]}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def identity(cls, n_obs, ridge=DEFAULT_RIDGE):
        eye = np.broadcast_to(np.eye(n_obs * n_obs), (n_obs, n_obs * n_obs, n_obs * n_obs))
        return cls(eye.copy(), ridge)

    @property
    def n_obs(self):
        return self.blocks.shape[0]

    def apply(self, residual):
        """``W m`` returned in the same (n, n, n) layout as ``residual``."""
        n = self.n_obs
        flat = residual.reshape(n, n * n)
        return np.einsum("xab,xb->xa", self.blocks, flat).reshape(residual.shape)

    def block_quad(self, residual):
        """Per-block quadratic forms ``m_x^T W_x m_x``, shape (n,)."""
        n = self.n_obs
        flat = residual.reshape(n, n * n)
        return np.einsum("xa,xab,xb->x", flat, self.blocks, flat)

    def quad(self, residual):
        return float(self.block_quad(residual).sum())

    def dense(self):
        """The full ``n**3 x n**3`` matrix (zero off the diagonal blocks)."""
        return linalg.block_diag(*self.blocks)

    @cached_property
    def roots(self):
        """Upper factors ``L_x^T`` with ``W_x = L_x L_x^T``, one per block."""
        out = np.empty_like(self.blocks)
        for x, block in enumerate(self.blocks):
            try:
                out[x] = linalg.cholesky(block, lower=False)
            except linalg.LinAlgError:
                vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
                out[x] = (vecs * np.sqrt(np.clip(vals, 0.0, None))).T
        return out

    def condition_numbers(self):
        return np.array([np.linalg.cond(b) for b in self.blocks])


def _block_counts(data, stats):
    """Triplet counts per (x, i, j) cell and the sample count N."""
    n = stats.n_obs
    if data is not None:
        t = data.triplets
        counts = np.bincount((t[:, 1] * n + t[:, 2]) * n + t[:, 0],
                             minlength=n ** 3).reshape(n, n, n).astype(float)
        return counts, float(len(data))
    if stats.is_population:
        # expected per-sample Gram of a single draw
        return stats.p3.copy(), 1.0
    N = float(stats.sample_count)
    return stats.p3 * N, N


def gram_blocks(factors, stats, data=None):
    """``sum_n m_x(X_n) m_x(X_n)^T`` per block, without forming per-sample vectors.

    With counts ``s`` and constant model term ``c`` the sum expands to
    ``diag(s) - s c^T - c s^T + N c c^T``.  Without ``data`` the counts are
    recovered from the frequencies (``N * p3``); population statistics use
    the expectation for a single draw.
    """
    counts, N = _block_counts(data, stats)
    n = stats.n_obs
    c = model_term(stats, factors).reshape(n, n * n)
    s = counts.reshape(n, n * n)
    G = N * np.einsum("xa,xb->xab", c, c)
    G -= np.einsum("xa,xb->xab", s, c)
    G -= np.einsum("xa,xb->xab", c, s)
    idx = np.arange(n * n)
    G[:, idx, idx] += s
    return G


def _invert_spd(block, ridge, x):
    a = block + ridge * np.eye(block.shape[0])
    try:
        cho = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularWeightError(
            f"Gram block {x} is not positive definite with ridge {ridge:g}; "
            "increase the ridge") from exc
    inv = linalg.cho_solve(cho, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def estimate_weight(factors, stats, ridge=DEFAULT_RIDGE, data=None, n_threads=1):
    """Optimal GMM weight, block by block: ``W_x = (G_x + ridge I)^{-1}``."""
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    G = gram_blocks(factors, stats, data)
    blocks = pmap(lambda x: _invert_spd(G[x], ridge, x), range(stats.n_obs), n_threads)
    return WeightMatrix(np.stack(blocks), ridge)
