"""Observable-operator parameters and the classical SVD spectral estimator."""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParamTriplet",
    "RankDeficiencyError",
    "top_left_singular_vectors",
    "pinv",
    "fit_hsu",
    "fit_frobenius",
]

DEGENERACY_RTOL = 1e-10
PINV_RTOL = 1e-12


class RankDeficiencyError(np.linalg.LinAlgError):
    """P21 does not have ``rank`` singular values above the degeneracy threshold."""


@dataclass(frozen=True)
class ParamTriplet:
    """Observable representation ``(b1, {B_x}, b_inf)``.

    ``b_ops[x]`` is the operator for symbol ``x``.  ``projection`` holds the
    n x k basis ``U`` for the projected (dimension k) form and is ``None`` for
    the ambient (dimension n) form.
    """

    b1: np.ndarray
    b_inf: np.ndarray
    b_ops: np.ndarray
    projection: np.ndarray = field(default=None)

    def __post_init__(self):
        b1 = np.array(self.b1, dtype=float)
        b_inf = np.array(self.b_inf, dtype=float)
        b_ops = np.array(self.b_ops, dtype=float)
        d = b1.shape[0]
        if b1.ndim != 1 or b_inf.shape != (d,):
            raise ValueError("b1 and b_inf must be vectors of equal length")
        if b_ops.ndim != 3 or b_ops.shape[1:] != (d, d):
            raise ValueError(f"b_ops must have shape (n, {d}, {d}), got {b_ops.shape}")
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "b_inf", b_inf)
        object.__setattr__(self, "b_ops", b_ops)
        if self.projection is not None:
            U = np.array(self.projection, dtype=float)
            if U.shape != (b_ops.shape[0], d):
                raise ValueError("projection must be n x d")
            object.__setattr__(self, "projection", U)

    @property
    def dim(self):
        return self.b1.shape[0]

    @property
    def n_obs(self):
        return self.b_ops.shape[0]

    @property
    def is_projected(self):
        return self.projection is not None


def pinv(a, rtol=PINV_RTOL):
    """Moore-Penrose inverse with singular values below ``rtol * s_max`` dropped."""
    return np.linalg.pinv(a, rtol=rtol)


def top_left_singular_vectors(a, rank, rtol=DEGENERACY_RTOL):
    """Leading ``rank`` left singular vectors, sign-fixed and checked for degeneracy.

    Each column is flipped so its largest-magnitude entry is positive.
    """
    n = a.shape[0]
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")
    U, s, _ = np.linalg.svd(a)
    if s[0] <= 0 or s[rank - 1] <= rtol * s[0]:
        raise RankDeficiencyError(
            f"singular value {rank} of P21 is {s[rank - 1]:.3e}, below "
            f"{rtol:g} * {s[0]:.3e}; the statistics do not support rank {rank}")
    U = U[:, :rank]
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(rank)])
    return U * signs, s


def fit_hsu(stats, rank, rtol=DEGENERACY_RTOL):
    """Projected spectral estimate in the top-k left singular basis of P21."""
    U, _ = top_left_singular_vectors(stats.p21, rank, rtol)
    UtP21 = U.T @ stats.p21
    UtP21_pinv = pinv(UtP21)
    b1 = U.T @ stats.p1
    b_inf = pinv(stats.p21.T @ U) @ stats.p1
    b_ops = np.einsum("ia,xij,jb->xab", U, stats.p3, UtP21_pinv)
    return ParamTriplet(b1, b_inf, b_ops, projection=U)


def fit_frobenius(stats, rank, rtol=DEGENERACY_RTOL):
    """Ambient-form estimate ``B_x = U B'_x U^T`` with ``b1 = P1`` and ``b_inf = 1``.

    ``B'_x`` solves the least-squares moment problem restricted to the span of
    the top-k left singular vectors of P21.  When ``rank == n`` and P21 is
    invertible this is just ``P3[x] P21^{-1}``.
    """
    n = stats.n_obs
    U, _ = top_left_singular_vectors(stats.p21, rank, rtol)
    B_proj = np.einsum("ia,xij,jb->xab", U, stats.p3, pinv(U.T @ stats.p21))
    b_ops = np.einsum("ia,xab,jb->xij", U, B_proj, U)
    return ParamTriplet(stats.p1.copy(), np.ones(n), b_ops)
