"""Sequence probabilities and next-symbol prediction from observable operators."""

from dataclasses import dataclass

import numpy as np

from .spectral import ParamTriplet

__all__ = [
    "PredictState",
    "joint_prob",
    "joint_prob_clamped",
    "log_abs_joint_prob",
    "next_symbol_dist",
    "next_symbol_scores",
    "similarity_transform",
    "CLAMP_FLOOR",
]

CLAMP_FLOOR = 1e-300
_TINY = 1e-300


def _check_seq(params, seq):
    seq = np.asarray(seq, dtype=np.int64).ravel()
    if seq.size and (seq.min() < 0 or seq.max() >= params.n_obs):
        raise ValueError(f"symbol out of range for an alphabet of size {params.n_obs}")
    return seq


def _propagate(params, seq):
    """``B_{x_t} ... B_{x_1} b1`` as (unit max-norm vector, log scale)."""
    b = params.b1.copy()
    log_scale = 0.0
    for x in seq:
        b = params.b_ops[x] @ b
        peak = np.max(np.abs(b))
        if peak == 0.0 or not np.isfinite(peak):
            return b, log_scale
        b /= peak
        log_scale += np.log(peak)
    return b, log_scale


def log_abs_joint_prob(params, seq):
    """``(sign, log|value|)`` of ``b_inf^T B_{x_t} ... B_{x_1} b1``."""
    seq = _check_seq(params, seq)
    b, log_scale = _propagate(params, seq)
    value = float(params.b_inf @ b)
    if value == 0.0:
        return 0.0, -np.inf
    return float(np.sign(value)), log_scale + np.log(abs(value))


def joint_prob(params, seq):
    """Raw (possibly negative or > 1) estimate of Pr(x_{1:t})."""
    sign, log_abs = log_abs_joint_prob(params, seq)
    return sign * float(np.exp(log_abs))


def joint_prob_clamped(params, seq, floor=CLAMP_FLOOR):
    return max(joint_prob(params, seq), floor)


@dataclass
class PredictState:
    """Conditional state ``b_t`` after filtering a history.

    ``state`` is scaled so that ``b_inf . state == 1`` whenever the
    normalizer is usable; otherwise ``degenerate`` is set and the state is
    scaled to unit max-norm.
    """

    state: np.ndarray
    log_scale: float
    params: ParamTriplet
    degenerate: bool = False

    @classmethod
    def start(cls, params):
        state = params.b1.copy()
        norm = float(params.b_inf @ state)
        if abs(norm) > _TINY:
            return cls(state / norm, np.log(abs(norm)), params)
        return cls(state, 0.0, params, degenerate=True)

    def scores(self):
        """Raw next-symbol scores ``b_inf^T B_x b_t`` for every x."""
        return np.einsum("d,xde,e->x", self.params.b_inf, self.params.b_ops, self.state)

    def update(self, x):
        b = self.params.b_ops[x] @ self.state
        norm = float(self.params.b_inf @ b)
        if abs(norm) > _TINY and np.isfinite(norm):
            self.state = b / norm
            self.log_scale += np.log(abs(norm))
            return
        peak = np.max(np.abs(b))
        self.degenerate = True
        if peak > 0 and np.isfinite(peak):
            self.state = b / peak
            self.log_scale += np.log(peak)
        else:
            self.state = b


def _to_distribution(scores):
    clipped = np.where(np.isfinite(scores), np.maximum(scores, 0.0), 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return np.full(scores.shape[0], 1.0 / scores.shape[0]), True
    return clipped / total, False


def next_symbol_scores(params, history):
    state = PredictState.start(params)
    for x in _check_seq(params, history):
        state.update(x)
    return state.scores(), state.degenerate


def next_symbol_dist(params, history, return_flag=False):
    """Clamp-and-renormalize estimate of Pr(x_t | x_{1:t-1}).

    Negative scores are set to zero; if nothing positive remains the uniform
    distribution is returned and the degeneracy flag (``return_flag=True``)
    is raised.
    """
    scores, degenerate = next_symbol_scores(params, history)
    dist, empty = _to_distribution(scores)
    if return_flag:
        return dist, degenerate or empty
    return dist


def similarity_transform(params, s_matrix, max_cond=1e6):
    """``(S b1, S B_x S^-1, S^-T b_inf)``; probabilities are unchanged.

    The result carries no projection basis, since ``U S^-1`` is no longer
    orthonormal.
    """
    S = np.asarray(s_matrix, dtype=float)
    d = params.dim
    if S.shape != (d, d):
        raise ValueError(f"transform must be {d} x {d}")
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond >= max_cond:
        raise np.linalg.LinAlgError(f"transform is near-singular (condition {cond:.3e})")
    S_inv = np.linalg.inv(S)
    return ParamTriplet(
        S @ params.b1,
        S_inv.T @ params.b_inf,
        np.einsum("ab,xbc,cd->xad", S, params.b_ops, S_inv),
    )
