"""Low-rank, GMM-weighted, L1-penalized spectral M-estimation.

Each observable operator is factored as ``B_x = R_x S_x^T`` and the
criterion is

    sum_x m_x^T W_x m_x + lam * N**-0.5 * ||R||_1,
    m_x = vec(P3[x] - R_x S_x^T P21),

minimized by alternating over R and S with the weight held fixed, and
re-estimating the weight from the current fit between rounds.  Everything
is separable across symbols, so every half-step is solved block by block.
"""

from dataclasses import dataclass, field, asdict, fields
import logging
import time

import numpy as np
from scipy import linalg

from ._parallel import pmap
from .hmm import TripletDataset
from .moments import (
    DEFAULT_RIDGE,
    ObservableStats,
    WeightMatrix,
    estimate_stats,
    estimate_weight,
    moment_residual,
)
from .spectral import ParamTriplet, fit_frobenius

__all__ = [
    "FactorPair",
    "FitConfig",
    "FitTrace",
    "PENALTY_DECAY",
    "penalty_scale",
    "loss",
    "grad",
    "solve_r_given_s",
    "solve_s_given_r",
    "alt_min",
    "fit",
    "init_from_spectral",
    "init_random",
    "soft_threshold",
]

logger = logging.getLogger(__name__)

# Largest decay exponent that leaves the convergence rate untouched.
PENALTY_DECAY = 0.5
# relative eigenvalue floor of a penalized R-subproblem, and the ridge added below it
SINGULAR_RTOL = 1e-12
SINGULAR_RIDGE = 1e-10


@dataclass
class FactorPair:
    """Factors ``r[x] = R_x`` and ``s[x] = S_x``, both of shape (n, n, k)."""

    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.r = np.array(self.r, dtype=float)
        self.s = np.array(self.s, dtype=float)
        if self.r.ndim != 3 or self.r.shape != self.s.shape:
            raise ValueError("R and S must both have shape (n, n, k)")
        if self.r.shape[0] != self.r.shape[1]:
            raise ValueError("factor blocks must be n x k with n blocks")

    @property
    def n_obs(self):
        return self.r.shape[0]

    @property
    def rank(self):
        return self.r.shape[2]

    @property
    def b_ops(self):
        return np.einsum("xik,xjk->xij", self.r, self.s)

    def copy(self):
        return FactorPair(self.r.copy(), self.s.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.s)))


@dataclass
class FitConfig:
    """Solver settings.  ``lam`` is serialized under the key ``"lambda"``."""

    rank: int = 1
    lam: float = 0.0
    ridge: float = DEFAULT_RIDGE
    inner_tol: float = 1e-9
    inner_max_iters: int = 500
    alt_tol: float = 1e-7
    alt_max_iters: int = 100
    outer_max_iters: int = 5
    outer_tol: float = 1e-4
    n_random_restarts: int = 5
    init_scale: float = None
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("ridge", "inner_tol", "alt_tol", "outer_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("inner_max_iters", "alt_max_iters", "outer_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_random_restarts < 0:
            raise ValueError("n_random_restarts must be non-negative")
        if self.init_scale is not None and self.init_scale <= 0:
            raise ValueError("init_scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {unknown}")
        return cls(**d)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return FitConfig(**d)


@dataclass
class FitTrace:
    """What happened during :func:`fit`.

    ``records`` holds one entry per (restart, outer iteration) with the loss
    sequence of the alternating loop; ``selection_losses`` are the values
    used to pick ``chosen_restart`` (restart 0 is the spectral start).
    """

    records: list = field(default_factory=list)
    selection_losses: list = field(default_factory=list)
    chosen_restart: int = 0
    failures: list = field(default_factory=list)
    wall_time: float = 0.0
    final_loss: float = float("nan")
    final_penalty: float = float("nan")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Criterion and gradients
# ---------------------------------------------------------------------------

def penalty_scale(lam, n_samples):
    """``lam * N**-1/2``; population statistics (N = 0) carry no penalty."""
    if n_samples <= 0:
        return 0.0
    return lam * n_samples ** -PENALTY_DECAY


def _check(factors, weight, stats):
    if factors.n_obs != stats.n_obs or weight.n_obs != stats.n_obs:
        raise ValueError("factor, weight and statistic dimensions disagree")


def block_losses(factors, weight, stats, lam, n_samples):
    """Per-symbol contributions to :func:`loss`, shape (n,)."""
    _check(factors, weight, stats)
    resid = moment_residual(stats, factors)
    tau = penalty_scale(lam, n_samples)
    return weight.block_quad(resid) + tau * np.abs(factors.r).sum(axis=(1, 2))


def loss(factors, weight, stats, lam, n_samples):
    """``m^T W m + lam N^{-1/2} ||R||_1``."""
    return float(block_losses(factors, weight, stats, lam, n_samples).sum())


def grad(factors, weight, stats, lam, n_samples, which="r", include_penalty=False):
    """Gradient of the smooth part with respect to R or S, shape (n, n, k).

    The moment Jacobians are block sparse, so ``2 J^T W m`` reduces to
    ``-2 (W m)_x P21^T S_x`` for R and ``-2 P21 (W m)_x^T R_x`` for S.
    ``include_penalty`` adds the subgradient ``tau * sign(R)`` (0 at zeros).
    """
    _check(factors, weight, stats)
    wm = weight.apply(moment_residual(stats, factors))
    if which == "r":
        g = -2.0 * np.einsum("xij,vj,xvk->xik", wm, stats.p21, factors.s)
        if include_penalty:
            g += penalty_scale(lam, n_samples) * np.sign(factors.r)
        return g
    if which == "s":
        return -2.0 * np.einsum("xij,vj,xik->xvk", wm, stats.p21, factors.r)
    raise ValueError("which must be 'r' or 's'")


# ---------------------------------------------------------------------------
# Block subproblems
# ---------------------------------------------------------------------------

def _design_r(s_x, p21):
    """Matrix mapping vec(R_x) (row-major, n*k) to vec(R_x S_x^T P21)."""
    n = p21.shape[0]
    C = s_x.T @ p21  # k x n
    return np.kron(np.eye(n), C.T)


def _design_s(r_x, p21):
    """Matrix mapping vec(S_x) (row-major, n*k) to vec(R_x S_x^T P21)."""
    n, k = r_x.shape
    return np.einsum("iw,vj->ijvw", r_x, p21).reshape(n * n, n * k)


def _weighted_lstsq(A, target, w_root):
    """argmin_v (t - A v)^T W (t - A v) as a minimum-norm least-squares solve."""
    if w_root is None:
        sol, _, rank, _ = np.linalg.lstsq(A, target, rcond=None)
    else:
        sol, _, rank, _ = np.linalg.lstsq(w_root @ A, w_root @ target, rcond=None)
    return sol, rank < A.shape[1]


def soft_threshold(v, level):
    return np.sign(v) * np.maximum(np.abs(v) - level, 0.0)


def _fista(Q, q, objective, x, tau, tol, max_iters):
    """Monotone accelerated proximal gradient with gradient-based restarts."""
    lip = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
    fx = objective(x)
    if lip <= 0.0:
        return x, fx
    step = 1.0 / lip
    y, t = x.copy(), 1.0
    for _ in range(max_iters):
        z = soft_threshold(y - step * 2.0 * (Q @ y - q), tau * step)
        fz = objective(z)
        if fz > fx:
            # reject and restart the momentum from the monotone iterate
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if (y - z) @ (z - x) > 0:
            y, t_new = z.copy(), 1.0
        else:
            y = z + ((t - 1.0) / t_new) * (z - x)
        decrease = fx - fz
        x, fx, t = z, fz, t_new
        if decrease <= tol * max(abs(fx), 1e-300):
            break
    return x, fx


def _feature_sign(Q, q, objective, x, tau, max_iters=200):
    """Active-set (feature-sign) search for the small lasso-type subproblem.

    Every accepted move lowers the objective; returns ``(x, f, converged)``.
    """
    x = x.copy()
    fx = objective(x)
    scale = max(float(np.abs(q).max()), tau, 1e-300)
    force_grow = False
    for _ in range(max_iters):
        Qx = Q @ x
        g = 2.0 * (Qx - q)
        # gradient entries are differences of terms as large as |Qx|
        kkt_tol = 1e-9 * max(scale, float(np.abs(Qx).max(initial=0.0)))
        active = x != 0
        theta = np.sign(x)
        j = None
        # once the support is optimal (g = -tau sign(x) there), grow it
        if force_grow or np.all(np.abs(g[active] + tau * theta[active]) <= kkt_tol):
            viol = np.where(active, 0.0, np.abs(g) - tau)
            j = int(np.argmax(viol))
            if viol[j] <= kkt_tol:
                return x, fx, True
            theta[j] = -np.sign(g[j])
            active[j] = True
        S = np.flatnonzero(active)
        target, *_ = np.linalg.lstsq(Q[np.ix_(S, S)], q[S] - 0.5 * tau * theta[S], rcond=None)
        # line search over the segment, stopping at every sign change
        cur = x[S]
        ts = [1.0]
        diff = target - cur
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = -cur / diff
        ts += [t for t in cross[(cross > 0) & (cross < 1)]]
        best_x, best_f = None, fx
        first_break = None
        for t in sorted(ts):
            cand = x.copy()
            cand[S] = cur + t * diff
            # coefficients landing on zero are snapped there
            if t < 1.0:
                cand[S[np.isclose(cur + t * diff, 0.0, atol=1e-15 * scale)]] = 0.0
            fc = objective(cand)
            if first_break is None and t < 1.0:
                first_break = (cand, fc)
            if fc < best_f:
                best_x, best_f = cand, fc
        if best_x is None and first_break is not None and \
                first_break[1] <= fx + 1e-12 * max(abs(fx), 1e-300):
            # a round-off sized coefficient blocks the step; drop it from the support
            best_x, best_f = first_break
        if best_x is None and j is not None and Q[j, j] > 0:
            # near-singular support solves can overshoot; fall back to an
            # exact one-coordinate step on the violator
            cand = x.copy()
            rest = q[j] - Q[j] @ x + Q[j, j] * x[j]
            cand[j] = float(soft_threshold(rest, 0.5 * tau)) / Q[j, j]
            fc = objective(cand)
            if fc < fx:
                best_x, best_f = cand, fc
        if best_x is None and j is None:
            # the support is optimal up to rounding; try growing it instead
            force_grow = True
            continue
        force_grow = False
        if best_x is None:
            # no representable decrease left: accept if KKT holds to rounding level
            on = x != 0
            viol = max(np.abs(g[on] + tau * np.sign(x[on])).max(initial=0.0),
                       (np.abs(g[~on]) - tau).max(initial=0.0))
            return x, fx, bool(viol <= 1e3 * kkt_tol)
        x, fx = best_x, best_f
    return x, fx, False


def _lasso_quadratic(Q, q, const, r0, tau, tol, max_iters):
    """min r^T Q r - 2 q^T r + const + tau ||r||_1 over a small dense problem.

    Exact active-set search from the warm start; if it stalls, accelerated
    proximal gradient takes over and the active-set search finishes from
    there.  The result never has a higher objective than ``r0``.
    """

    def objective(r):
        return float(r @ Q @ r - 2.0 * q @ r + const + tau * np.abs(r).sum())

    x, fx, ok = _feature_sign(Q, q, objective, r0, tau)
    if ok:
        return x, fx
    x, fx = _fista(Q, q, objective, x, tau, tol, max_iters)
    x2, f2, _ = _feature_sign(Q, q, objective, x, tau)
    return (x2, f2) if f2 <= fx else (x, fx)


def _solve_r_block(x, factors, weight, stats, tau, config, identity):
    n, k = factors.n_obs, factors.rank
    A = _design_r(factors.s[x], stats.p21)
    target = stats.p3[x].ravel()
    w_root = None if identity else weight.roots[x]
    if tau == 0.0:
        sol, deficient = _weighted_lstsq(A, target, w_root)
        return sol.reshape(n, k), deficient
    W = weight.blocks[x]
    WA = A if identity else W @ A
    Q = A.T @ WA
    q = WA.T @ target
    const = float(target @ (target if identity else W @ target))
    eig = np.linalg.eigvalsh(Q)
    deficient = eig[0] <= SINGULAR_RTOL * max(eig[-1], 1e-300)
    if deficient:
        # collapsed S columns leave the lasso without a unique solution
        Q = Q + SINGULAR_RIDGE * max(eig[-1], 1e-300) * np.eye(Q.shape[0])
    sol, _ = _lasso_quadratic(Q, q, const, factors.r[x].ravel(), tau,
                              config.inner_tol, config.inner_max_iters)
    return sol.reshape(n, k), deficient


def _solve_s_block(x, factors, weight, stats, identity):
    n, k = factors.n_obs, factors.rank
    A = _design_s(factors.r[x], stats.p21)
    w_root = None if identity else weight.roots[x]
    sol, deficient = _weighted_lstsq(A, stats.p3[x].ravel(), w_root)
    return sol.reshape(n, k), deficient


def _is_identity(weight):
    n2 = weight.blocks.shape[1]
    return bool(np.array_equal(weight.blocks, np.broadcast_to(np.eye(n2), weight.blocks.shape)))


def _half_step(which, factors, weight, stats, lam, n_samples, config, flags=None):
    tau = penalty_scale(lam, n_samples)
    identity = _is_identity(weight)
    before = block_losses(factors, weight, stats, lam, n_samples)
    if which == "r":
        results = pmap(lambda x: _solve_r_block(x, factors, weight, stats, tau, config, identity),
                       range(factors.n_obs), config.n_threads)
    else:
        results = pmap(lambda x: _solve_s_block(x, factors, weight, stats, identity),
                       range(factors.n_obs), config.n_threads)
    new = factors.copy()
    target = new.r if which == "r" else new.s
    for x, (sol, deficient) in enumerate(results):
        target[x] = sol
        if deficient and flags is not None:
            flags.add(f"rank-deficient {which.upper()}-subproblem (block {x})")
    after = block_losses(new, weight, stats, lam, n_samples)
    if not np.all(np.isfinite(after)):
        raise FloatingPointError(f"non-finite loss after the {which.upper()} step")
    # exact block minimizers can only lose to the input through rounding
    keep_old = after > before
    if np.any(keep_old):
        source = factors.r if which == "r" else factors.s
        target[keep_old] = source[keep_old]
    return new


def solve_r_given_s(factors, weight, stats, lam, n_samples, config):
    """Minimize over R with S and W fixed; returns the new R of shape (n, n, k)."""
    _check(factors, weight, stats)
    return _half_step("r", factors, weight, stats, lam, n_samples, config).r


def solve_s_given_r(factors, weight, stats, n_samples, config, lam=0.0):
    """Minimize over S with R and W fixed (the penalty does not involve S)."""
    _check(factors, weight, stats)
    return _half_step("s", factors, weight, stats, lam, n_samples, config).s


def _total_scale(weight, stats):
    """Loss at R = S = 0, used to put an absolute floor under relative tolerances."""
    return weight.quad(stats.p3)


def alt_min(init, weight, stats, lam, n_samples, config, flags=None):
    """Alternate exact R and S updates until the loss stalls.

    Returns the final factors and the loss sequence (initial loss first, then
    the loss after each full R-then-S sweep).
    """
    _check(init, weight, stats)
    factors = init.copy()
    losses = [loss(factors, weight, stats, lam, n_samples)]
    floor = 1e-15 * _total_scale(weight, stats)
    for _ in range(config.alt_max_iters):
        factors = _half_step("r", factors, weight, stats, lam, n_samples, config, flags)
        factors = _half_step("s", factors, weight, stats, lam, n_samples, config, flags)
        current = loss(factors, weight, stats, lam, n_samples)
        previous = losses[-1]
        losses.append(current)
        if previous - current <= config.alt_tol * max(previous, floor):
            break
    return factors, losses


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_from_spectral(triplet, rank):
    """Balanced rank-k split ``R_x = U_k S_k^{1/2}``, ``S_x = V_k S_k^{1/2}`` of each B_x."""
    if triplet.is_projected:
        raise ValueError("initialization needs the ambient (n-dimensional) form")
    n = triplet.n_obs
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}]")
    r = np.zeros((n, n, rank))
    s = np.zeros((n, n, rank))
    for x in range(n):
        U, sv, Vt = np.linalg.svd(triplet.b_ops[x])
        root = np.sqrt(sv[:rank])
        r[x] = U[:, :rank] * root
        s[x] = Vt[:rank].T * root
    return FactorPair(r, s)


def init_random(n, k, scale, seed):
    """Gaussian factors with entry standard deviation ``scale / sqrt(k)``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    sd = scale / np.sqrt(k)
    return FactorPair(rng.normal(0.0, sd, (n, n, k)), rng.normal(0.0, sd, (n, n, k)))


# ---------------------------------------------------------------------------
# Full procedure
# ---------------------------------------------------------------------------

def _relative_change(new, old):
    denom = max(np.linalg.norm(old), 1e-300)
    return float(np.linalg.norm(new - old) / denom)


def _weighting_loop(start, stats, data, n_samples, config, restart):
    """Weight-refresh loop for one starting point.

    From the second round on, the alternating loop starts from whichever of
    the previous iterate and the first-round (identity-weight) solution has
    the lower loss under the new weight, so the final loss never exceeds
    that of the unweighted solution under the final weight.
    """
    n = stats.n_obs
    weight = WeightMatrix.identity(n, config.ridge)
    factors = start
    first = None
    records = []
    flags = set()
    for s in range(1, config.outer_max_iters + 1):
        if s >= 2:
            weight = estimate_weight(factors, stats, config.ridge, data, config.n_threads)
            if loss(first, weight, stats, config.lam, n_samples) < \
                    loss(factors, weight, stats, config.lam, n_samples):
                factors = first
        previous_b = factors.b_ops
        factors, losses = alt_min(factors, weight, stats, config.lam, n_samples, config, flags)
        if not factors.is_finite():
            raise FloatingPointError("factors became non-finite")
        if first is None:
            first = factors.copy()
        change = _relative_change(factors.b_ops, previous_b)
        records.append({
            "restart": restart,
            "outer_index": s,
            "alt_losses": [float(v) for v in losses],
            "loss_after_alt_min": float(losses[-1]),
            "penalty_value": float(penalty_scale(config.lam, n_samples) * np.abs(factors.r).sum()),
            "weight_condition_max": float(np.max(weight.condition_numbers())),
            "parameter_change": change,
            "flags": sorted(flags),
        })
        if s >= 2 and change < config.outer_tol:
            break
    return factors, weight, records


def _selection_loss(factors, stats, data, n_samples, config):
    """Loss used to compare restarts.

    With a single (identity-weight) round this is the unweighted loss;
    otherwise the weight is re-estimated at the candidate itself so that all
    candidates are scored by the same function of the parameters.
    """
    if config.outer_max_iters == 1:
        weight = WeightMatrix.identity(stats.n_obs, config.ridge)
    else:
        weight = estimate_weight(factors, stats, config.ridge, data, config.n_threads)
    return loss(factors, weight, stats, config.lam, n_samples)


def fit(data, config=None, return_factors=False):
    """Spectral M-estimate from triplets (or from precomputed statistics).

    ``data`` is a :class:`TripletDataset` or :class:`ObservableStats`;
    population statistics (``sample_count == 0``) are treated as the
    infinite-data limit, where the decaying penalty vanishes.

    Returns the ambient :class:`ParamTriplet` ``(P1, {R_x S_x^T}, 1)`` and a
    :class:`FitTrace` (plus the chosen factors when ``return_factors``).
    """
    config = config or FitConfig()
    t0 = time.perf_counter()
    if isinstance(data, TripletDataset):
        stats = estimate_stats(data)
        triplets = data
    elif isinstance(data, ObservableStats):
        stats, triplets = data, None
    else:
        raise TypeError("fit expects a TripletDataset or ObservableStats")
    n, k = stats.n_obs, config.rank
    if k > n:
        raise ValueError(f"rank {k} exceeds the alphabet size {n}")
    n_samples = stats.sample_count

    spectral_init = init_from_spectral(fit_frobenius(stats, k), k)
    scale = config.init_scale
    if scale is None:
        scale = np.linalg.norm(spectral_init.r) / n or 1.0 / n
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_random_restarts)
    starts = [spectral_init] + [init_random(n, k, scale, sq) for sq in seeds]

    # restarts run in parallel; their block solves then stay serial
    inner = config.replace(n_threads=1) if len(starts) > 1 else config

    def run(item):
        restart, start = item
        try:
            factors, _, records = _weighting_loop(start, stats, triplets, n_samples,
                                                  inner, restart)
            crit = _selection_loss(factors, stats, triplets, n_samples, inner)
            return restart, factors, records, crit, None
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            logger.warning("restart %d failed: %s", restart, exc)
            return restart, None, [], float("inf"), f"restart {restart}: {exc}"

    outcomes = pmap(run, list(enumerate(starts)), config.n_threads)

    trace = FitTrace()
    best = None
    for restart, factors, records, crit, failure in outcomes:
        trace.records.extend(records)
        trace.selection_losses.append(float(crit))
        if failure is not None:
            trace.failures.append(failure)
            continue
        if best is None or crit < best[1]:
            best = (restart, crit, factors)
    if best is None:
        raise RuntimeError("every restart failed: " + "; ".join(trace.failures))
    restart, crit, factors = best
    trace.chosen_restart = restart
    trace.final_loss = float(crit)
    trace.final_penalty = float(penalty_scale(config.lam, n_samples) * np.abs(factors.r).sum())
    trace.wall_time = time.perf_counter() - t0
    params = ParamTriplet(stats.p1.copy(), np.ones(n), factors.b_ops)
    if return_factors:
        return params, trace, factors
    return params, trace
