"""Ground-truth discrete HMMs, the toy configurations, and simulation.

Conventions follow the column-stochastic layout used throughout the package:
``transition[i, j] = Pr(h_{t+1} = i | h_t = j)`` and
``observation[i, j] = Pr(x_t = i | h_t = j)``.  Sequences are plain 1-d
integer arrays of symbol indices.
"""

from dataclasses import dataclass
import itertools

import numpy as np

__all__ = [
    "HmmModel",
    "TripletDataset",
    "make_ring",
    "make_grid",
    "make_chain",
    "make_random_hmm",
    "make_cycle",
    "make_deterministic_string",
    "sample_sequence",
    "sample_sequences",
    "sample_triplets",
    "sliding_triplets",
    "true_joint_prob",
    "true_log_joint_prob",
    "exact_stats",
    "stationary_distribution",
    "all_sequences",
]

STOCHASTIC_TOL = 1e-12


def _check_stochastic(name, arr, axis):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < -STOCHASTIC_TOL) or np.any(arr > 1 + STOCHASTIC_TOL):
        raise ValueError(f"{name} has entries outside [0, 1]")
    sums = arr.sum(axis=axis)
    bad = np.abs(sums - 1.0) > STOCHASTIC_TOL
    if np.any(bad):
        raise ValueError(f"{name} does not sum to 1 along axis {axis}: {sums[bad]}")


@dataclass(frozen=True)
class HmmModel:
    """A discrete hidden Markov model (T, O, pi).

    Attributes
    ----------
    transition : ndarray, shape (m, m)
        Column-stochastic; entry (i, j) is Pr(next = i | current = j).
    observation : ndarray, shape (n, m)
        Column-stochastic; entry (i, j) is Pr(x = i | h = j).
    initial : ndarray, shape (m,)
        Law of the hidden state at time 1.
    """

    transition: np.ndarray
    observation: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        T = np.array(self.transition, dtype=float)
        O = np.array(self.observation, dtype=float)
        pi = np.array(self.initial, dtype=float)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError(f"transition must be square, got shape {T.shape}")
        if O.ndim != 2 or O.shape[1] != T.shape[0]:
            raise ValueError(
                f"observation must be n x {T.shape[0]}, got shape {O.shape}")
        if pi.shape != (T.shape[0],):
            raise ValueError(f"initial must have length {T.shape[0]}")
        _check_stochastic("transition", T, 0)
        _check_stochastic("observation", O, 0)
        _check_stochastic("initial", pi, 0)
        for arr in (T, O, pi):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "observation", O)
        object.__setattr__(self, "initial", pi)

    @property
    def n_obs(self):
        return self.observation.shape[0]

    @property
    def n_hidden(self):
        return self.transition.shape[0]

    def __repr__(self):
        return f"HmmModel(n_obs={self.n_obs}, n_hidden={self.n_hidden})"


@dataclass(frozen=True)
class TripletDataset:
    """N observation triplets ``(x1, x2, x3)`` over an alphabet of size n_obs."""

    triplets: np.ndarray
    n_obs: int

    def __post_init__(self):
        arr = np.asarray(self.triplets, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"triplets must have shape (N, 3), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("a triplet dataset needs at least one triplet")
        if self.n_obs < 1:
            raise ValueError("n_obs must be positive")
        if arr.min() < 0 or arr.max() >= self.n_obs:
            raise ValueError(f"triplet symbols must lie in [0, {self.n_obs})")
        arr.setflags(write=False)
        object.__setattr__(self, "triplets", arr)
        object.__setattr__(self, "n_obs", int(self.n_obs))

    def __len__(self):
        return self.triplets.shape[0]

    @property
    def count(self):
        return self.triplets.shape[0]


# ---------------------------------------------------------------------------
# Toy configurations
# ---------------------------------------------------------------------------

def _noisy_identity(n, accuracy):
    if n == 1:
        return np.ones((1, 1))
    off = (1.0 - accuracy) / (n - 1)
    O = np.full((n, n), off)
    np.fill_diagonal(O, accuracy)
    return O


def make_ring():
    """Five-state ring with imbalanced visitation.

    h1 moves to h2 or h5 with equal probability; h2 and h5 go back to h1
    w.p. 0.9 and on to h3 / h4 w.p. 0.1; h3 and h4 each lead back one step
    (h3 -> h2, h4 -> h3).  States are observed correctly w.p. 0.6 and as any
    other state w.p. 0.1.  The initial law is uniform.
    """
    T = np.zeros((5, 5))
    T[1, 0] = T[4, 0] = 0.5
    T[0, 1], T[2, 1] = 0.9, 0.1
    T[1, 2] = 1.0
    T[2, 3] = 1.0
    T[0, 4], T[3, 4] = 0.9, 0.1
    return HmmModel(T, _noisy_identity(5, 0.6), np.full(5, 0.2))


def make_grid(rows, cols, obs_acc=0.9):
    """Random walk on a ``rows x cols`` lattice with uniform 4-neighbour moves."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    if not 0 < obs_acc <= 1:
        raise ValueError("obs_acc must lie in (0, 1]")
    n = rows * cols
    if n == 1 and obs_acc < 1:
        raise ValueError("a 1x1 grid has no other state to spread observation noise over")
    T = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            j = r * cols + c
            nbrs = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                    if 0 <= r + dr < rows and 0 <= c + dc < cols]
            if not nbrs:
                T[j, j] = 1.0
                continue
            for rr, cc in nbrs:
                T[rr * cols + cc, j] = 1.0 / len(nbrs)
    return HmmModel(T, _noisy_identity(n, obs_acc), np.full(n, 1.0 / n))


def make_chain(n_states=5, p_reset=0.1, obs_noise=0.0):
    """Chain that advances w.p. ``1 - p_reset`` and otherwise resets to state 1.

    The last state always returns to the first.  ``obs_noise`` is the total
    probability of misreporting the state (0 gives the identity observation
    matrix).  The chain always starts in the first state.
    """
    if n_states < 2:
        raise ValueError("a chain needs at least two states")
    if not 0 <= p_reset <= 1:
        raise ValueError("p_reset must lie in [0, 1]")
    if not 0 <= obs_noise < 1:
        raise ValueError("obs_noise must lie in [0, 1)")
    T = np.zeros((n_states, n_states))
    for j in range(n_states - 1):
        T[j + 1, j] += 1.0 - p_reset
        T[0, j] += p_reset
    T[0, n_states - 1] = 1.0
    pi = np.zeros(n_states)
    pi[0] = 1.0
    return HmmModel(T, _noisy_identity(n_states, 1.0 - obs_noise), pi)


def make_cycle(n_states):
    """Deterministic cycle 0 -> 1 -> ... -> n-1 -> 0 observed exactly from state 0."""
    T = np.roll(np.eye(n_states), 1, axis=0)
    pi = np.zeros(n_states)
    pi[0] = 1.0
    return HmmModel(T, np.eye(n_states), pi)


def make_random_hmm(n_obs, n_hidden, seed, concentration=1.0, self_transition=0.0):
    """Random HMM with Dirichlet columns.

    ``self_transition`` mixes a fraction of the identity into T, which keeps
    the transition operator comfortably full rank.
    """
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.full(n_hidden, concentration), size=n_hidden).T
    T = (1.0 - self_transition) * T + self_transition * np.eye(n_hidden)
    O = rng.dirichlet(np.full(n_obs, concentration), size=n_hidden).T
    pi = rng.dirichlet(np.full(n_hidden, concentration))
    # Dirichlet draws can be off by a few ulps
    T /= T.sum(axis=0, keepdims=True)
    O /= O.sum(axis=0, keepdims=True)
    pi /= pi.sum()
    return HmmModel(T, O, pi)


def make_deterministic_string(length):
    """Ten zeros followed by ``length - 10`` ones."""
    if length < 10:
        raise ValueError("the deterministic string needs length >= 10")
    seq = np.ones(length, dtype=np.int64)
    seq[:10] = 0
    return seq


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _draw(cum, u):
    # cum: (k, N) column cumulative sums; u: (N,) uniforms.
    idx = (u[None, :] >= cum).sum(axis=0)
    return np.minimum(idx, cum.shape[0] - 1)


def _rollouts(model, n_paths, length, rng):
    """Observation paths of shape (n_paths, length)."""
    cumT = np.cumsum(model.transition, axis=0)
    cumO = np.cumsum(model.observation, axis=0)
    cumpi = np.cumsum(model.initial)[:, None]
    obs = np.empty((n_paths, length), dtype=np.int64)
    h = _draw(cumpi, rng.random(n_paths))
    for t in range(length):
        if t > 0:
            h = _draw(cumT[:, h], rng.random(n_paths))
        obs[:, t] = _draw(cumO[:, h], rng.random(n_paths))
    return obs


def sample_sequence(model, length, seed):
    """Draw one observation sequence of the given length."""
    if length < 1:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    return _rollouts(model, 1, length, rng)[0]


def sample_sequences(model, n_sequences, length, seed):
    """Draw ``n_sequences`` independent sequences, shape (n_sequences, length)."""
    rng = np.random.default_rng(seed)
    return _rollouts(model, n_sequences, length, rng)


def sliding_triplets(sequences, n_obs):
    """All consecutive windows ``(x_t, x_{t+1}, x_{t+2})`` of one or more sequences."""
    if isinstance(sequences, np.ndarray) and sequences.ndim == 1:
        sequences = [sequences]
    windows = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size >= 3:
            windows.append(np.stack([seq[:-2], seq[1:-1], seq[2:]], axis=1))
    if not windows:
        raise ValueError("no sequence is long enough to yield a triplet")
    return TripletDataset(np.concatenate(windows), n_obs)


def sample_triplets(model, n_samples, mode="independent", seed=None):
    """Simulate N triplets.

    ``mode="independent"`` takes the first three observations of N fresh
    rollouts from the initial law; ``mode="sliding"`` takes every window of a
    single rollout of length ``n_samples + 2``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    if mode == "independent":
        return TripletDataset(_rollouts(model, n_samples, 3, rng), model.n_obs)
    if mode == "sliding":
        seq = _rollouts(model, 1, n_samples + 2, rng)[0]
        return sliding_triplets(seq, model.n_obs)
    raise ValueError(f"unknown triplet mode {mode!r}")


# ---------------------------------------------------------------------------
# Exact quantities
# ---------------------------------------------------------------------------

def true_log_joint_prob(model, seq):
    """log Pr(x_{1:t}) via the scaled forward recursion (-inf if impossible)."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("sequence must be non-empty")
    if seq.min() < 0 or seq.max() >= model.n_obs:
        raise ValueError("symbol out of range")
    O, T = model.observation, model.transition
    alpha = model.initial * O[seq[0]]
    log_scale = 0.0
    for x in seq[1:]:
        total = alpha.sum()
        if total <= 0:
            return -np.inf
        log_scale += np.log(total)
        alpha = O[x] * (T @ (alpha / total))
    total = alpha.sum()
    if total <= 0:
        return -np.inf
    return log_scale + np.log(total)


def true_joint_prob(model, seq):
    """Exact Pr(x_{1:t}) under the model."""
    return float(np.exp(true_log_joint_prob(model, seq)))


def exact_stats(model):
    """Population observable statistics with the initial law at time 1."""
    from .moments import ObservableStats

    O, T, pi = model.observation, model.transition, model.initial
    p1 = O @ pi
    joint_h = T * pi[None, :]  # Pr(h2 = a, h1 = b)
    p21 = O @ joint_h @ O.T
    # P3[x] = O T diag(O[x]) T diag(pi) O^T
    p3 = np.einsum("ia,xa,ab,bj->xij", O @ T, O, joint_h, O.T)
    return ObservableStats(p1, p21, p3, sample_count=0)


def stationary_distribution(model):
    """Stationary law of the hidden chain (eigenvector of T for eigenvalue 1)."""
    w, v = np.linalg.eig(model.transition)
    idx = np.argmin(np.abs(w - 1.0))
    vec = np.real(v[:, idx])
    return vec / vec.sum()


def all_sequences(n_obs, length):
    """Every sequence of the given length over ``range(n_obs)`` as an int array."""
    return np.array(list(itertools.product(range(n_obs), repeat=length)), dtype=np.int64)
