"""Evaluation metrics, toy-experiment runners and sequence-file ingestion.

An :class:`ExperimentConfig` describes one setting of one scenario (say, the
ring at rank 4).  :func:`run_experiment` draws every replicate from its own
child seed, fits the requested estimators, scores them on held-out data and
aggregates the results into an :class:`ExperimentReport`.  Reports are a
pure function of the config; only the ``provenance`` block carries a
timestamp.
"""

from dataclasses import dataclass, field, asdict, fields
import csv
import datetime
import io as _io
import logging
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import pmap
from .hmm import (
    make_chain,
    make_deterministic_string,
    make_grid,
    make_random_hmm,
    make_ring,
    sample_sequences,
    sample_triplets,
    sliding_triplets,
    true_joint_prob,
)
from .inference import joint_prob, next_symbol_dist
from .mestimator import FitConfig, fit
from .moments import estimate_stats
from .spectral import fit_hsu, top_left_singular_vectors

__all__ = [
    "ESTIMATORS",
    "SCENARIOS",
    "DEFAULT_LAMBDA",
    "EXCLUDE_BELOW",
    "RelNorm",
    "rel_norm_detail",
    "rel_norm_diff",
    "predictive_error",
    "ExperimentConfig",
    "ExperimentReport",
    "run_experiment",
    "load_sequences",
    "write_sequences",
    "reports_to_csv",
    "operator_scalar",
]

logger = logging.getLogger(__name__)

ESTIMATORS = ("spec", "m", "m_regularized")
SCENARIOS = ("deterministic_string", "ring", "grid", "chain", "synthetic_hmm", "dataset_file")
DEFAULT_LAMBDA = {
    "deterministic_string": 0.0,
    "ring": 0.01,
    "grid": 1e-3,
    "chain": 1e-3,
    "synthetic_hmm": 1e-3,
    "dataset_file": 1e-5,
}
# true probabilities below this are too small for a relative error
EXCLUDE_BELOW = 1e-15


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelNorm:
    value: float
    n_included: int
    n_excluded: int


def rel_norm_detail(params, model, test, norm="mean"):
    """Relative error of the raw joint-probability estimate over test sequences.

    ``norm="mean"`` averages ``|P_hat(s) - P(s)| / P(s)`` over sequences;
    ``norm="l2"`` is ``||P_hat - P||_2 / ||P||_2`` over the vector of test
    probabilities.  Sequences whose true probability is below
    :data:`EXCLUDE_BELOW` are left out and counted.
    """
    if len(test) == 0:
        raise ValueError("the test set is empty")
    if norm not in ("mean", "l2"):
        raise ValueError(f"unknown norm {norm!r}")
    truth = np.array([true_joint_prob(model, s) for s in test])
    keep = truth >= EXCLUDE_BELOW
    if not keep.any():
        raise ValueError("every test sequence has negligible true probability")
    est = np.array([joint_prob(params, s) for s, k in zip(test, keep) if k])
    p = truth[keep]
    if norm == "mean":
        value = float(np.mean(np.abs(est - p) / p))
    else:
        value = float(np.linalg.norm(est - p) / np.linalg.norm(p))
    return RelNorm(value, int(keep.sum()), int((~keep).sum()))


def rel_norm_diff(params, model, test, norm="mean"):
    return rel_norm_detail(params, model, test, norm).value


def predictive_error(params, test):
    """Fraction of positions t >= 2 whose argmax prediction misses x_t.

    ``np.argmax`` returns the first maximizer, so ties go to the smallest
    symbol index.
    """
    misses = total = 0
    for seq in test:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size < 2:
            raise ValueError("predictive error needs sequences of length >= 2")
        for t in range(1, seq.size):
            dist = next_symbol_dist(params, seq[:t])
            misses += int(np.argmax(dist) != seq[t])
            total += 1
    return misses / total


# ---------------------------------------------------------------------------
# Sequence files
# ---------------------------------------------------------------------------

def load_sequences(path, alphabet=None, mode="token"):
    """Read one sequence per line.

    ``mode="token"`` splits lines on whitespace, ``mode="char"`` makes every
    character a token.  ``alphabet`` (token -> index) fixes the mapping; when
    absent it is induced in first-seen order.  Returns
    ``(sequences, alphabet)``.
    """
    if mode not in ("token", "char"):
        raise ValueError(f"unknown mode {mode!r}")
    lines = Path(path).read_text().splitlines()
    fixed = alphabet is not None
    mapping = dict(alphabet) if fixed else {}
    seqs = []
    for lineno, line in enumerate(lines, 1):
        tokens = list(line) if mode == "char" else line.split()
        if not tokens:
            continue
        row = []
        for tok in tokens:
            if tok not in mapping:
                if fixed:
                    raise ValueError(f"{path}:{lineno}: token {tok!r} is not in the alphabet")
                mapping[tok] = len(mapping)
            row.append(mapping[tok])
        seqs.append(np.array(row, dtype=np.int64))
    if not seqs:
        raise ValueError(f"{path}: no sequences")
    return seqs, mapping


def write_sequences(seqs, path, alphabet=None, mode="token"):
    """Inverse of :func:`load_sequences`."""
    inverse = None
    if alphabet is not None:
        inverse = {v: k for k, v in alphabet.items()}
    sep = "" if mode == "char" else " "
    out = []
    for seq in seqs:
        toks = [inverse[int(v)] if inverse else str(int(v)) for v in seq]
        out.append(sep.join(toks) + "\n")
    Path(path).write_text("".join(out))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """One setting of one scenario.

    ``params`` holds scenario parameters: ``lengths`` (deterministic_string),
    ``rows``/``cols``/``obs_acc`` (grid), ``p_reset``/``n_states``/
    ``obs_noise`` (chain), ``n_obs``/``n_hidden`` (synthetic_hmm), ``path``/
    ``mode`` (dataset_file).  ``lam`` defaults to the scenario's value in
    :data:`DEFAULT_LAMBDA`; ``rank`` defaults to the alphabet size.
    ``fit_overrides`` are applied to the :class:`FitConfig` of both
    M-estimators.
    """

    scenario: str
    params: dict = field(default_factory=dict)
    n_train: int = 100
    triplet_mode: str = "independent"
    n_test_sequences: int = 100
    test_sequence_length: int = 4
    estimators: tuple = ESTIMATORS
    rank: int = None
    lam: float = None
    fit_overrides: dict = field(default_factory=dict)
    seed: int = 0
    n_replicates: int = 30
    norm: str = "mean"
    train_fraction: float = 0.8
    n_threads: int = 1
    label: str = ""

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        self.estimators = tuple(self.estimators)
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        bad = sorted(set(self.estimators) - set(ESTIMATORS))
        if bad:
            raise ValueError(f"unknown estimators {bad}")
        for name in ("n_train", "n_test_sequences", "n_replicates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.test_sequence_length < 2:
            raise ValueError("test sequences need length >= 2")
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be positive")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.scenario]
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.triplet_mode not in ("independent", "sliding"):
            raise ValueError(f"unknown triplet mode {self.triplet_mode!r}")
        FitConfig.from_dict({"rank": 1, **self.fit_overrides})

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown ExperimentConfig keys: {unknown}")
        return cls(**d)


@dataclass
class ExperimentReport:
    """Aggregated metrics plus everything needed to audit them.

    ``rows`` has one entry per (setting, estimator, metric) with the mean and
    standard error over successful replicates (``se`` is ``None`` with
    fewer than two).  ``raw`` keeps the per-replicate values, ``None`` for a
    failed cell.
    """

    config: dict
    rows: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def row(self, estimator, metric, setting=None):
        for r in self.rows:
            if r["estimator"] == estimator and r["metric"] == metric and \
                    (setting is None or r["setting"] == setting):
                return r
        raise KeyError((estimator, metric, setting))

    def to_dict(self, with_provenance=True):
        d = asdict(self)
        if not with_provenance:
            d.pop("provenance")
        return d


def _child_seeds(seed, rep):
    data, test, fitting = np.random.SeedSequence([int(seed), int(rep)]).spawn(3)
    return data, test, int(fitting.generate_state(1)[0])


def _scenario_model(config, rep_seed):
    p = config.params
    if config.scenario == "ring":
        return make_ring()
    if config.scenario == "grid":
        return make_grid(int(p.get("rows", 2)), int(p.get("cols", 2)), float(p.get("obs_acc", 0.9)))
    if config.scenario == "chain":
        return make_chain(int(p.get("n_states", 5)), float(p.get("p_reset", 0.5)),
                          float(p.get("obs_noise", 0.0)))
    if config.scenario == "synthetic_hmm":
        return make_random_hmm(int(p.get("n_obs", 5)), int(p.get("n_hidden", 3)), rep_seed,
                               self_transition=float(p.get("self_transition", 0.0)))
    raise ValueError(f"scenario {config.scenario!r} has no generating model")


def _fit_config(config, rank, lam, seed):
    return FitConfig.from_dict({**config.fit_overrides, "rank": rank, "lam": lam,
                                "seed": seed, "n_threads": 1})


def _fit_estimator(name, data, config, rank, seed):
    """Returns (params, trace summary or None)."""
    if name == "spec":
        return fit_hsu(estimate_stats(data), rank), None
    lam = config.lam if name == "m_regularized" else 0.0
    params, trace = fit(data, _fit_config(config, rank, lam, seed))
    summary = {
        "chosen_restart": trace.chosen_restart,
        "final_loss": trace.final_loss,
        "final_penalty": trace.final_penalty,
        "selection_losses": trace.selection_losses,
        "outer_iterations": sum(1 for r in trace.records if r["restart"] == trace.chosen_restart),
        "failures": trace.failures,
    }
    return params, summary


def _toy_replicate(config, rep):
    data_seed, test_seed, fit_seed = _child_seeds(config.seed, rep)
    model = _scenario_model(config, data_seed)
    rank = config.rank or model.n_obs
    data = sample_triplets(model, config.n_train, config.triplet_mode, seed=data_seed)
    test = list(sample_sequences(model, config.n_test_sequences,
                                 config.test_sequence_length, seed=test_seed))
    out = {}
    for name in config.estimators:
        try:
            params, summary = _fit_estimator(name, data, config, rank, fit_seed)
            rel = rel_norm_detail(params, model, test, config.norm)
            out[name] = {
                "relnorm": rel.value,
                "prederr": predictive_error(params, test),
                "excluded": rel.n_excluded,
                "trace": summary,
            }
        except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _split(seqs, fraction):
    if len(seqs) >= 2:
        cut = min(max(int(round(fraction * len(seqs))), 1), len(seqs) - 1)
        return seqs[:cut], seqs[cut:]
    seq = seqs[0]
    cut = int(round(fraction * seq.size))
    if cut < 3 or seq.size - cut < 2:
        raise ValueError("the single sequence is too short to split")
    return [seq[:cut]], [seq[cut:]]


def _dataset_replicate(config, rep):
    p = config.params
    alphabet = p.get("alphabet")
    seqs, mapping = load_sequences(p["path"], alphabet, p.get("mode", "token"))
    n = len(mapping)
    train, test = _split(seqs, config.train_fraction)
    data = sliding_triplets([s for s in train if s.size >= 3], n)
    rank = min(config.rank or n, n)
    _, _, fit_seed = _child_seeds(config.seed, rep)
    out = {}
    for name in config.estimators:
        try:
            params, summary = _fit_estimator(name, data, config, rank, fit_seed)
            out[name] = {"prederr": predictive_error(params, [s for s in test if s.size >= 2]),
                         "trace": summary}
        except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def operator_scalar(params, symbol, basis):
    """``u^T B_x u`` for a one-dimensional basis ``u`` (projected forms pass through)."""
    if params.is_projected:
        return float(params.b_ops[symbol][0, 0])
    u = basis[:, 0]
    return float(u @ params.b_ops[symbol] @ u)


def _string_rows(config):
    """Scalar B_0 for the rank-one fit of the deterministic string at each length."""
    lengths = [int(v) for v in config.params.get("lengths", (10, 15, 25, 50))]
    rows, raw, traces, failures = [], {}, [], []
    for length in lengths:
        data = sliding_triplets(make_deterministic_string(length), 2)
        stats = estimate_stats(data)
        basis, _ = top_left_singular_vectors(stats.p21, 1)
        for name in config.estimators:
            try:
                params, summary = _fit_estimator(name, data, config, 1, config.seed)
                value = operator_scalar(params, 0, basis)
            except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
                failures.append({"setting": length, "estimator": name, "error": str(exc)})
                value, summary = None, None
            raw.setdefault(f"{length}/{name}", []).append(value)
            traces.append({"setting": length, "estimator": name, "trace": summary})
            rows.append(_row(str(length), name, "b0", [value]))
    return rows, raw, traces, failures


def _row(setting, estimator, metric, values):
    ok = [v for v in values if v is not None]
    mean = float(np.mean(ok)) if ok else None
    se = float(np.std(ok, ddof=1) / np.sqrt(len(ok))) if len(ok) >= 2 else None
    return {
        "setting": setting,
        "estimator": estimator,
        "metric": metric,
        "mean": mean,
        "se": se,
        "n_ok": len(ok),
        "n_failed": len(values) - len(ok),
    }


def run_experiment(config):
    """Run every replicate of ``config`` and aggregate.

    Replicates run in parallel over ``config.n_threads`` workers; each is a
    function of its own child seed only, and results are gathered in
    replicate order, so the report does not depend on the thread count.
    """
    started = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    report = ExperimentReport(config=config.to_dict())
    setting = config.label or config.scenario
    if config.scenario == "deterministic_string":
        report.rows, report.raw, report.traces, report.failures = _string_rows(config)
    else:
        worker = _dataset_replicate if config.scenario == "dataset_file" else _toy_replicate
        n_rep = 1 if config.scenario == "dataset_file" else config.n_replicates
        results = pmap(lambda rep: worker(config, rep), range(n_rep), config.n_threads)
        metrics = ("prederr",) if config.scenario == "dataset_file" else ("relnorm", "prederr")
        for name in config.estimators:
            cells = [res[name] for res in results]
            for metric in metrics:
                values = [c.get(metric) for c in cells]
                report.raw[f"{setting}/{name}/{metric}"] = values
                report.rows.append(_row(setting, name, metric, values))
            if "relnorm" in metrics:
                report.excluded[f"{setting}/{name}"] = int(sum(c.get("excluded", 0) for c in cells))
            for rep, c in enumerate(cells):
                if "error" in c:
                    report.failures.append({"setting": setting, "estimator": name,
                                            "replicate": rep, "error": c["error"]})
                elif c.get("trace") is not None:
                    report.traces.append({"setting": setting, "estimator": name,
                                          "replicate": rep, "trace": c["trace"]})
    report.provenance = {
        "software": "specmoment",
        "version": __version__,
        "seed": config.seed,
        "replicate_seeds": [[config.seed, rep] for rep in range(config.n_replicates)],
        "started_utc": started,
    }
    return report


_CSV_FIELDS = ("setting", "estimator", "metric", "mean", "se", "n_ok", "n_failed")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports):
    """Comma-separated table with one line per (setting, estimator, metric)."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for report in reports:
        for row in report.rows:
            writer.writerow([_fmt(row[k]) for k in _CSV_FIELDS])
    return buf.getvalue()
