"""Command-line interface: ``specmoment {simulate,fit,eval,repro}``.

Exit codes: 0 on success, 1 on usage errors (bad flags, invalid scenario
parameters, unreadable inputs), 2 on numerical or solver failures.
Diagnostics go to stderr; data goes to files or stdout.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import ENV_THREADS, resolve_threads
from .bench import (
    ExperimentConfig,
    load_sequences,
    predictive_error,
    rel_norm_detail,
    reports_to_csv,
    run_experiment,
)
from .hmm import (
    make_chain,
    make_deterministic_string,
    make_grid,
    make_random_hmm,
    make_ring,
    sample_sequences,
    sample_triplets,
    sliding_triplets,
)
from .io import (
    load_config,
    load_model,
    load_params,
    read_triplets,
    save_json,
    save_model,
    save_params,
    write_triplets,
)
from .mestimator import FitConfig, fit
from .moments import estimate_stats
from .spectral import fit_hsu

__all__ = ["main", "build_parser", "UsageError", "EXPERIMENTS"]

_FIT_DEFAULTS = FitConfig()


class UsageError(Exception):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _scenario_model(args):
    if args.scenario == "ring":
        return make_ring()
    if args.scenario == "grid":
        return make_grid(args.rows, args.cols, args.obs_acc)
    if args.scenario == "chain":
        return make_chain(args.n_states, args.p_reset, args.obs_noise)
    if args.scenario == "random-hmm":
        return make_random_hmm(args.n_obs, args.n_hidden, args.seed)
    return None


def cmd_simulate(args):
    out = Path(args.out)
    if args.scenario == "string":
        data = sliding_triplets(make_deterministic_string(args.length), 2)
        write_triplets(data, out)
        print(f"wrote {len(data)} triplets to {out}", file=sys.stderr)
        return 0
    model = _scenario_model(args)
    data = sample_triplets(model, args.n_triplets, args.mode, seed=args.seed)
    write_triplets(data, out)
    model_path = Path(args.model_out) if args.model_out else out.with_suffix(".model.json")
    save_model(model, model_path)
    print(f"wrote {len(data)} triplets to {out} and the model to {model_path}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args):
    data = read_triplets(args.triplets, args.n_obs)
    cfg = load_config(args.config) if args.config else FitConfig()
    changes = {"rank": args.rank, "n_threads": args.threads}
    if args.lam is not None:
        changes["lam"] = args.lam
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.outer_max_iters is not None:
        changes["outer_max_iters"] = args.outer_max_iters
    if args.restarts is not None:
        changes["n_random_restarts"] = args.restarts
    cfg = cfg.replace(**changes)
    if cfg.rank > data.n_obs:
        raise UsageError(f"--rank {cfg.rank} exceeds the alphabet size {data.n_obs}")
    t0 = time.perf_counter()
    if args.estimator == "spec":
        params = fit_hsu(estimate_stats(data), cfg.rank)
        trace = {"estimator": "spec", "rank": cfg.rank}
        summary = "spectral fit"
    else:
        params, tr = fit(data, cfg)
        trace = {"estimator": "m", "config": cfg.to_dict(), **tr.to_dict()}
        trace.pop("wall_time")
        summary = f"final loss {tr.final_loss:.6e} (restart {tr.chosen_restart})"
    elapsed = time.perf_counter() - t0
    save_params(params, args.out)
    trace_path = Path(args.trace) if args.trace else Path(args.out).with_suffix(".trace.json")
    save_json(trace, trace_path)
    print(f"{summary}; {elapsed:.2f} s; wrote {args.out} and {trace_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args):
    params = load_params(args.model)
    want_rel = args.metric in ("relnorm", "both")
    want_pred = args.metric in ("prederr", "both")
    truth = load_model(args.truth) if args.truth else None
    if want_rel and truth is None:
        raise UsageError("relnorm needs the true model (--truth)")
    if args.test_seqs:
        test, _ = load_sequences(args.test_seqs)
    elif truth is not None:
        test = list(sample_sequences(truth, args.n_test, args.test_length, seed=args.seed))
    else:
        raise UsageError("give --test-seqs or --truth to sample test sequences")
    rows = []
    if want_rel:
        rel = rel_norm_detail(params, truth, test, args.norm)
        rows.append(("relnorm", rel.value, rel.n_excluded))
    if want_pred:
        rows.append(("prederr", predictive_error(params, test), 0))
    for name, value, excluded in rows:
        print(f"{name} {value!r}")
    if args.out:
        lines = ["metric,value,n_excluded"] + [f"{n},{v!r},{e}" for n, v, e in rows]
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# repro
# ---------------------------------------------------------------------------

# per-experiment settings; each entry is (label, ExperimentConfig kwargs)
EXPERIMENTS = {
    "string": [("string", dict(scenario="deterministic_string",
                               params={"lengths": [10, 15, 25, 50]},
                               estimators=("spec", "m")))],
    "ring": [(f"rank{k}", dict(scenario="ring", rank=k, n_train=100)) for k in (4, 3, 2)],
    "grid": [(f"{g}x{g}", dict(scenario="grid", params={"rows": g, "cols": g},
                               n_train=100_000, n_replicates=5)) for g in (2, 3, 5)],
    # triplets from fresh rollouts all start in state 1, so P21 would have rank one
    "chain": [(f"p{p}", dict(scenario="chain", params={"p_reset": p}, n_train=50,
                             triplet_mode="sliding", rank=4))
              for p in (0.1, 0.3, 0.5)],
    "synthetic": [(f"N{n}", dict(scenario="synthetic_hmm",
                                 params={"n_obs": 5, "n_hidden": 3}, rank=3, n_train=n,
                                 n_replicates=10))
                  for n in (100, 1000, 10_000)],
}


def experiment_configs(name, seed, replicates=None, n_threads=1, overrides=None):
    configs = []
    for label, kwargs in EXPERIMENTS[name]:
        kw = dict(kwargs)
        kw.update(overrides or {})
        if replicates is not None:
            kw["n_replicates"] = replicates
        configs.append(ExperimentConfig(label=label, seed=seed, n_threads=n_threads, **kw))
    return configs


def cmd_repro(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = experiment_configs(args.experiment, args.seed, args.replicates, args.threads)
    reports = []
    for cfg in configs:
        print(f"running {args.experiment}/{cfg.label}", file=sys.stderr)
        reports.append(run_experiment(cfg))
    table = reports_to_csv(reports)
    (out / f"{args.experiment}.csv").write_text(table)
    full = {
        "experiment": args.experiment,
        "settings": [r.to_dict(with_provenance=False) for r in reports],
        "provenance": [r.provenance for r in reports],
    }
    save_json(full, out / f"{args.experiment}.json")
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="specmoment", formatter_class=fmt,
                     description="Spectral M-estimation for discrete hidden Markov models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${ENV_THREADS} or all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", formatter_class=fmt, help="sample triplets from a toy HMM")
    p.add_argument("--scenario", required=True,
                   choices=("ring", "grid", "chain", "string", "random-hmm"))
    p.add_argument("--n-triplets", type=int, default=100, help="number of triplets")
    p.add_argument("--mode", choices=("independent", "sliding"), default="independent",
                   help="fresh rollouts per triplet, or windows of one long rollout")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--rows", type=int, default=2, help="grid rows")
    p.add_argument("--cols", type=int, default=2, help="grid columns")
    p.add_argument("--obs-acc", type=float, default=0.9, help="grid observation accuracy")
    p.add_argument("--n-states", type=int, default=5, help="chain length")
    p.add_argument("--p-reset", type=float, default=0.1, help="chain reset probability")
    p.add_argument("--obs-noise", type=float, default=0.0, help="chain misreport probability")
    p.add_argument("--n-obs", type=int, default=5, help="random-hmm alphabet size")
    p.add_argument("--n-hidden", type=int, default=3, help="random-hmm hidden states")
    p.add_argument("--length", type=int, default=15, help="deterministic string length")
    p.add_argument("--model-out", default=None,
                   help="model file (default: OUT with suffix .model.json)")
    p.add_argument("--out", required=True, help="triplet file to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", formatter_class=fmt, help="fit an estimator to a triplet file")
    p.add_argument("--triplets", required=True, help="triplet file, one 'x1 x2 x3' per line")
    p.add_argument("--estimator", choices=("spec", "m"), required=True)
    p.add_argument("--rank", type=int, required=True, help="model rank k")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"L1 strength (default: config file or {_FIT_DEFAULTS.lam})")
    p.add_argument("--config", default=None, help="FitConfig JSON file")
    p.add_argument("--seed", type=int, default=None,
                   help=f"restart seed (default: config file or {_FIT_DEFAULTS.seed})")
    p.add_argument("--outer-max-iters", type=int, default=None,
                   help=f"weight refreshes (default: config or {_FIT_DEFAULTS.outer_max_iters})")
    p.add_argument("--restarts", type=int, default=None,
                   help=f"random restarts (default: config or {_FIT_DEFAULTS.n_random_restarts})")
    p.add_argument("--n-obs", type=int, default=None,
                   help="alphabet size (default: largest symbol + 1)")
    p.add_argument("--trace", default=None, help="trace file (default: OUT with suffix .trace.json)")
    p.add_argument("--out", required=True, help="parameter file to write")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", formatter_class=fmt, help="score a fitted parameter file")
    p.add_argument("--model", required=True, help="parameter file from 'fit'")
    p.add_argument("--truth", default=None, help="true model file (needed for relnorm)")
    p.add_argument("--test-seqs", default=None, help="test sequence file, one per line")
    p.add_argument("--metric", choices=("relnorm", "prederr", "both"), default="both")
    p.add_argument("--norm", choices=("mean", "l2"), default="mean",
                   help="relnorm aggregation")
    p.add_argument("--n-test", type=int, default=100,
                   help="test sequences sampled from --truth when --test-seqs is absent")
    p.add_argument("--test-length", type=int, default=4, help="length of sampled test sequences")
    p.add_argument("--seed", type=int, default=0, help="seed for sampled test sequences")
    p.add_argument("--out", default=None, help="CSV report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", formatter_class=fmt, help="rerun a toy experiment")
    p.add_argument("--experiment", required=True, choices=tuple(EXPERIMENTS))
    p.add_argument("--replicates", type=int, default=None,
                   help="replicates per setting (default: the experiment's own)")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", default="repro-out", help="output directory")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.threads = resolve_threads(args.threads)
        if getattr(args, "rank", None) is not None and args.rank < 1:
            raise UsageError("--rank must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    # LinAlgError subclasses ValueError, so it has to be caught first
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
